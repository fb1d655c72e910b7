use thiserror::Error;

/// Errors produced by the detection toolkit.
///
/// Every variant maps to a stable machine-readable kind string via
/// [`Error::kind`]; the CLI prints it on validation failures.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("calibration set is empty")]
    EmptyCalibration,

    #[error("calibration group {0} is empty")]
    EmptyGroup(usize),

    #[error("grouped calibration set has no groups")]
    NoGroups,

    #[error("score {value} for `{essay_id}` is outside (0, 1]")]
    ScoreOutOfRange { essay_id: String, value: f64 },

    #[error("alpha {0} is outside {1}")]
    InvalidAlpha(f64, &'static str),

    #[error("expected {expected} weights, got {actual}")]
    WeightLengthMismatch { expected: usize, actual: usize },

    #[error("weights sum to {0}, expected 1")]
    WeightsNotNormalized(f64),

    #[error("weight {index} is negative or non-finite: {value}")]
    NegativeWeight { index: usize, value: f64 },

    #[error("bandwidth must be positive and finite, got {0}")]
    InvalidBandwidth(f64),

    #[error("{0} is empty")]
    EmptyInput(&'static str),

    #[error("density ratio is not finite at x = {point}")]
    DensityUnderflow { point: f64 },

    #[error("no outliers to compute power over")]
    NoOutliers,

    #[error("no decisions to compute a rate over")]
    NoDecisions,

    #[error("missing cell: {0}")]
    MissingCell(String),

    #[error("invalid distribution parameters: {0}")]
    InvalidDistribution(String),

    #[error("invalid config at `{field}`: {message}")]
    InvalidConfig { field: String, message: String },

    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error("row {row}: field `{field}`: {message}")]
    /// `row` counts data rows from 1, excluding the header.
    Schema {
        row: usize,
        field: &'static str,
        message: String,
    },

    #[error("cannot read {path}: {message}")]
    Unreadable { path: String, message: String },

    #[error("io error on {path}: {message}")]
    Io { path: String, message: String },

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    /// Stable identifier for the error class.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::EmptyCalibration => "empty_calibration",
            Error::EmptyGroup(_) => "empty_group",
            Error::NoGroups => "no_groups",
            Error::ScoreOutOfRange { .. } => "score_out_of_range",
            Error::InvalidAlpha(..) => "invalid_alpha",
            Error::WeightLengthMismatch { .. } => "weight_length_mismatch",
            Error::WeightsNotNormalized(_) => "weights_not_normalized",
            Error::NegativeWeight { .. } => "negative_weight",
            Error::InvalidBandwidth(_) => "invalid_bandwidth",
            Error::EmptyInput(_) => "empty_input",
            Error::DensityUnderflow { .. } => "density_underflow",
            Error::NoOutliers => "no_outliers",
            Error::NoDecisions => "no_decisions",
            Error::MissingCell(_) => "missing_cell",
            Error::InvalidDistribution(_) => "invalid_distribution",
            Error::InvalidConfig { .. } => "invalid_config",
            Error::Parse { .. } => "parse_error",
            Error::Schema { .. } => "schema_violation",
            Error::Unreadable { .. } => "unreadable_input",
            Error::Io { .. } => "io_error",
            Error::Context { source, .. } => source.kind(),
        }
    }

    /// True for errors caused by bad user input rather than internal faults.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::Io { .. } => false,
            Error::Context { source, .. } => source.is_validation(),
            _ => true,
        }
    }

    pub fn context(self, context: impl Into<String>) -> Error {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
