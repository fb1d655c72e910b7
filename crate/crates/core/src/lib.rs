//! Conformal false-positive control for watermark-based detection of
//! unpermitted AI editing in student essays.
//!
//! Instructors calibrate against watermark scores of essays that followed the
//! permitted AI-use guideline, then flag a new submission when its conformal
//! p-value is small. Three procedures are provided:
//!
//! * [`standard_conformal_p`]: exchangeable calibration essays.
//! * [`hierarchical_conformal_p`]: calibration essays grouped by assignment.
//! * [`weighted_conformal_decision`]: a small target subgroup whose score
//!   distribution is shifted relative to the calibration pool, with
//!   importance weights from [`density`].
//!
//! [`sim`] drives synthetic end-to-end experiments; [`evaluation`] turns
//! decisions into FPR and power.

pub mod conformal;
pub mod density;
pub mod error;
pub mod evaluation;
pub mod io;
pub mod labeling;
pub mod quantile;
pub mod report;
pub mod sim;
pub mod textmetrics;

pub use conformal::{
    hierarchical_conformal_p, hierarchical_decision, standard_conformal_p, standard_decision,
    weighted_conformal_decision, CalibrationSet, Decision, GroupedCalibrationSet, Method, WatermarkScore,
};
pub use density::{
    compute_weights, fit_kde, mean_shift, quantile_shift, DensityModel, QuantileBranch, ScoreScale, ShiftEstimate,
    ShiftMethod, WeightVector,
};
pub use error::{Error, Result};
pub use evaluation::{aggregate, compute_fpr, compute_power, CellResult, MetricsReport};
pub use labeling::{bleu_quantile_threshold, classify, EditRecord, ViolationLabel};
pub use sim::{generate_scores, run_scenario, ExperimentConfig, Scenario, ScoreDistribution};
pub use textmetrics::{bleu, tokenize, BleuScore, TokenizedText};
