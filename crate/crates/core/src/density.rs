//! Gaussian KDE over (log) watermark scores and shifted minority densities.
//!
//! The pool density `p` is a fixed-bandwidth Gaussian KDE. The minority
//! density `q` is the same KDE evaluated through an affine map of the query,
//!
//! ```text
//! q(x) = p(((x - q_anchor) / sigma_q) * sigma_p + p_anchor)
//! ```
//!
//! with anchors taken from sample means ([`mean_shift`]) or from lower
//! quantiles chosen by minority sample size ([`quantile_shift`]). Importance
//! weights are the normalized ratios `q/p` over the calibration points and
//! the test point.

use serde::{Deserialize, Serialize};

use crate::conformal::WEIGHT_SUM_TOLERANCE;
use crate::error::{Error, Result};
use crate::quantile::{mean, quantile, std_dev};

pub const DEFAULT_BANDWIDTH: f64 = 0.5;

/// Standard deviations below this are floored.
pub const SIGMA_FLOOR: f64 = 1e-8;

/// Pool density evaluations below this are floored before division.
pub const DENSITY_FLOOR: f64 = 1e-300;

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Scale on which densities are estimated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreScale {
    #[default]
    Log10,
    Raw,
}

impl ScoreScale {
    pub fn apply(self, value: f64) -> f64 {
        match self {
            ScoreScale::Log10 => value.log10(),
            ScoreScale::Raw => value,
        }
    }

    pub fn apply_all(self, values: &[f64]) -> Vec<f64> {
        values.iter().map(|&v| self.apply(v)).collect()
    }
}

/// `x -> scale * x + offset`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineTransform {
    pub scale: f64,
    pub offset: f64,
}

impl AffineTransform {
    pub const IDENTITY: AffineTransform = AffineTransform {
        scale: 1.0,
        offset: 0.0,
    };

    /// The map `x -> ((x - from) / sigma_from) * sigma_to + to`.
    pub fn anchored(from: f64, sigma_from: f64, to: f64, sigma_to: f64) -> Self {
        let scale = sigma_to / sigma_from;
        Self {
            scale,
            offset: to - from * scale,
        }
    }

    pub fn apply(&self, x: f64) -> f64 {
        self.scale * x + self.offset
    }

    pub fn is_identity(&self) -> bool {
        self.scale == 1.0 && self.offset == 0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftMethod {
    Mean,
    Quantile,
}

impl std::str::FromStr for ShiftMethod {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "mean" => Ok(ShiftMethod::Mean),
            "quantile" => Ok(ShiftMethod::Quantile),
            other => Err(format!("unknown shift `{other}`")),
        }
    }
}

/// Which anchor rule the quantile shift used for a given minority size `m`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantileBranch {
    /// `m <= 1/(2 alpha)`: minority minimum against the pool's `1/m` quantile.
    Min,
    /// `m <= 1/alpha`: both anchors at level `2 alpha`.
    TwoAlpha,
    /// Otherwise both anchors at level `alpha`.
    Alpha,
}

impl QuantileBranch {
    pub fn as_str(&self) -> &'static str {
        match self {
            QuantileBranch::Min => "min",
            QuantileBranch::TwoAlpha => "two_alpha",
            QuantileBranch::Alpha => "alpha",
        }
    }
}

/// Parameters of a fitted shift.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShiftEstimate {
    pub method: ShiftMethod,
    pub branch: Option<QuantileBranch>,
    pub q_anchor: f64,
    pub p_anchor: f64,
    pub sigma_p: f64,
    pub sigma_q: f64,
}

/// Fixed-bandwidth Gaussian KDE, optionally evaluated through an affine
/// map of the query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityModel {
    support_points: Vec<f64>,
    bandwidth: f64,
    transform: AffineTransform,
    shift: Option<ShiftEstimate>,
}

impl DensityModel {
    pub fn support_points(&self) -> &[f64] {
        &self.support_points
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn transform(&self) -> AffineTransform {
        self.transform
    }

    pub fn shift(&self) -> Option<&ShiftEstimate> {
        self.shift.as_ref()
    }

    /// Density of the untransformed KDE at `y`.
    pub fn base_density(&self, y: f64) -> f64 {
        let h = self.bandwidth;
        let sum: f64 = self
            .support_points
            .iter()
            .map(|&xj| {
                let z = (y - xj) / h;
                (-0.5 * z * z).exp()
            })
            .sum();
        FRAC_1_SQRT_2PI * sum / (self.support_points.len() as f64 * h)
    }

    pub fn evaluate(&self, x: f64) -> f64 {
        self.base_density(self.transform.apply(x))
    }

    fn with_transform(&self, transform: AffineTransform, shift: ShiftEstimate) -> Self {
        Self {
            support_points: self.support_points.clone(),
            bandwidth: self.bandwidth,
            transform,
            shift: Some(shift),
        }
    }
}

pub fn fit_kde(log_scores: &[f64], bandwidth: f64) -> Result<DensityModel> {
    if log_scores.is_empty() {
        return Err(Error::EmptyInput("KDE support"));
    }
    if !(bandwidth > 0.0 && bandwidth.is_finite()) {
        return Err(Error::InvalidBandwidth(bandwidth));
    }
    Ok(DensityModel {
        support_points: log_scores.to_vec(),
        bandwidth,
        transform: AffineTransform::IDENTITY,
        shift: None,
    })
}

fn floored_std(values: &[f64]) -> Result<f64> {
    Ok(std_dev(values)?.max(SIGMA_FLOOR))
}

/// Shifts the pool KDE so that the minority mean and spread map onto the
/// pool's.
pub fn mean_shift(pool_logs: &[f64], minority_logs: &[f64], bandwidth: f64) -> Result<DensityModel> {
    let base = fit_kde(pool_logs, bandwidth)?;
    if minority_logs.is_empty() {
        return Err(Error::EmptyInput("minority scores"));
    }
    let shift = ShiftEstimate {
        method: ShiftMethod::Mean,
        branch: None,
        q_anchor: mean(minority_logs)?,
        p_anchor: mean(pool_logs)?,
        sigma_p: floored_std(pool_logs)?,
        sigma_q: floored_std(minority_logs)?,
    };
    Ok(base.with_transform(transform_for(&shift), shift))
}

/// Selects the anchor rule for `m` minority scores at level `alpha`.
pub fn quantile_branch(m: usize, alpha: f64) -> QuantileBranch {
    // m <= 1/(2a) and m <= 1/a written multiplicatively; the slack absorbs
    // representation error in alpha (e.g. 10 * 0.1 at alpha = 0.05).
    const SLACK: f64 = 1e-12;
    let m = m as f64;
    if m * 2.0 * alpha <= 1.0 + SLACK {
        QuantileBranch::Min
    } else if m * alpha <= 1.0 + SLACK {
        QuantileBranch::TwoAlpha
    } else {
        QuantileBranch::Alpha
    }
}

/// Shifts the pool KDE by matching lower-tail anchors of the minority and
/// pool scores.
pub fn quantile_shift(pool_logs: &[f64], minority_logs: &[f64], bandwidth: f64, alpha: f64) -> Result<DensityModel> {
    let base = fit_kde(pool_logs, bandwidth)?;
    if minority_logs.is_empty() {
        return Err(Error::EmptyInput("minority scores"));
    }
    if !(alpha > 0.0 && alpha < 0.5) {
        return Err(Error::InvalidAlpha(alpha, "(0, 0.5)"));
    }
    let m = minority_logs.len();
    let branch = quantile_branch(m, alpha);
    let (q_anchor, p_anchor) = match branch {
        QuantileBranch::Min => (
            minority_logs.iter().copied().fold(f64::INFINITY, f64::min),
            quantile(pool_logs, 1.0 / m as f64)?,
        ),
        QuantileBranch::TwoAlpha => (quantile(minority_logs, 2.0 * alpha)?, quantile(pool_logs, 2.0 * alpha)?),
        QuantileBranch::Alpha => (quantile(minority_logs, alpha)?, quantile(pool_logs, alpha)?),
    };
    let shift = ShiftEstimate {
        method: ShiftMethod::Quantile,
        branch: Some(branch),
        q_anchor,
        p_anchor,
        sigma_p: floored_std(pool_logs)?,
        sigma_q: floored_std(minority_logs)?,
    };
    Ok(base.with_transform(transform_for(&shift), shift))
}

fn transform_for(shift: &ShiftEstimate) -> AffineTransform {
    AffineTransform::anchored(shift.q_anchor, shift.sigma_q, shift.p_anchor, shift.sigma_p)
}

/// Fits `q` with the requested shift rule.
pub fn fit_shift(
    method: ShiftMethod,
    pool_logs: &[f64],
    minority_logs: &[f64],
    bandwidth: f64,
    alpha: f64,
) -> Result<DensityModel> {
    match method {
        ShiftMethod::Mean => mean_shift(pool_logs, minority_logs, bandwidth),
        ShiftMethod::Quantile => quantile_shift(pool_logs, minority_logs, bandwidth, alpha),
    }
}

/// Normalized importance weights for the calibration points and the test
/// point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightVector {
    calibration_weights: Vec<f64>,
    test_weight: f64,
}

impl WeightVector {
    pub fn new(calibration_weights: Vec<f64>, test_weight: f64) -> Result<Self> {
        let all = calibration_weights.iter().chain(std::iter::once(&test_weight));
        for (index, &value) in all.clone().enumerate() {
            if !(value.is_finite() && value >= 0.0) {
                return Err(Error::NegativeWeight { index, value });
            }
        }
        let total = crate::conformal::compensated_sum(all.copied());
        if (total - 1.0).abs() > WEIGHT_SUM_TOLERANCE {
            return Err(Error::WeightsNotNormalized(total));
        }
        Ok(Self {
            calibration_weights,
            test_weight,
        })
    }

    /// Equal weights `1/(n+1)`.
    pub fn uniform(n: usize) -> Self {
        let w = 1.0 / (n + 1) as f64;
        Self {
            calibration_weights: vec![w; n],
            test_weight: w,
        }
    }

    /// Normalizes nonnegative ratios; the last entry is the test point.
    fn from_ratios(calibration_ratios: &[f64], test_ratio: f64, test_point: f64) -> Result<Self> {
        let total =
            crate::conformal::compensated_sum(calibration_ratios.iter().copied().chain(std::iter::once(test_ratio)));
        if !(total.is_finite() && total > 0.0) {
            return Err(Error::DensityUnderflow { point: test_point });
        }
        Self::new(
            calibration_ratios.iter().map(|r| r / total).collect(),
            test_ratio / total,
        )
    }

    pub fn calibration_weights(&self) -> &[f64] {
        &self.calibration_weights
    }

    pub fn test_weight(&self) -> f64 {
        self.test_weight
    }

    pub fn len(&self) -> usize {
        self.calibration_weights.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// `q(x) / max(p(x), DENSITY_FLOOR)`, rejecting non-finite results.
pub fn density_ratio(model_p: &DensityModel, model_q: &DensityModel, x: f64) -> Result<f64> {
    ratio_of(model_q.evaluate(x), model_p.evaluate(x), x)
}

/// `q / max(p, DENSITY_FLOOR)` for densities already evaluated at `x`.
pub fn ratio_of(q: f64, p: f64, x: f64) -> Result<f64> {
    let r = q / p.max(DENSITY_FLOOR);
    if r.is_finite() && r >= 0.0 {
        Ok(r)
    } else {
        Err(Error::DensityUnderflow { point: x })
    }
}

pub fn compute_weights(
    model_p: &DensityModel,
    model_q: &DensityModel,
    cal_logs: &[f64],
    test_log: f64,
) -> Result<WeightVector> {
    ImportanceWeighter::new(model_p, model_q, cal_logs)?.weights_for(test_log)
}

/// Caches the calibration ratios so many test points can be weighted
/// against the same calibration set.
#[derive(Debug, Clone)]
pub struct ImportanceWeighter<'a> {
    model_p: &'a DensityModel,
    model_q: &'a DensityModel,
    calibration_ratios: Vec<f64>,
}

impl<'a> ImportanceWeighter<'a> {
    pub fn new(model_p: &'a DensityModel, model_q: &'a DensityModel, cal_logs: &[f64]) -> Result<Self> {
        let calibration_ratios = cal_logs
            .iter()
            .map(|&x| density_ratio(model_p, model_q, x))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            model_p,
            model_q,
            calibration_ratios,
        })
    }

    pub fn calibration_ratios(&self) -> &[f64] {
        &self.calibration_ratios
    }

    pub fn weights_for(&self, test_log: f64) -> Result<WeightVector> {
        let test_ratio = density_ratio(self.model_p, self.model_q, test_log)?;
        WeightVector::from_ratios(&self.calibration_ratios, test_ratio, test_log)
    }
}

/// Weights from explicit ratios, normalized over calibration and test.
pub fn weights_from_ratios(calibration_ratios: &[f64], test_ratio: f64) -> Result<WeightVector> {
    for (index, &value) in calibration_ratios
        .iter()
        .chain(std::iter::once(&test_ratio))
        .enumerate()
    {
        if !(value.is_finite() && value >= 0.0) {
            return Err(Error::NegativeWeight { index, value });
        }
    }
    WeightVector::from_ratios(calibration_ratios, test_ratio, f64::NAN)
}
