//! Rank-based conformal p-values for watermark scores.
//!
//! A watermark score is the p-value a watermark detector assigns to a text
//! under the null "entirely human-written"; smaller means a stronger AI-edit
//! signal. Given scores of essays known to follow the permitted AI-use
//! guideline, the conformal p-value of a new score is the (smoothed) fraction
//! of calibration scores at least as strong:
//!
//! ```text
//! standard:      u(s)      = (1 + #{s_i <= s}) / (n + 1)
//! hierarchical:  u_hier(s) = (1 / (K + 1)) * [1 + sum_k #{s_ki <= s} / n_k]
//! weighted:      sum_i w_i * 1{s_i <= s} + w_test
//! ```
//!
//! Standard and hierarchical decisions flag when `p <= alpha`; the weighted
//! rule flags when the weighted mass is strictly below `alpha`.
//!
//! Indicators compare raw values. `log10` is strictly increasing so the
//! comparisons are identical on the log scale.

use serde::{Deserialize, Serialize};

use crate::density::WeightVector;
use crate::error::{Error, Result};

/// Tolerance on the sum of a weight vector.
pub const WEIGHT_SUM_TOLERANCE: f64 = 1e-9;

/// A watermark detector p-value for one essay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WatermarkScore {
    essay_id: String,
    value: f64,
}

impl WatermarkScore {
    pub fn new(essay_id: impl Into<String>, value: f64) -> Result<Self> {
        let essay_id = essay_id.into();
        if !(value > 0.0 && value <= 1.0) {
            return Err(Error::ScoreOutOfRange { essay_id, value });
        }
        Ok(Self { essay_id, value })
    }

    /// Anonymous score, for tests and simulation.
    pub fn anonymous(value: f64) -> Result<Self> {
        Self::new("", value)
    }

    pub fn essay_id(&self) -> &str {
        &self.essay_id
    }

    pub fn value(&self) -> f64 {
        self.value
    }

    /// `log10(value)`, always recomputed.
    pub fn log_value(&self) -> f64 {
        self.value.log10()
    }
}

/// Scores of essays that followed the permitted guideline.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationSet {
    scores: Vec<WatermarkScore>,
    provenance: String,
}

impl CalibrationSet {
    pub fn new(scores: Vec<WatermarkScore>, provenance: impl Into<String>) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::EmptyCalibration);
        }
        Ok(Self {
            scores,
            provenance: provenance.into(),
        })
    }

    /// Builds a set from raw values, validating each one.
    pub fn from_values(values: &[f64], provenance: impl Into<String>) -> Result<Self> {
        let scores = values
            .iter()
            .enumerate()
            .map(|(i, &v)| WatermarkScore::new(format!("cal-{i}"), v))
            .collect::<Result<Vec<_>>>()?;
        Self::new(scores, provenance)
    }

    pub fn scores(&self) -> &[WatermarkScore] {
        &self.scores
    }

    pub fn values(&self) -> Vec<f64> {
        self.scores.iter().map(WatermarkScore::value).collect()
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

/// Calibration scores split into `K` exchangeable groups (assignments/topics).
#[derive(Debug, Clone, PartialEq)]
pub struct GroupedCalibrationSet {
    groups: Vec<CalibrationSet>,
}

impl GroupedCalibrationSet {
    pub fn new(groups: Vec<CalibrationSet>) -> Result<Self> {
        if groups.is_empty() {
            return Err(Error::NoGroups);
        }
        Ok(Self { groups })
    }

    pub fn from_values(groups: &[Vec<f64>]) -> Result<Self> {
        let groups = groups
            .iter()
            .enumerate()
            .map(|(k, g)| {
                CalibrationSet::from_values(g, format!("group-{k}")).map_err(|e| match e {
                    Error::EmptyCalibration => Error::EmptyGroup(k),
                    other => other,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(groups)
    }

    pub fn groups(&self) -> &[CalibrationSet] {
        &self.groups
    }

    pub fn num_groups(&self) -> usize {
        self.groups.len()
    }

    /// All scores in group order.
    pub fn flatten(&self) -> Vec<f64> {
        self.groups.iter().flat_map(|g| g.values()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Standard,
    Hierarchical,
    Weighted,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Standard => "standard",
            Method::Hierarchical => "hierarchical",
            Method::Weighted => "weighted",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "standard" => Ok(Method::Standard),
            "hierarchical" => Ok(Method::Hierarchical),
            "weighted" => Ok(Method::Weighted),
            other => Err(format!("unknown method `{other}`")),
        }
    }
}

/// Outcome of testing one submission.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub conformal_p: f64,
    pub flagged: bool,
    pub alpha: f64,
    pub method: Method,
}

impl Decision {
    /// Applies the method's flag rule to a p-value.
    pub fn from_p(conformal_p: f64, alpha: f64, method: Method) -> Self {
        let flagged = match method {
            Method::Standard | Method::Hierarchical => conformal_p <= alpha,
            Method::Weighted => conformal_p < alpha,
        };
        Self {
            conformal_p,
            flagged,
            alpha,
            method,
        }
    }
}

pub(crate) fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidAlpha(alpha, "(0, 1)"))
    }
}

fn count_at_most(values: &[f64], s: f64) -> usize {
    values.iter().filter(|&&v| v <= s).count()
}

/// Standard conformal p-value over raw calibration values.
pub fn standard_p_value(calibration: &[f64], s: f64) -> Result<f64> {
    if calibration.is_empty() {
        return Err(Error::EmptyCalibration);
    }
    let n = calibration.len();
    Ok((1 + count_at_most(calibration, s)) as f64 / (n + 1) as f64)
}

/// Hierarchical conformal p-value over raw grouped values.
///
/// Per-group fractions are summed in sorted order so the result is
/// bit-identical under any reordering of the groups.
pub fn hierarchical_p_value(groups: &[Vec<f64>], s: f64) -> Result<f64> {
    if groups.is_empty() {
        return Err(Error::NoGroups);
    }
    let mut fractions = Vec::with_capacity(groups.len());
    for (k, group) in groups.iter().enumerate() {
        if group.is_empty() {
            return Err(Error::EmptyGroup(k));
        }
        fractions.push(count_at_most(group, s) as f64 / group.len() as f64);
    }
    fractions.sort_by(f64::total_cmp);
    let mass: f64 = fractions.iter().sum();
    Ok((1.0 + mass) / (groups.len() + 1) as f64)
}

/// Weighted conformal mass `sum_{s_i <= s} w_i + w_test` over raw slices.
pub fn weighted_p_value(calibration: &[f64], s: f64, calibration_weights: &[f64], test_weight: f64) -> Result<f64> {
    if calibration.is_empty() {
        return Err(Error::EmptyCalibration);
    }
    if calibration_weights.len() != calibration.len() {
        return Err(Error::WeightLengthMismatch {
            expected: calibration.len() + 1,
            actual: calibration_weights.len() + 1,
        });
    }
    let all = calibration_weights.iter().chain(std::iter::once(&test_weight));
    for (index, &value) in all.clone().enumerate() {
        if !(value.is_finite() && value >= 0.0) {
            return Err(Error::NegativeWeight { index, value });
        }
    }
    let total = compensated_sum(all.copied());
    if (total - 1.0).abs() > WEIGHT_SUM_TOLERANCE {
        return Err(Error::WeightsNotNormalized(total));
    }
    let mass = compensated_sum(
        calibration
            .iter()
            .zip(calibration_weights)
            .filter(|(&v, _)| v <= s)
            .map(|(_, &w)| w)
            .chain(std::iter::once(test_weight)),
    );
    Ok(mass.min(1.0))
}

/// Neumaier summation.
pub(crate) fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0_f64;
    let mut carry = 0.0_f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            carry += (sum - t) + v;
        } else {
            carry += (v - t) + sum;
        }
        sum = t;
    }
    sum + carry
}

pub fn standard_conformal_p(cal: &CalibrationSet, s: &WatermarkScore) -> Result<f64> {
    standard_p_value(&cal.values(), s.value())
}

pub fn hierarchical_conformal_p(cal: &GroupedCalibrationSet, s: &WatermarkScore) -> Result<f64> {
    let groups: Vec<Vec<f64>> = cal.groups().iter().map(CalibrationSet::values).collect();
    hierarchical_p_value(&groups, s.value())
}

pub fn standard_decision(cal: &CalibrationSet, s: &WatermarkScore, alpha: f64) -> Result<Decision> {
    check_alpha(alpha)?;
    let p = standard_conformal_p(cal, s)?;
    Ok(Decision::from_p(p, alpha, Method::Standard))
}

pub fn hierarchical_decision(cal: &GroupedCalibrationSet, s: &WatermarkScore, alpha: f64) -> Result<Decision> {
    check_alpha(alpha)?;
    let p = hierarchical_conformal_p(cal, s)?;
    Ok(Decision::from_p(p, alpha, Method::Hierarchical))
}

/// Weighted conformal decision: flags when the weighted mass of calibration
/// scores at or below `s`, plus the test point's own weight, is below `alpha`.
pub fn weighted_conformal_decision(
    cal: &CalibrationSet,
    s: &WatermarkScore,
    weights: &WeightVector,
    alpha: f64,
) -> Result<Decision> {
    check_alpha(alpha)?;
    let p = weighted_p_value(
        &cal.values(),
        s.value(),
        weights.calibration_weights(),
        weights.test_weight(),
    )?;
    Ok(Decision::from_p(p, alpha, Method::Weighted))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cal(values: &[f64]) -> CalibrationSet {
        CalibrationSet::from_values(values, "test").unwrap()
    }

    fn score(v: f64) -> WatermarkScore {
        WatermarkScore::anonymous(v).unwrap()
    }

    #[test]
    fn score_bounds() {
        assert!(WatermarkScore::anonymous(0.0).is_err());
        assert!(WatermarkScore::anonymous(1.0).is_ok());
        assert!(WatermarkScore::anonymous(1.0 + 1e-12).is_err());
        assert!(WatermarkScore::anonymous(f64::NAN).is_err());
        let s = score(0.001);
        assert_eq!(s.log_value(), 0.001f64.log10());
    }

    #[test]
    fn standard_examples() {
        let c = cal(&[0.1, 0.2, 0.3, 0.4]);
        assert_eq!(standard_conformal_p(&c, &score(0.05)).unwrap(), 0.2);
        assert_eq!(standard_conformal_p(&c, &score(0.25)).unwrap(), 0.6);
        assert_eq!(standard_conformal_p(&cal(&[0.5]), &score(0.5)).unwrap(), 1.0);
    }

    #[test]
    fn empty_calibration_rejected() {
        assert_eq!(CalibrationSet::new(vec![], "x").unwrap_err(), Error::EmptyCalibration);
        assert_eq!(standard_p_value(&[], 0.5).unwrap_err().kind(), "empty_calibration");
    }

    #[test]
    fn hierarchical_examples() {
        let g = GroupedCalibrationSet::from_values(&[vec![0.1, 0.3], vec![0.2, 0.4]]).unwrap();
        let p = hierarchical_conformal_p(&g, &score(0.25)).unwrap();
        assert!((p - 2.0 / 3.0).abs() < 1e-15);

        let g = GroupedCalibrationSet::from_values(&[vec![0.2], vec![0.3, 0.4], vec![0.9]]).unwrap();
        assert_eq!(hierarchical_conformal_p(&g, &score(0.01)).unwrap(), 0.25);
    }

    #[test]
    fn hierarchical_empty_group_names_index() {
        let err = GroupedCalibrationSet::from_values(&[vec![0.1], vec![]]).unwrap_err();
        assert_eq!(err, Error::EmptyGroup(1));
        let err = hierarchical_p_value(&[vec![0.1], vec![0.2], vec![]], 0.3).unwrap_err();
        assert_eq!(err, Error::EmptyGroup(2));
    }

    #[test]
    fn singleton_groups_match_standard() {
        let values = [0.3, 0.01, 0.7, 0.2, 0.2];
        let groups: Vec<Vec<f64>> = values.iter().map(|&v| vec![v]).collect();
        for s in [0.001, 0.01, 0.2, 0.5, 1.0] {
            assert_eq!(
                hierarchical_p_value(&groups, s).unwrap(),
                standard_p_value(&values, s).unwrap()
            );
        }
    }

    #[test]
    fn weighted_examples() {
        let c = cal(&[0.1, 0.2]);
        let w = WeightVector::new(vec![0.5, 0.3], 0.2).unwrap();
        let d = weighted_conformal_decision(&c, &score(0.15), &w, 0.05).unwrap();
        assert!((d.conformal_p - 0.7).abs() < 1e-15);
        assert!(!d.flagged);
        assert_eq!(d.method, Method::Weighted);

        let w = WeightVector::new(vec![0.0, 0.0], 1.0).unwrap();
        let d = weighted_conformal_decision(&c, &score(0.9), &w, 0.5).unwrap();
        assert_eq!(d.conformal_p, 1.0);
        assert!(!d.flagged);
    }

    #[test]
    fn weighted_uniform_matches_standard() {
        let values = [0.1, 0.2, 0.3, 0.4];
        let c = cal(&values);
        let w = WeightVector::uniform(4);
        for s in [0.05, 0.15, 0.25, 0.45] {
            let weighted = weighted_conformal_decision(&c, &score(s), &w, 0.3).unwrap();
            let standard = standard_conformal_p(&c, &score(s)).unwrap();
            assert!((weighted.conformal_p - standard).abs() < 1e-15);
            assert_eq!(weighted.flagged, standard < 0.3);
        }
    }

    #[test]
    fn weighted_rejects_bad_weights() {
        let c = [0.1, 0.2];
        assert_eq!(
            weighted_p_value(&c, 0.1, &[0.5], 0.5).unwrap_err().kind(),
            "weight_length_mismatch"
        );
        assert_eq!(
            weighted_p_value(&c, 0.1, &[0.5, 0.5], 0.5).unwrap_err().kind(),
            "weights_not_normalized"
        );
        assert_eq!(
            weighted_p_value(&c, 0.1, &[-0.1, 0.6], 0.5).unwrap_err().kind(),
            "negative_weight"
        );
    }

    #[test]
    fn flag_rules_differ_at_equality() {
        assert!(Decision::from_p(0.05, 0.05, Method::Standard).flagged);
        assert!(Decision::from_p(0.05, 0.05, Method::Hierarchical).flagged);
        assert!(!Decision::from_p(0.05, 0.05, Method::Weighted).flagged);
    }

    #[test]
    fn single_point_calibration_cannot_flag_below_half() {
        let c = cal(&[0.3]);
        let d = standard_decision(&c, &score(1e-9), 0.4).unwrap();
        assert_eq!(d.conformal_p, 0.5);
        assert!(!d.flagged);
    }

    #[test]
    fn alpha_validated() {
        let c = cal(&[0.3]);
        assert!(standard_decision(&c, &score(0.1), 0.0).is_err());
        assert!(standard_decision(&c, &score(0.1), 1.0).is_err());
    }

    fn unit_values(max_len: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(1e-12f64..=1.0, 1..max_len)
    }

    proptest! {
        #[test]
        fn rank_invariance(values in unit_values(30), s in 1e-12f64..=1.0) {
            let p = standard_p_value(&values, s).unwrap();
            let logs: Vec<f64> = values.iter().map(|v| v.log10()).collect();
            let cubed: Vec<f64> = values.iter().map(|v| v * v * v).collect();
            prop_assert_eq!(p, standard_p_value(&logs, s.log10()).unwrap());
            prop_assert_eq!(p, standard_p_value(&cubed, s * s * s).unwrap());
        }

        #[test]
        fn permutation_invariance(
            groups in prop::collection::vec(unit_values(8), 1..8),
            s in 1e-12f64..=1.0,
            shift in 0usize..8,
        ) {
            let p = hierarchical_p_value(&groups, s).unwrap();
            let mut rotated = groups.clone();
            let k = rotated.len();
            rotated.rotate_left(shift % k);
            for g in rotated.iter_mut() {
                g.reverse();
            }
            prop_assert_eq!(p.to_bits(), hierarchical_p_value(&rotated, s).unwrap().to_bits());

            let flat: Vec<f64> = groups.concat();
            let mut rev = flat.clone();
            rev.reverse();
            prop_assert_eq!(
                standard_p_value(&flat, s).unwrap().to_bits(),
                standard_p_value(&rev, s).unwrap().to_bits()
            );
        }

        #[test]
        fn monotone_in_score(values in unit_values(30), a in 1e-12f64..=1.0, b in 1e-12f64..=1.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(standard_p_value(&values, lo).unwrap() <= standard_p_value(&values, hi).unwrap());
            let groups: Vec<Vec<f64>> = values.chunks(3).map(<[f64]>::to_vec).collect();
            prop_assert!(
                hierarchical_p_value(&groups, lo).unwrap() <= hierarchical_p_value(&groups, hi).unwrap()
            );
        }

        #[test]
        fn range(values in unit_values(30), s in 1e-12f64..=1.0) {
            let n = values.len();
            let p = standard_p_value(&values, s).unwrap();
            let k = p * (n + 1) as f64;
            prop_assert!((k - k.round()).abs() < 1e-9);
            prop_assert!(k.round() >= 1.0 && k.round() <= (n + 1) as f64);

            let groups: Vec<Vec<f64>> = values.chunks(4).map(<[f64]>::to_vec).collect();
            let h = hierarchical_p_value(&groups, s).unwrap();
            prop_assert!(h >= 1.0 / (groups.len() + 1) as f64 && h <= 1.0);
        }
    }
}
