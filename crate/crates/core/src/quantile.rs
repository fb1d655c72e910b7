//! Empirical quantiles and sample moments.

use crate::error::{Error, Result};

/// Linear interpolation between order statistics.
///
/// With sorted values `x_0 <= ... <= x_{n-1}` the level-`p` quantile sits at
/// fractional index `h = (n - 1) p` and interpolates between `x_floor(h)` and
/// `x_ceil(h)`. Levels outside `[0, 1]` are clamped.
pub fn quantile(values: &[f64], level: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::EmptyInput("quantile input"));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(quantile_sorted(&sorted, level))
}

/// [`quantile`] on already-sorted, nonempty input.
pub fn quantile_sorted(sorted: &[f64], level: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let level = level.clamp(0.0, 1.0);
    let h = (sorted.len() - 1) as f64 * level;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    let frac = h - lo as f64;
    if lo == hi || frac == 0.0 {
        sorted[lo]
    } else {
        sorted[lo] + frac * (sorted[hi] - sorted[lo])
    }
}

pub fn mean(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::EmptyInput("mean input"));
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

/// Population standard deviation (divisor `n`).
pub fn std_dev(values: &[f64]) -> Result<f64> {
    let mu = mean(values)?;
    let ss: f64 = values.iter().map(|v| (v - mu) * (v - mu)).sum();
    Ok((ss / values.len() as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interpolates_between_fifth_and_sixth_order_statistics() {
        let values: Vec<f64> = (1..=100).map(f64::from).collect();
        // h = 99 * 0.05 = 4.95 -> x_4 + 0.95 (x_5 - x_4) = 5 + 0.95
        let q = quantile(&values, 0.05).unwrap();
        assert!((q - 5.95).abs() < 1e-12);
        assert!(q > values[4] && q < values[5]);
    }

    #[test]
    fn endpoints_and_constants() {
        let values = [3.0, -1.0, 2.0];
        assert_eq!(quantile(&values, 0.0).unwrap(), -1.0);
        assert_eq!(quantile(&values, 1.0).unwrap(), 3.0);
        assert_eq!(quantile(&values, 0.5).unwrap(), 2.0);
        assert_eq!(quantile(&[0.7; 9], 0.05).unwrap(), 0.7);
        assert_eq!(quantile(&[4.0], 0.3).unwrap(), 4.0);
        assert!(quantile(&[], 0.5).is_err());
    }

    #[test]
    fn population_std() {
        assert_eq!(std_dev(&[1.0, 3.0]).unwrap(), 1.0);
        assert_eq!(std_dev(&[5.0]).unwrap(), 0.0);
    }
}
