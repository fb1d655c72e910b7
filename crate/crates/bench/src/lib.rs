//! Fixtures shared by the criterion benchmarks.

use wmconf_core::sim::{generate_scores, Family, ScoreDistribution};

/// `n` logit-normal scores with the given logit mean.
pub fn scores(n: usize, mu: f64, seed: u64) -> Vec<f64> {
    let dist = ScoreDistribution::new(Family::LogitNormal { mu, sigma: 2.3 }, 1).expect("valid");
    generate_scores(&dist, n, seed)
        .expect("n > 0")
        .iter()
        .map(|s| s.value())
        .collect()
}
