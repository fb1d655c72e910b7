//! Synthetic classroom experiments.
//!
//! Stands in for LLM-edited essays: every essay receives one watermark score
//! per edit intensity (1 = grammar fixes ... 7 = content expansion), drawn
//! from a configurable family per `(population, intensity)`, plus a BLEU
//! surrogate that falls as the score gets stronger. Calibration sets are
//! sampled from a held-out pool, decisions come from [`crate::conformal`],
//! outliers from [`crate::labeling`], and metrics from [`crate::evaluation`].
//!
//! Randomness is split into independent ChaCha streams keyed by
//! `(seed, writing prompt, stream tag, ...)`, so results do not depend on
//! execution order or thread count.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conformal::{check_alpha, hierarchical_p_value, WatermarkScore};
use crate::density::{fit_kde, fit_shift, ratio_of, DensityModel, ScoreScale, ShiftMethod};
use crate::error::{Error, Result};
use crate::evaluation::{aggregate, Aggregation, CellCounts, CellKey, CellResult, MetricsReport};
use crate::labeling::{
    bleu_quantile_threshold, classify_bleu, EditRole, ThresholdPopulation, ThresholdScope, ViolationLabel,
};
use crate::quantile::quantile;

/// Number of edit intensities on the ladder.
pub const INTENSITIES: usize = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Population {
    Majority,
    Minority,
}

impl Population {
    fn tag(self) -> u64 {
        match self {
            Population::Majority => 1,
            Population::Minority => 2,
        }
    }
}

/// Score family. Values are always in `(0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Family {
    Uniform01,
    /// `sigmoid(N(mu, sigma^2))`.
    LogitNormal {
        mu: f64,
        sigma: f64,
    },
    Beta {
        a: f64,
        b: f64,
    },
    Mixture {
        components: Vec<MixtureComponent>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureComponent {
    pub weight: f64,
    #[serde(flatten)]
    pub family: Family,
}

impl Family {
    pub fn validate(&self) -> Result<()> {
        match self {
            Family::Uniform01 => Ok(()),
            Family::LogitNormal { mu, sigma } => {
                if mu.is_finite() && sigma.is_finite() && *sigma >= 0.0 {
                    Ok(())
                } else {
                    Err(Error::InvalidDistribution(format!(
                        "logit_normal needs finite mu and sigma >= 0 (mu={mu}, sigma={sigma})"
                    )))
                }
            }
            Family::Beta { a, b } => {
                if *a > 0.0 && *b > 0.0 && a.is_finite() && b.is_finite() {
                    Ok(())
                } else {
                    Err(Error::InvalidDistribution(format!(
                        "beta shapes must be positive (a={a}, b={b})"
                    )))
                }
            }
            Family::Mixture { components } => {
                if components.is_empty() {
                    return Err(Error::InvalidDistribution("mixture has no components".into()));
                }
                let mut total = 0.0;
                for c in components {
                    if !(c.weight >= 0.0 && c.weight.is_finite()) {
                        return Err(Error::InvalidDistribution(format!(
                            "mixture weight {} is invalid",
                            c.weight
                        )));
                    }
                    total += c.weight;
                    c.family.validate()?;
                }
                if total > 0.0 {
                    Ok(())
                } else {
                    Err(Error::InvalidDistribution("mixture weights sum to zero".into()))
                }
            }
        }
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let v = match self {
            Family::Uniform01 => 1.0 - rng.random::<f64>(),
            Family::LogitNormal { mu, sigma } => {
                let z: f64 = rng.sample(StandardNormal);
                sigmoid(mu + sigma * z)
            }
            Family::Beta { a, b } => Beta::new(*a, *b).expect("validated").sample(rng),
            Family::Mixture { components } => {
                let total: f64 = components.iter().map(|c| c.weight).sum();
                let mut u = rng.random::<f64>() * total;
                let mut chosen = &components[components.len() - 1].family;
                for c in components {
                    if u < c.weight {
                        chosen = &c.family;
                        break;
                    }
                    u -= c.weight;
                }
                chosen.sample(rng)
            }
        };
        clamp_score(v)
    }
}

fn clamp_score(v: f64) -> f64 {
    v.clamp(f64::MIN_POSITIVE, 1.0)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn logit(p: f64) -> f64 {
    p.ln() - (-p).ln_1p()
}

/// Shifts a score by `delta` on the logit scale. A zero shift returns the
/// score unchanged.
fn logit_shift(v: f64, delta: f64) -> f64 {
    if delta == 0.0 {
        v
    } else {
        clamp_score(sigmoid(logit(v) + delta))
    }
}

/// Score family for one edit intensity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreDistribution {
    #[serde(flatten)]
    pub family: Family,
    pub edit_intensity: u8,
}

impl ScoreDistribution {
    pub fn new(family: Family, edit_intensity: u8) -> Result<Self> {
        family.validate()?;
        if !(1..=INTENSITIES as u8).contains(&edit_intensity) {
            return Err(Error::InvalidDistribution(format!(
                "edit_intensity {edit_intensity} outside 1..=7"
            )));
        }
        Ok(Self { family, edit_intensity })
    }

    fn sample_values<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<f64> {
        (0..n).map(|_| self.family.sample(rng)).collect()
    }
}

/// `n` scores from `dist`, reproducible from `seed`.
pub fn generate_scores(dist: &ScoreDistribution, n: usize, seed: u64) -> Result<Vec<WatermarkScore>> {
    dist.family.validate()?;
    if n == 0 {
        return Err(Error::InvalidConfig {
            field: "n".into(),
            message: "must be at least 1".into(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    dist.sample_values(n, &mut rng)
        .into_iter()
        .enumerate()
        .map(|(i, v)| WatermarkScore::new(format!("syn-{i}"), v))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionEntry {
    pub population: Population,
    #[serde(flatten)]
    pub distribution: ScoreDistribution,
}

/// `bleu = sigmoid(intercept + slope * log10(score) + N(0, noise_sd^2))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BleuSurrogate {
    pub intercept: f64,
    pub slope: f64,
    pub noise_sd: f64,
}

impl Default for BleuSurrogate {
    fn default() -> Self {
        Self {
            intercept: 3.0,
            slope: 0.5,
            noise_sd: 0.4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    Standard,
    Hierarchical,
    Weighted,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HierarchyConfig {
    /// Topics the held-out essays are spread over.
    pub n_topics: usize,
    /// Standard deviation of the per-topic logit shift.
    pub group_effect_sd: f64,
    /// Every essay is its own group.
    pub singleton_groups: bool,
}

impl Default for HierarchyConfig {
    fn default() -> Self {
        Self {
            n_topics: 60,
            group_effect_sd: 1.0,
            singleton_groups: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WeightedConfig {
    /// Majority-population essays always in the calibration pool.
    pub majority_size: usize,
}

impl Default for WeightedConfig {
    fn default() -> Self {
        Self { majority_size: 385 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scenario: Scenario,
    pub alpha: f64,
    pub cal_sizes: Vec<usize>,
    pub minority_sizes: Vec<usize>,
    pub seeds: Vec<u64>,
    /// Test essays per writing prompt.
    pub n_test: usize,
    /// Held-out essays per writing prompt that calibration sets are drawn from.
    pub n_holdout: usize,
    pub writing_prompts: usize,
    pub null_prompts: Vec<u8>,
    pub alt_prompts: Vec<u8>,
    pub bandwidth: f64,
    pub log_scale: bool,
    pub aggregation: Aggregation,
    pub threshold_population: ThresholdPopulation,
    pub threshold_scope: ThresholdScope,
    pub bleu: Option<BleuSurrogate>,
    pub hierarchy: HierarchyConfig,
    pub weighted: WeightedConfig,
    pub distributions: Vec<DistributionEntry>,
}

/// Logit-scale means of the default intensity ladder.
pub const DEFAULT_LADDER_MU: [f64; INTENSITIES] = [-2.5, -3.5, -4.5, -5.5, -8.0, -9.5, -13.0];
pub const DEFAULT_LADDER_SIGMA: f64 = 2.3;
/// Logit shift of the minority population under identical edits.
pub const DEFAULT_MINORITY_SHIFT: f64 = -1.2;

/// Default per-population, per-intensity logit-normal ladder.
pub fn default_distributions() -> Vec<DistributionEntry> {
    let mut out = Vec::new();
    for (population, shift) in [
        (Population::Majority, 0.0),
        (Population::Minority, DEFAULT_MINORITY_SHIFT),
    ] {
        for (i, mu) in DEFAULT_LADDER_MU.iter().enumerate() {
            out.push(DistributionEntry {
                population,
                distribution: ScoreDistribution {
                    family: Family::LogitNormal {
                        mu: mu + shift,
                        sigma: DEFAULT_LADDER_SIGMA,
                    },
                    edit_intensity: i as u8 + 1,
                },
            });
        }
    }
    out
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            scenario: Scenario::Standard,
            alpha: 0.05,
            cal_sizes: vec![30, 50, 200],
            minority_sizes: vec![5, 15, 30],
            seeds: vec![0, 1, 2, 3, 4],
            n_test: 400,
            n_holdout: 200,
            writing_prompts: 8,
            null_prompts: (1..=6).collect(),
            alt_prompts: (2..=7).collect(),
            bandwidth: crate::density::DEFAULT_BANDWIDTH,
            log_scale: true,
            aggregation: Aggregation::PerPromptMean,
            threshold_population: ThresholdPopulation::NullEdits,
            threshold_scope: ThresholdScope::PerPrompt,
            bleu: Some(BleuSurrogate::default()),
            hierarchy: HierarchyConfig::default(),
            weighted: WeightedConfig::default(),
            distributions: default_distributions(),
        }
    }
}

fn config_error(field: &str, message: impl Into<String>) -> Error {
    Error::InvalidConfig {
        field: field.into(),
        message: message.into(),
    }
}

impl ExperimentConfig {
    pub fn for_scenario(scenario: Scenario) -> Self {
        Self {
            scenario,
            ..Self::default()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| {
            let message = e.message().to_string();
            let line = e
                .span()
                .map(|s| text[..s.start.min(text.len())].lines().count() as u64)
                .unwrap_or(0);
            Error::Parse { line, message }
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn distribution(&self, population: Population, intensity: u8) -> Option<&ScoreDistribution> {
        self.distributions
            .iter()
            .find(|e| e.population == population && e.distribution.edit_intensity == intensity)
            .map(|e| &e.distribution)
    }

    fn populations(&self) -> Vec<Population> {
        match self.scenario {
            Scenario::Weighted => vec![Population::Majority, Population::Minority],
            _ => vec![Population::Majority],
        }
    }

    fn calibration_sizes(&self) -> &[usize] {
        match self.scenario {
            Scenario::Weighted => &self.minority_sizes,
            _ => &self.cal_sizes,
        }
    }

    /// Null/alternative pairs with the alternative strictly more intense.
    pub fn prompt_pairs(&self) -> Vec<(u8, u8)> {
        let mut pairs = Vec::new();
        for &null in &self.null_prompts {
            for &alt in &self.alt_prompts {
                if alt > null {
                    pairs.push((null, alt));
                }
            }
        }
        pairs
    }

    pub fn validate(&self) -> Result<()> {
        check_alpha(self.alpha).map_err(|e| config_error("alpha", e.to_string()))?;
        if self.scenario == Scenario::Weighted && self.alpha >= 0.5 {
            return Err(config_error("alpha", "weighted scenario needs alpha < 0.5"));
        }
        for (field, sizes) in [("cal_sizes", &self.cal_sizes), ("minority_sizes", &self.minority_sizes)] {
            if sizes.is_empty() && self.calibration_sizes() == sizes.as_slice() {
                return Err(config_error(field, "must not be empty"));
            }
            if let Some(bad) = sizes.iter().find(|&&s| s == 0) {
                return Err(config_error(field, format!("size {bad} must be at least 1")));
            }
            if let Some(big) = sizes.iter().find(|&&s| s > self.n_holdout) {
                return Err(config_error(
                    field,
                    format!("size {big} exceeds n_holdout = {}", self.n_holdout),
                ));
            }
        }
        if self.seeds.is_empty() {
            return Err(config_error("seeds", "must not be empty"));
        }
        let mut seeds = self.seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        if seeds.len() != self.seeds.len() {
            return Err(config_error("seeds", "must be distinct"));
        }
        if self.n_test == 0 {
            return Err(config_error("n_test", "must be at least 1"));
        }
        if self.writing_prompts == 0 {
            return Err(config_error("writing_prompts", "must be at least 1"));
        }
        if !(self.bandwidth > 0.0 && self.bandwidth.is_finite()) {
            return Err(config_error("bandwidth", "must be positive"));
        }
        if self.scenario == Scenario::Weighted && self.weighted.majority_size == 0 {
            return Err(config_error("weighted.majority_size", "must be at least 1"));
        }
        if self.scenario == Scenario::Hierarchical && self.hierarchy.n_topics == 0 {
            return Err(config_error("hierarchy.n_topics", "must be at least 1"));
        }
        if !(self.hierarchy.group_effect_sd >= 0.0 && self.hierarchy.group_effect_sd.is_finite()) {
            return Err(config_error("hierarchy.group_effect_sd", "must be finite and >= 0"));
        }
        if let Some(b) = &self.bleu {
            if !(b.intercept.is_finite() && b.slope.is_finite() && b.noise_sd >= 0.0 && b.noise_sd.is_finite()) {
                return Err(config_error("bleu", "parameters must be finite, noise_sd >= 0"));
            }
        }
        for (field, prompts) in [("null_prompts", &self.null_prompts), ("alt_prompts", &self.alt_prompts)] {
            if let Some(bad) = prompts.iter().find(|&&p| !(1..=INTENSITIES as u8).contains(&p)) {
                return Err(config_error(field, format!("prompt {bad} outside 1..=7")));
            }
        }
        if self.prompt_pairs().is_empty() {
            return Err(config_error(
                "alt_prompts",
                "no alternative prompt exceeds any null prompt",
            ));
        }
        for (i, entry) in self.distributions.iter().enumerate() {
            let d = &entry.distribution;
            ScoreDistribution::new(d.family.clone(), d.edit_intensity)
                .map_err(|e| config_error(&format!("distributions[{i}]"), e.to_string()))?;
        }
        for population in self.populations() {
            for k in 1..=INTENSITIES as u8 {
                if self.distribution(population, k).is_none() {
                    return Err(config_error(
                        "distributions",
                        format!("missing {population:?} intensity {k}").to_lowercase(),
                    ));
                }
            }
            self.check_ladder(population)?;
        }
        Ok(())
    }

    /// Higher intensities must not produce larger typical scores.
    fn check_ladder(&self, population: Population) -> Result<()> {
        const N: usize = 4001;
        const SLACK_LOG10: f64 = 0.05;
        let mut prev: Option<(u8, f64)> = None;
        for k in 1..=INTENSITIES as u8 {
            let dist = self.distribution(population, k).expect("checked");
            let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_1add3 + k as u64);
            let logs: Vec<f64> = dist.sample_values(N, &mut rng).iter().map(|v| v.log10()).collect();
            let median = quantile(&logs, 0.5)?;
            if let Some((pk, pm)) = prev {
                if median > pm + SLACK_LOG10 {
                    return Err(config_error(
                        "distributions",
                        format!(
                            "{population:?} intensity {k} median log10 score {median:.3} exceeds \
                             intensity {pk} ({pm:.3}); intensities must weaken scores"
                        )
                        .to_lowercase(),
                    ));
                }
            }
            prev = Some((k, median));
        }
        Ok(())
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent stream for a tuple of identifiers.
pub(crate) fn stream(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    let key = tags.iter().fold(splitmix(seed), |acc, &t| splitmix(acc ^ splitmix(t)));
    ChaCha8Rng::seed_from_u64(key)
}

const STREAM_TEST: u64 = 1;
const STREAM_HOLDOUT: u64 = 2;
const STREAM_MAJORITY_POOL: u64 = 3;
const STREAM_SAMPLE: u64 = 4;
const STREAM_BLEU: u64 = 5;
const STREAM_TOPICS: u64 = 6;
const STREAM_EFFECTS: u64 = 7;

/// Per-essay scores and BLEU surrogates at every intensity.
struct EssayBatch {
    /// `scores[k][i]`: essay `i` edited at intensity `k + 1`.
    scores: Vec<Vec<f64>>,
    bleu: Option<Vec<Vec<f64>>>,
    /// Group id per essay (hierarchical scenario only).
    topics: Vec<usize>,
}

impl EssayBatch {
    fn len(&self) -> usize {
        self.scores[0].len()
    }

    fn at(&self, intensity: u8) -> &[f64] {
        &self.scores[intensity as usize - 1]
    }

    fn bleu_at(&self, intensity: u8) -> Option<&[f64]> {
        self.bleu.as_ref().map(|b| b[intensity as usize - 1].as_slice())
    }
}

struct Job {
    seed: u64,
    writing_prompt: usize,
    /// Outlier thresholds per `(null, alt)` shared by every prompt of the
    /// seed; empty when thresholds are per prompt.
    pooled_thresholds: BTreeMap<(u8, u8), f64>,
}

fn generate_batch(config: &ExperimentConfig, population: Population, n: usize, job: &Job, role: u64) -> EssayBatch {
    let base = [job.writing_prompt as u64, role, population.tag()];
    let scores: Vec<Vec<f64>> = (1..=INTENSITIES as u8)
        .map(|k| {
            let mut rng = stream(job.seed, &[base[0], base[1], base[2], k as u64]);
            config
                .distribution(population, k)
                .expect("validated")
                .sample_values(n, &mut rng)
        })
        .collect();
    let bleu = config.bleu.map(|surrogate| {
        scores
            .iter()
            .enumerate()
            .map(|(k, col)| {
                let mut rng = stream(job.seed, &[base[0], base[1], base[2], k as u64 + 1, STREAM_BLEU]);
                col.iter()
                    .map(|&s| {
                        let z: f64 = rng.sample(StandardNormal);
                        sigmoid(surrogate.intercept + surrogate.slope * s.log10() + surrogate.noise_sd * z)
                    })
                    .collect()
            })
            .collect()
    });
    EssayBatch {
        scores,
        bleu,
        topics: Vec::new(),
    }
}

/// Assigns topics and applies per-topic logit shifts to every intensity.
fn apply_topics(batch: &mut EssayBatch, config: &ExperimentConfig, job: &Job, role: u64) {
    let h = &config.hierarchy;
    let n = batch.len();
    if h.singleton_groups {
        batch.topics = (0..n).collect();
    } else {
        let mut rng = stream(job.seed, &[job.writing_prompt as u64, role, STREAM_TOPICS]);
        batch.topics = (0..n).map(|_| rng.random_range(0..h.n_topics)).collect();
    }
    if h.group_effect_sd == 0.0 {
        return;
    }
    let n_topics = if h.singleton_groups { n } else { h.n_topics };
    let mut rng = stream(job.seed, &[job.writing_prompt as u64, role, STREAM_EFFECTS]);
    let effects: Vec<f64> = (0..n_topics)
        .map(|_| h.group_effect_sd * rng.sample::<f64, _>(StandardNormal))
        .collect();
    for col in batch.scores.iter_mut() {
        for (v, &t) in col.iter_mut().zip(&batch.topics) {
            *v = logit_shift(*v, effects[t]);
        }
    }
}

fn sample_indices(job: &Job, tags: &[u64], pool: usize, amount: usize) -> Vec<usize> {
    let mut all = vec![job.writing_prompt as u64, STREAM_SAMPLE];
    all.extend_from_slice(tags);
    let mut rng = stream(job.seed, &all);
    let mut idx = rand::seq::index::sample(&mut rng, pool, amount).into_vec();
    idx.sort_unstable();
    idx
}

/// Flags for every test essay at one intensity.
type Flags = Vec<bool>;

/// Test-time decision rule for one calibration draw.
trait Detector {
    fn flags(&self, intensity: u8, test: &[f64]) -> Result<Flags>;
}

struct StandardDetector {
    sorted: Vec<f64>,
    alpha: f64,
}

impl StandardDetector {
    fn new(calibration: &[f64], alpha: f64) -> Self {
        let mut sorted = calibration.to_vec();
        sorted.sort_by(f64::total_cmp);
        Self { sorted, alpha }
    }
}

impl Detector for StandardDetector {
    fn flags(&self, _intensity: u8, test: &[f64]) -> Result<Flags> {
        let n = self.sorted.len();
        Ok(test
            .iter()
            .map(|&s| {
                let count = self.sorted.partition_point(|&v| v <= s);
                let p = (1 + count) as f64 / (n + 1) as f64;
                p <= self.alpha
            })
            .collect())
    }
}

struct HierarchicalDetector {
    groups: Vec<Vec<f64>>,
    alpha: f64,
}

impl Detector for HierarchicalDetector {
    fn flags(&self, _intensity: u8, test: &[f64]) -> Result<Flags> {
        test.iter()
            .map(|&s| Ok(hierarchical_p_value(&self.groups, s)? <= self.alpha))
            .collect()
    }
}

/// Base density `p̂` of the transformed pool, evaluated once per point and
/// shared by both shift estimates.
struct PoolDensity {
    model: DensityModel,
    pool: Vec<f64>,
    at_pool: Vec<f64>,
    at_test: Vec<Option<Vec<f64>>>,
}

impl PoolDensity {
    fn new(model: DensityModel, pool: &[f64], test: &EssayBatch, intensities: &[u8], scale: ScoreScale) -> Self {
        let eval = |xs: &[f64]| xs.iter().map(|&x| model.evaluate(scale.apply(x))).collect::<Vec<_>>();
        let at_pool = eval(pool);
        let mut at_test = vec![None; INTENSITIES + 1];
        for &k in intensities {
            at_test[k as usize] = Some(eval(test.at(k)));
        }
        Self {
            model,
            pool: pool.to_vec(),
            at_pool,
            at_test,
        }
    }
}

/// Weighted rule over a pool sorted by score, with prefix sums of the
/// calibration density ratios. Equivalent to normalizing the weights per
/// test point and calling [`crate::conformal::weighted_p_value`].
struct WeightedDetector<'a> {
    sorted: Vec<f64>,
    prefix: Vec<f64>,
    density: &'a PoolDensity,
    model_q: &'a DensityModel,
    scale: ScoreScale,
    alpha: f64,
}

impl<'a> WeightedDetector<'a> {
    fn new(density: &'a PoolDensity, model_q: &'a DensityModel, scale: ScoreScale, alpha: f64) -> Result<Self> {
        let mut pairs: Vec<(f64, f64)> = density
            .pool
            .iter()
            .zip(&density.at_pool)
            .map(|(&s, &p)| {
                let x = scale.apply(s);
                Ok((s, ratio_of(model_q.evaluate(x), p, x)?))
            })
            .collect::<Result<_>>()?;
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut prefix = Vec::with_capacity(pairs.len() + 1);
        prefix.push(0.0);
        let (mut sum, mut carry) = (0.0_f64, 0.0_f64);
        for &(_, r) in &pairs {
            let t = sum + r;
            carry += if sum.abs() >= r.abs() {
                (sum - t) + r
            } else {
                (r - t) + sum
            };
            sum = t;
            prefix.push(sum + carry);
        }
        Ok(Self {
            sorted: pairs.into_iter().map(|(s, _)| s).collect(),
            prefix,
            density,
            model_q,
            scale,
            alpha,
        })
    }
}

impl Detector for WeightedDetector<'_> {
    fn flags(&self, intensity: u8, test: &[f64]) -> Result<Flags> {
        let total = self.prefix[self.sorted.len()];
        let cached = self.density.at_test[intensity as usize].as_deref();
        test.iter()
            .enumerate()
            .map(|(i, &s)| {
                let x = self.scale.apply(s);
                let p = match cached {
                    Some(values) => values[i],
                    None => self.density.model.evaluate(x),
                };
                let r = ratio_of(self.model_q.evaluate(x), p, x)?;
                let norm = total + r;
                if !(norm.is_finite() && norm > 0.0) {
                    return Err(Error::DensityUnderflow { point: x });
                }
                let count = self.sorted.partition_point(|&v| v <= s);
                let p = ((self.prefix[count] + r) / norm).min(1.0);
                Ok(p < self.alpha)
            })
            .collect()
    }
}

/// Counts decisions for every alternative prompt above `null`.
fn evaluate_detector(
    detector: &dyn Detector,
    method: &str,
    config: &ExperimentConfig,
    test: &EssayBatch,
    null: u8,
    cal_size: usize,
    job: &Job,
) -> Result<Vec<CellResult>> {
    let null_flags = detector.flags(null, test.at(null))?;
    let n_null_flagged = null_flags.iter().filter(|&&f| f).count();
    let mut cells = Vec::new();
    for &alt in config.alt_prompts.iter().filter(|&&a| a > null) {
        let alt_flags = detector.flags(alt, test.at(alt))?;
        let labels = label_alternatives(config, test, null, alt, job)?;
        let mut counts = CellCounts {
            n_null: test.len(),
            n_null_flagged,
            n_alt: test.len(),
            ..CellCounts::default()
        };
        for (&flag, label) in alt_flags.iter().zip(&labels) {
            match label {
                ViolationLabel::Outlier => {
                    counts.n_outliers += 1;
                    counts.n_outliers_flagged += flag as usize;
                }
                _ => {
                    counts.n_suspects += 1;
                    counts.n_suspects_flagged += flag as usize;
                }
            }
        }
        let key = CellKey {
            method: method.to_string(),
            null_prompt: null,
            alt_prompt: alt,
            cal_size,
            writing_prompt: job.writing_prompt,
            seed: job.seed,
        };
        cells.push(CellResult::from_counts(key, counts)?);
    }
    Ok(cells)
}

fn threshold_population<'a>(config: &ExperimentConfig, bleu_null: &'a [f64], bleu_alt: &'a [f64]) -> &'a [f64] {
    match config.threshold_population {
        ThresholdPopulation::NullEdits => bleu_null,
        ThresholdPopulation::AltEdits => bleu_alt,
    }
}

fn label_alternatives(
    config: &ExperimentConfig,
    test: &EssayBatch,
    null: u8,
    alt: u8,
    job: &Job,
) -> Result<Vec<ViolationLabel>> {
    let (Some(bleu_null), Some(bleu_alt)) = (test.bleu_at(null), test.bleu_at(alt)) else {
        return Ok(vec![ViolationLabel::Outlier; test.len()]);
    };
    let threshold = match job.pooled_thresholds.get(&(null, alt)) {
        Some(&t) => t,
        None => bleu_quantile_threshold(threshold_population(config, bleu_null, bleu_alt), config.alpha)?,
    };
    Ok(bleu_null
        .iter()
        .zip(bleu_alt)
        .map(|(&bn, &ba)| classify_bleu(EditRole::Violating, bn, ba, threshold))
        .collect())
}

/// Thresholds over the test BLEU of every writing prompt of `seed`.
fn pooled_thresholds(config: &ExperimentConfig, seed: u64) -> Result<BTreeMap<(u8, u8), f64>> {
    let mut out = BTreeMap::new();
    if config.threshold_scope != ThresholdScope::Pooled || config.bleu.is_none() {
        return Ok(out);
    }
    let population = match config.scenario {
        Scenario::Weighted => Population::Minority,
        Scenario::Standard | Scenario::Hierarchical => Population::Majority,
    };
    let batches: Vec<EssayBatch> = (0..config.writing_prompts)
        .map(|writing_prompt| {
            let job = Job {
                seed,
                writing_prompt,
                pooled_thresholds: BTreeMap::new(),
            };
            generate_batch(config, population, config.n_test, &job, STREAM_TEST)
        })
        .collect();
    let column = |k: u8| -> Vec<f64> {
        batches
            .iter()
            .flat_map(|b| b.bleu_at(k).expect("bleu enabled").iter().copied())
            .collect()
    };
    for (null, alt) in config.prompt_pairs() {
        let (bleu_null, bleu_alt) = (column(null), column(alt));
        let t = bleu_quantile_threshold(threshold_population(config, &bleu_null, &bleu_alt), config.alpha)?;
        out.insert((null, alt), t);
    }
    Ok(out)
}

fn run_flat_job(config: &ExperimentConfig, job: &Job) -> Result<Vec<CellResult>> {
    let hierarchical = config.scenario == Scenario::Hierarchical;
    let mut test = generate_batch(config, Population::Majority, config.n_test, job, STREAM_TEST);
    let mut holdout = generate_batch(config, Population::Majority, config.n_holdout, job, STREAM_HOLDOUT);
    if hierarchical {
        apply_topics(&mut holdout, config, job, STREAM_HOLDOUT);
        apply_topics(&mut test, config, job, STREAM_TEST);
    }
    let mut cells = Vec::new();
    for &null in &config.null_prompts {
        if !config.alt_prompts.iter().any(|&a| a > null) {
            continue;
        }
        for &size in &config.cal_sizes {
            let idx = sample_indices(job, &[null as u64, size as u64], config.n_holdout, size);
            let column = holdout.at(null);
            if hierarchical {
                let mut topics: Vec<usize> = idx.iter().map(|&i| holdout.topics[i]).collect();
                topics.sort_unstable();
                topics.dedup();
                let groups: Vec<Vec<f64>> = topics
                    .iter()
                    .map(|&t| {
                        idx.iter()
                            .filter(|&&i| holdout.topics[i] == t)
                            .map(|&i| column[i])
                            .collect()
                    })
                    .collect();
                let detector = HierarchicalDetector {
                    groups,
                    alpha: config.alpha,
                };
                cells.extend(evaluate_detector(
                    &detector,
                    "hierarchical",
                    config,
                    &test,
                    null,
                    size,
                    job,
                )?);
            } else {
                let calibration: Vec<f64> = idx.iter().map(|&i| column[i]).collect();
                let detector = StandardDetector::new(&calibration, config.alpha);
                cells.extend(evaluate_detector(
                    &detector, "standard", config, &test, null, size, job,
                )?);
            }
        }
    }
    Ok(cells)
}

/// Method labels reported by the weighted scenario.
pub const WEIGHTED_METHODS: [&str; 4] = ["in_dist_only", "comb_unweighted", "weighted_mean", "weighted_quantile"];

fn run_weighted_job(config: &ExperimentConfig, job: &Job) -> Result<Vec<CellResult>> {
    let scale = if config.log_scale {
        ScoreScale::Log10
    } else {
        ScoreScale::Raw
    };
    let test = generate_batch(config, Population::Minority, config.n_test, job, STREAM_TEST);
    let holdout = generate_batch(config, Population::Minority, config.n_holdout, job, STREAM_HOLDOUT);
    let majority = generate_batch(
        config,
        Population::Majority,
        config.weighted.majority_size,
        job,
        STREAM_MAJORITY_POOL,
    );
    let mut cells = Vec::new();
    for &null in &config.null_prompts {
        if !config.alt_prompts.iter().any(|&a| a > null) {
            continue;
        }
        for &m in &config.minority_sizes {
            let idx = sample_indices(job, &[null as u64, m as u64, 0x3], config.n_holdout, m);
            let minority: Vec<f64> = idx.iter().map(|&i| holdout.at(null)[i]).collect();
            let mut pool: Vec<f64> = majority.at(null).to_vec();
            pool.extend_from_slice(&minority);

            let in_dist = StandardDetector::new(&minority, config.alpha);
            cells.extend(evaluate_detector(
                &in_dist,
                WEIGHTED_METHODS[0],
                config,
                &test,
                null,
                m,
                job,
            )?);
            let combined = StandardDetector::new(&pool, config.alpha);
            cells.extend(evaluate_detector(
                &combined,
                WEIGHTED_METHODS[1],
                config,
                &test,
                null,
                m,
                job,
            )?);

            let pool_t = scale.apply_all(&pool);
            let minority_t = scale.apply_all(&minority);
            let intensities: Vec<u8> = std::iter::once(null)
                .chain(config.alt_prompts.iter().copied().filter(|&a| a > null))
                .collect();
            let density = PoolDensity::new(fit_kde(&pool_t, config.bandwidth)?, &pool, &test, &intensities, scale);
            for (method, label) in [
                (ShiftMethod::Mean, WEIGHTED_METHODS[2]),
                (ShiftMethod::Quantile, WEIGHTED_METHODS[3]),
            ] {
                let model_q = fit_shift(method, &pool_t, &minority_t, config.bandwidth, config.alpha)?;
                let detector = WeightedDetector::new(&density, &model_q, scale, config.alpha)?;
                cells.extend(evaluate_detector(&detector, label, config, &test, null, m, job)?);
            }
        }
    }
    Ok(cells)
}

/// All cells of an experiment, in `(seed, writing prompt)` job order.
pub fn run_cells(config: &ExperimentConfig) -> Result<Vec<CellResult>> {
    config.validate()?;
    let mut jobs = Vec::new();
    for &seed in &config.seeds {
        let pooled = pooled_thresholds(config, seed)?;
        for writing_prompt in 0..config.writing_prompts {
            jobs.push(Job {
                seed,
                writing_prompt,
                pooled_thresholds: pooled.clone(),
            });
        }
    }
    let per_job: Vec<Result<Vec<CellResult>>> = jobs
        .par_iter()
        .map(|job| {
            let cells = match config.scenario {
                Scenario::Standard | Scenario::Hierarchical => run_flat_job(config, job),
                Scenario::Weighted => run_weighted_job(config, job),
            };
            cells.map_err(|e| e.context(format!("seed {} writing prompt {}", job.seed, job.writing_prompt)))
        })
        .collect();
    let mut cells = Vec::new();
    for r in per_job {
        cells.extend(r?);
    }
    Ok(cells)
}

/// Runs every cell of the configured scenario and aggregates the metrics.
pub fn run_scenario(config: &ExperimentConfig) -> Result<MetricsReport> {
    let cells = run_cells(config)?;
    let prompts: Vec<usize> = (0..config.writing_prompts).collect();
    aggregate(&cells, &prompts, &config.seeds, config.aggregation)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(scenario: Scenario) -> ExperimentConfig {
        ExperimentConfig {
            scenario,
            seeds: vec![3, 9],
            writing_prompts: 2,
            n_test: 150,
            cal_sizes: vec![30, 50],
            minority_sizes: vec![5, 15],
            null_prompts: vec![1, 5],
            alt_prompts: vec![6, 7],
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn uniform_mean_and_determinism() {
        let dist = ScoreDistribution::new(Family::Uniform01, 1).unwrap();
        for seed in [0, 1, 77] {
            let a = generate_scores(&dist, 1000, seed).unwrap();
            let mean = a.iter().map(|s| s.value()).sum::<f64>() / 1000.0;
            assert!((mean - 0.5).abs() < 0.05, "mean {mean}");
            let b = generate_scores(&dist, 1000, seed).unwrap();
            assert_eq!(a, b);
            assert!(a.iter().all(|s| s.value() > 0.0 && s.value() <= 1.0));
        }
    }

    #[test]
    fn lower_logit_mean_gives_smaller_median() {
        let base = ScoreDistribution::new(Family::LogitNormal { mu: -2.0, sigma: 1.5 }, 1).unwrap();
        let lower = ScoreDistribution::new(Family::LogitNormal { mu: -3.0, sigma: 1.5 }, 2).unwrap();
        let median = |d: &ScoreDistribution| {
            let v: Vec<f64> = generate_scores(d, 10_000, 5)
                .unwrap()
                .iter()
                .map(|s| s.value())
                .collect();
            quantile(&v, 0.5).unwrap()
        };
        assert!(median(&lower) < median(&base));
    }

    #[test]
    fn beta_and_mixture_sampling() {
        let beta = ScoreDistribution::new(Family::Beta { a: 0.5, b: 3.0 }, 3).unwrap();
        assert!(generate_scores(&beta, 500, 1).unwrap().iter().all(|s| s.value() > 0.0));
        let mix = Family::Mixture {
            components: vec![
                MixtureComponent {
                    weight: 1.0,
                    family: Family::Uniform01,
                },
                MixtureComponent {
                    weight: 3.0,
                    family: Family::LogitNormal { mu: -10.0, sigma: 1.0 },
                },
            ],
        };
        let d = ScoreDistribution::new(mix, 4).unwrap();
        let v = generate_scores(&d, 4000, 2).unwrap();
        let small = v.iter().filter(|s| s.value() < 1e-2).count() as f64 / 4000.0;
        assert!((small - 0.75).abs() < 0.05, "fraction {small}");
    }

    #[test]
    fn invalid_parameters_rejected() {
        assert!(ScoreDistribution::new(Family::Beta { a: 0.0, b: 1.0 }, 1).is_err());
        assert!(ScoreDistribution::new(Family::LogitNormal { mu: 0.0, sigma: -1.0 }, 1).is_err());
        assert!(ScoreDistribution::new(Family::Uniform01, 8).is_err());
        assert!(ScoreDistribution::new(Family::Mixture { components: vec![] }, 1).is_err());
        let dist = ScoreDistribution::new(Family::Uniform01, 1).unwrap();
        assert!(generate_scores(&dist, 0, 1).is_err());
    }

    #[test]
    fn stream_keys_separate() {
        let a: u64 = stream(1, &[2, 3]).random();
        let b: u64 = stream(1, &[3, 2]).random();
        let c: u64 = stream(1, &[2, 3]).random();
        assert_ne!(a, b);
        assert_eq!(a, c);
    }

    #[test]
    fn logit_shift_round_trip() {
        assert_eq!(logit_shift(0.3, 0.0), 0.3);
        let v = logit_shift(0.3, 1.0);
        assert!((logit_shift(v, -1.0) - 0.3).abs() < 1e-12);
        assert!(logit_shift(1e-300, -50.0) > 0.0);
    }

    #[test]
    fn config_validation() {
        assert!(ExperimentConfig::default().validate().is_ok());
        let bad = ExperimentConfig {
            alpha: 1.5,
            ..ExperimentConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::InvalidConfig { field, .. }) if field == "alpha"));
        let bad = ExperimentConfig {
            cal_sizes: vec![0],
            ..ExperimentConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = ExperimentConfig {
            cal_sizes: vec![500],
            ..ExperimentConfig::default()
        };
        assert!(bad.validate().is_err());
        let mut inverted = ExperimentConfig::default();
        inverted.distributions[6].distribution.family = Family::LogitNormal { mu: 5.0, sigma: 1.0 };
        let err = inverted.validate().unwrap_err();
        assert!(err.to_string().contains("intensity 7"), "{err}");
        let mut missing = ExperimentConfig::for_scenario(Scenario::Weighted);
        missing.distributions.retain(|e| e.population == Population::Majority);
        assert!(missing.validate().is_err());
    }

    #[test]
    fn config_toml_round_trip() {
        let config = ExperimentConfig::for_scenario(Scenario::Weighted);
        let text = config.to_toml();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), config);
        let partial = ExperimentConfig::from_toml("scenario = \"hierarchical\"\nseeds = [7]\n").unwrap();
        assert_eq!(partial.seeds, vec![7]);
        assert_eq!(partial.scenario, Scenario::Hierarchical);
        let err = ExperimentConfig::from_toml("alpah = 0.1\n").unwrap_err();
        assert_eq!(err.kind(), "parse_error");
    }

    #[test]
    fn scenarios_run_deterministically() {
        for scenario in [Scenario::Standard, Scenario::Hierarchical, Scenario::Weighted] {
            let config = small(scenario);
            let a = run_scenario(&config).unwrap();
            let b = run_scenario(&config).unwrap();
            assert_eq!(a, b);
            assert!(!a.cells.is_empty());
            for c in &a.cells {
                assert!((0.0..=1.0).contains(&c.fpr));
                if let Some(p) = c.power {
                    assert!((0.0..=1.0).contains(&p));
                }
            }
        }
    }

    #[test]
    fn pooled_thresholds_match_per_prompt_for_one_prompt() {
        let mut per_prompt = small(Scenario::Standard);
        per_prompt.writing_prompts = 1;
        let mut pooled = per_prompt.clone();
        pooled.threshold_scope = ThresholdScope::Pooled;
        assert_eq!(run_cells(&per_prompt).unwrap(), run_cells(&pooled).unwrap());

        let mut pooled = small(Scenario::Weighted);
        pooled.threshold_scope = ThresholdScope::Pooled;
        let cells = run_cells(&pooled).unwrap();
        assert!(cells.iter().all(|c| c.outlier_proportion <= 1.0));
        assert_ne!(cells, run_cells(&small(Scenario::Weighted)).unwrap());
    }

    #[test]
    fn singleton_hierarchy_matches_standard() {
        let mut hier = small(Scenario::Hierarchical);
        hier.hierarchy = HierarchyConfig {
            singleton_groups: true,
            group_effect_sd: 0.0,
            ..HierarchyConfig::default()
        };
        let standard = small(Scenario::Standard);
        let a = run_cells(&hier).unwrap();
        let b = run_cells(&standard).unwrap();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.method, "hierarchical");
            assert_eq!(x.counts, y.counts);
            assert_eq!(x.fpr.to_bits(), y.fpr.to_bits());
        }
    }

    #[test]
    fn thread_count_does_not_change_results() {
        let config = small(Scenario::Weighted);
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| run_scenario(&config).unwrap())
        };
        assert_eq!(run(1), run(4));
    }
}
