//! False-positive rate, detection power, and aggregation across writing
//! prompts and seeds.
//!
//! A `(null, alt)` cell whose violating edits produce fewer than 30 clear
//! outliers, or an outlier proportion below 0.05, is a negligible violation:
//! it is excluded before any averaging.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::conformal::Decision;
use crate::error::{Error, Result};

pub const MIN_OUTLIER_PROPORTION: f64 = 0.05;
pub const MIN_OUTLIER_COUNT: usize = 30;

/// Fraction of permitted-edit essays that were flagged.
pub fn compute_fpr(decisions: &[Decision]) -> Result<f64> {
    flag_rate(decisions).ok_or(Error::NoDecisions)
}

/// Fraction of clear outliers that were flagged.
pub fn compute_power(decisions: &[Decision]) -> Result<f64> {
    flag_rate(decisions).ok_or(Error::NoOutliers)
}

fn flag_rate(decisions: &[Decision]) -> Option<f64> {
    if decisions.is_empty() {
        return None;
    }
    let flagged = decisions.iter().filter(|d| d.flagged).count();
    Some(flagged as f64 / decisions.len() as f64)
}

pub fn is_excluded(n_outliers: usize, outlier_proportion: f64) -> bool {
    outlier_proportion < MIN_OUTLIER_PROPORTION || n_outliers < MIN_OUTLIER_COUNT
}

/// One standard deviation of a binomial rate at level `alpha` over `trials`.
pub fn binomial_sigma(alpha: f64, trials: usize) -> f64 {
    (alpha * (1.0 - alpha) / trials as f64).sqrt()
}

/// Identifies a cell: method, permitted edit, violating edit, calibration
/// size, writing prompt, seed.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CellKey {
    pub method: String,
    pub null_prompt: u8,
    pub alt_prompt: u8,
    pub cal_size: usize,
    pub writing_prompt: usize,
    pub seed: u64,
}

/// Raw decision counts for one cell.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellCounts {
    pub n_null: usize,
    pub n_null_flagged: usize,
    pub n_alt: usize,
    pub n_outliers: usize,
    pub n_outliers_flagged: usize,
    pub n_suspects: usize,
    pub n_suspects_flagged: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub method: String,
    pub null_prompt: u8,
    pub alt_prompt: u8,
    pub cal_size: usize,
    pub writing_prompt: usize,
    pub seed: u64,
    pub fpr: f64,
    pub power: Option<f64>,
    pub n_outliers: usize,
    pub outlier_proportion: f64,
    pub excluded: bool,
    /// Diagnostic only; never enters FPR or power.
    pub suspect_flag_rate: Option<f64>,
    pub counts: CellCounts,
}

impl CellResult {
    pub fn from_counts(key: CellKey, counts: CellCounts) -> Result<Self> {
        if counts.n_null == 0 {
            return Err(Error::NoDecisions.context(format!("cell {key:?}")));
        }
        let fpr = counts.n_null_flagged as f64 / counts.n_null as f64;
        let outlier_proportion = if counts.n_alt == 0 {
            0.0
        } else {
            counts.n_outliers as f64 / counts.n_alt as f64
        };
        let excluded = is_excluded(counts.n_outliers, outlier_proportion);
        let power =
            (!excluded && counts.n_outliers > 0).then(|| counts.n_outliers_flagged as f64 / counts.n_outliers as f64);
        let suspect_flag_rate =
            (counts.n_suspects > 0).then(|| counts.n_suspects_flagged as f64 / counts.n_suspects as f64);
        Ok(Self {
            method: key.method,
            null_prompt: key.null_prompt,
            alt_prompt: key.alt_prompt,
            cal_size: key.cal_size,
            writing_prompt: key.writing_prompt,
            seed: key.seed,
            fpr,
            power,
            n_outliers: counts.n_outliers,
            outlier_proportion,
            excluded,
            suspect_flag_rate,
            counts,
        })
    }

    pub fn key(&self) -> CellKey {
        CellKey {
            method: self.method.clone(),
            null_prompt: self.null_prompt,
            alt_prompt: self.alt_prompt,
            cal_size: self.cal_size,
            writing_prompt: self.writing_prompt,
            seed: self.seed,
        }
    }

    fn pair_key(&self) -> PairKey {
        (self.method.clone(), self.null_prompt, self.alt_prompt, self.cal_size)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Unweighted mean over writing prompts, then over seeds.
    #[default]
    PerPromptMean,
    /// Ratio of summed counts over all included cells.
    Pooled,
}

/// Aggregated metrics for one `(method, null, alt, cal_size)` combination.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairSummary {
    pub method: String,
    pub null_prompt: u8,
    pub alt_prompt: u8,
    pub cal_size: usize,
    pub fpr: f64,
    pub power: f64,
    /// Sample standard deviation of the per-seed values (0 for one seed).
    pub fpr_seed_sd: f64,
    pub power_seed_sd: f64,
    pub n_seeds: usize,
    pub n_cells: usize,
    pub outlier_proportion: f64,
    pub suspect_flag_rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OmittedPair {
    pub method: String,
    pub null_prompt: u8,
    pub alt_prompt: u8,
    pub cal_size: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub cells: Vec<CellResult>,
    pub summaries: Vec<PairSummary>,
    pub omitted: Vec<OmittedPair>,
    pub seeds: Vec<u64>,
    pub aggregation: Aggregation,
}

type PairKey = (String, u8, u8, usize);

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

fn sample_sd(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let mu = mean(values);
    let ss: f64 = values.iter().map(|v| (v - mu) * (v - mu)).sum();
    (ss / (values.len() - 1) as f64).sqrt()
}

/// Folds cells into per-pair summaries. Excluded cells never enter a mean;
/// pairs with no included cell are reported as omitted.
pub fn aggregate(
    cells: &[CellResult],
    over_prompts: &[usize],
    over_seeds: &[u64],
    aggregation: Aggregation,
) -> Result<MetricsReport> {
    let mut over_seeds = over_seeds.to_vec();
    over_seeds.sort_unstable();
    over_seeds.dedup();
    let mut over_prompts = over_prompts.to_vec();
    over_prompts.sort_unstable();
    over_prompts.dedup();

    let mut by_pair: BTreeMap<PairKey, Vec<&CellResult>> = BTreeMap::new();
    for cell in cells {
        by_pair.entry(cell.pair_key()).or_default().push(cell);
    }

    let mut summaries = Vec::new();
    let mut omitted = Vec::new();
    for ((method, null_prompt, alt_prompt, cal_size), mut group) in by_pair {
        group.sort_by_key(|c| (c.seed, c.writing_prompt));
        for &seed in &over_seeds {
            for &prompt in &over_prompts {
                if !group.iter().any(|c| c.seed == seed && c.writing_prompt == prompt) {
                    return Err(Error::MissingCell(format!(
                        "method={method} null={null_prompt} alt={alt_prompt} cal_size={cal_size} \
                         prompt={prompt} seed={seed}"
                    )));
                }
            }
        }
        let included: Vec<&CellResult> = group
            .iter()
            .copied()
            .filter(|c| !c.excluded && over_seeds.contains(&c.seed) && over_prompts.contains(&c.writing_prompt))
            .collect();
        if included.is_empty() {
            omitted.push(OmittedPair {
                method,
                null_prompt,
                alt_prompt,
                cal_size,
                reason: "negligible_violation".into(),
            });
            continue;
        }

        let suspect_rates: Vec<f64> = included.iter().filter_map(|c| c.suspect_flag_rate).collect();
        let suspect_flag_rate = (!suspect_rates.is_empty()).then(|| mean(&suspect_rates));
        let outlier_proportion = mean(&included.iter().map(|c| c.outlier_proportion).collect::<Vec<_>>());

        let summary = match aggregation {
            Aggregation::PerPromptMean => {
                let mut seed_fpr = Vec::new();
                let mut seed_power = Vec::new();
                for &seed in &over_seeds {
                    let of_seed: Vec<&&CellResult> = included.iter().filter(|c| c.seed == seed).collect();
                    if of_seed.is_empty() {
                        continue;
                    }
                    seed_fpr.push(mean(&of_seed.iter().map(|c| c.fpr).collect::<Vec<_>>()));
                    seed_power.push(mean(
                        &of_seed.iter().map(|c| c.power.unwrap_or(0.0)).collect::<Vec<_>>(),
                    ));
                }
                PairSummary {
                    method,
                    null_prompt,
                    alt_prompt,
                    cal_size,
                    fpr: mean(&seed_fpr),
                    power: mean(&seed_power),
                    fpr_seed_sd: sample_sd(&seed_fpr),
                    power_seed_sd: sample_sd(&seed_power),
                    n_seeds: seed_fpr.len(),
                    n_cells: included.len(),
                    outlier_proportion,
                    suspect_flag_rate,
                }
            }
            Aggregation::Pooled => {
                let sum = |f: fn(&CellCounts) -> usize| included.iter().map(|c| f(&c.counts)).sum::<usize>();
                let n_seeds = {
                    let mut s: Vec<u64> = included.iter().map(|c| c.seed).collect();
                    s.dedup();
                    s.len()
                };
                PairSummary {
                    method,
                    null_prompt,
                    alt_prompt,
                    cal_size,
                    fpr: sum(|c| c.n_null_flagged) as f64 / sum(|c| c.n_null) as f64,
                    power: sum(|c| c.n_outliers_flagged) as f64 / sum(|c| c.n_outliers) as f64,
                    fpr_seed_sd: 0.0,
                    power_seed_sd: 0.0,
                    n_seeds,
                    n_cells: included.len(),
                    outlier_proportion,
                    suspect_flag_rate,
                }
            }
        };
        summaries.push(summary);
    }

    let mut cells = cells.to_vec();
    cells.sort_by_key(CellResult::key);
    Ok(MetricsReport {
        cells,
        summaries,
        omitted,
        seeds: over_seeds,
        aggregation,
    })
}
