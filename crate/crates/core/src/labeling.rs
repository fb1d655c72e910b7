//! Ground-truth labels for simulated guideline violations.
//!
//! A violating edit is a clear *outlier* when the permitted edit of the same
//! essay would have kept it closer to the original (higher BLEU) and the
//! violating edit's BLEU falls below a low quantile threshold. Every other
//! violating edit is a *suspect*.

use serde::{Deserialize, Serialize};

use crate::conformal::WatermarkScore;
use crate::error::{Error, Result};
use crate::quantile::quantile;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditRole {
    /// Edited with the permitted prompt.
    Permitted,
    /// Edited with a prompt outside the guideline.
    Violating,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditRecord {
    pub essay_id: String,
    pub role: EditRole,
    /// BLEU of the permitted edit against the original.
    pub bleu_null: f64,
    /// BLEU of the violating edit against the original.
    pub bleu_alt: f64,
    pub score_alt: WatermarkScore,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationLabel {
    Inlier,
    Suspect,
    Outlier,
}

/// Which BLEU population the outlier threshold is computed over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdPopulation {
    /// BLEU of the permitted edits of the test essays.
    #[default]
    NullEdits,
    /// BLEU of the violating edits of the test essays.
    AltEdits,
}

/// Whether the outlier threshold is computed within each writing prompt or
/// over all writing prompts of a seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdScope {
    #[default]
    PerPrompt,
    Pooled,
}

/// Empirical `alpha`-quantile of a BLEU population.
pub fn bleu_quantile_threshold(bleu_scores: &[f64], alpha: f64) -> Result<f64> {
    if bleu_scores.is_empty() {
        return Err(Error::EmptyInput("BLEU scores"));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidAlpha(alpha, "(0, 1)"));
    }
    quantile(bleu_scores, alpha)
}

/// Labels a record; ties on either condition fall to suspect.
pub fn classify(record: &EditRecord, threshold: f64) -> ViolationLabel {
    classify_bleu(record.role, record.bleu_null, record.bleu_alt, threshold)
}

pub fn classify_bleu(role: EditRole, bleu_null: f64, bleu_alt: f64, threshold: f64) -> ViolationLabel {
    match role {
        EditRole::Permitted => ViolationLabel::Inlier,
        EditRole::Violating if bleu_null > bleu_alt && bleu_alt < threshold => ViolationLabel::Outlier,
        EditRole::Violating => ViolationLabel::Suspect,
    }
}
