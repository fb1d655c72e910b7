//! Sentence-level BLEU between an original essay and its edited version.
//!
//! Unigram and bigram modified (clipped) precisions, combined with weights
//! `(0.5, 0.5)` and a brevity penalty. Used only to label simulated edits;
//! instructors never see the original draft.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

/// Lowercased word tokens with boundary punctuation removed.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TokenizedText {
    tokens: Vec<String>,
}

impl TokenizedText {
    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn join(&self) -> String {
        self.tokens.join(" ")
    }
}

impl<S: Into<String>> FromIterator<S> for TokenizedText {
    /// Wraps tokens as given, without normalization.
    fn from_iter<I: IntoIterator<Item = S>>(iter: I) -> Self {
        Self {
            tokens: iter.into_iter().map(Into::into).collect(),
        }
    }
}

/// Splits on Unicode whitespace, lowercases, and trims non-alphanumeric
/// characters from both ends of each token. Tokens left empty are dropped.
pub fn tokenize(text: &str) -> TokenizedText {
    let tokens = text
        .split_whitespace()
        .map(|raw| {
            raw.to_lowercase()
                .trim_matches(|c: char| !c.is_alphanumeric())
                .to_string()
        })
        .filter(|t| !t.is_empty())
        .collect();
    TokenizedText { tokens }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Combine {
    /// `exp(0.5 ln p1 + 0.5 ln p2)`.
    #[default]
    Geometric,
    /// `0.5 p1 + 0.5 p2`, for sensitivity checks.
    Arithmetic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BleuConfig {
    pub combine: Combine,
    pub brevity_penalty: bool,
}

impl Default for BleuConfig {
    fn default() -> Self {
        Self {
            combine: Combine::Geometric,
            brevity_penalty: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BleuScore {
    pub value: f64,
    pub unigram_precision: f64,
    pub bigram_precision: f64,
    pub brevity_penalty: f64,
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    for gram in tokens.windows(n) {
        *counts.entry(gram).or_insert(0) += 1;
    }
    counts
}

/// Clipped precision of order `n`.
///
/// A candidate too short to contain any `n`-gram scores 1 if the reference
/// has none either, 0 otherwise.
pub fn modified_precision(reference: &[String], candidate: &[String], n: usize) -> f64 {
    let cand = ngram_counts(candidate, n);
    let total: usize = cand.values().sum();
    if total == 0 {
        return if reference.len() < n { 1.0 } else { 0.0 };
    }
    let refs = ngram_counts(reference, n);
    let clipped: usize = cand
        .iter()
        .map(|(gram, &c)| c.min(refs.get(gram).copied().unwrap_or(0)))
        .sum();
    clipped as f64 / total as f64
}

pub fn bleu(reference: &TokenizedText, candidate: &TokenizedText) -> BleuScore {
    bleu_with(reference, candidate, BleuConfig::default())
}

pub fn bleu_with(reference: &TokenizedText, candidate: &TokenizedText, config: BleuConfig) -> BleuScore {
    if candidate.is_empty() {
        return BleuScore {
            value: 0.0,
            unigram_precision: 0.0,
            bigram_precision: 0.0,
            brevity_penalty: if config.brevity_penalty && !reference.is_empty() {
                // exp(1 - r/0) -> 0; report the smallest positive value
                f64::MIN_POSITIVE
            } else {
                1.0
            },
        };
    }
    let p1 = modified_precision(&reference.tokens, &candidate.tokens, 1);
    let p2 = modified_precision(&reference.tokens, &candidate.tokens, 2);
    let (r, c) = (reference.len() as f64, candidate.len() as f64);
    let bp = if config.brevity_penalty && c < r {
        (1.0 - r / c).exp()
    } else {
        1.0
    };
    let value = match config.combine {
        Combine::Geometric if p1 > 0.0 && p2 > 0.0 => bp * (0.5 * p1.ln() + 0.5 * p2.ln()).exp(),
        Combine::Geometric => 0.0,
        Combine::Arithmetic => bp * (0.5 * p1 + 0.5 * p2),
    };
    BleuScore {
        value: value.clamp(0.0, 1.0),
        unigram_precision: p1,
        bigram_precision: p2,
        brevity_penalty: bp,
    }
}
