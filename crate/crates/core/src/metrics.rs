//! Long-form factuality scores over atomic-claim verdicts.
//!
//! A response is scored from the support verdicts of its atomic claims:
//! factual precision is the supported fraction, recall@K credits volume up
//! to `K` claims, and f1@K is their harmonic mean (0 for a claim-free
//! response).

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MetricsError {
    #[error("factual precision is undefined for an empty claim set")]
    EmptyClaimSet,
    #[error("k must be at least 1")]
    InvalidK,
}

/// Support decision for one atomic claim against the knowledge corpus.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClaimVerdict {
    Supported,
    NotSupported,
}

impl ClaimVerdict {
    pub fn is_supported(self) -> bool {
        matches!(self, ClaimVerdict::Supported)
    }
}

/// Aggregate factuality of one response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactualityScores {
    pub num_claims: usize,
    pub num_supported: usize,
    pub k: usize,
    /// Absent when the response has no claims.
    pub precision: Option<f64>,
    pub recall_at_k: f64,
    pub f1_at_k: f64,
}

impl FactualityScores {
    /// Scores from raw counts. `num_supported` must not exceed `num_claims`.
    pub fn from_counts(num_claims: usize, num_supported: usize, k: usize) -> Result<Self, MetricsError> {
        debug_assert!(num_supported <= num_claims);
        let recall_at_k = factual_recall_at_k(num_claims, k)?;
        let precision = (num_claims > 0).then(|| num_supported as f64 / num_claims as f64);
        let f1_at_k = match precision {
            Some(p) => harmonic_mean(p, recall_at_k),
            None => 0.0,
        };
        Ok(Self {
            num_claims,
            num_supported,
            k,
            precision,
            recall_at_k,
            f1_at_k,
        })
    }

    /// Precision with the claim-free case read as 0.
    pub fn precision_or_zero(&self) -> f64 {
        self.precision.unwrap_or(0.0)
    }
}

fn harmonic_mean(a: f64, b: f64) -> f64 {
    if a + b == 0.0 {
        0.0
    } else {
        2.0 * a * b / (a + b)
    }
}

fn count_supported(verdicts: &[ClaimVerdict]) -> usize {
    verdicts.iter().filter(|v| v.is_supported()).count()
}

pub fn factual_precision(verdicts: &[ClaimVerdict]) -> Result<f64, MetricsError> {
    if verdicts.is_empty() {
        return Err(MetricsError::EmptyClaimSet);
    }
    Ok(count_supported(verdicts) as f64 / verdicts.len() as f64)
}

pub fn factual_recall_at_k(num_claims: usize, k: usize) -> Result<f64, MetricsError> {
    if k == 0 {
        return Err(MetricsError::InvalidK);
    }
    Ok((num_claims as f64 / k as f64).min(1.0))
}

/// f1@K; exactly 0 when there are no claims.
pub fn factual_f1_at_k(verdicts: &[ClaimVerdict], k: usize) -> Result<f64, MetricsError> {
    let recall = factual_recall_at_k(verdicts.len(), k)?;
    if verdicts.is_empty() {
        return Ok(0.0);
    }
    let precision = factual_precision(verdicts)?;
    Ok(harmonic_mean(precision, recall))
}

/// Scores a response whose verdicts are grouped by sentence. Grouping only
/// affects counting; every claim carries equal weight.
pub fn score_response(per_sentence_verdicts: &[Vec<ClaimVerdict>], k: usize) -> Result<FactualityScores, MetricsError> {
    let num_claims = per_sentence_verdicts.iter().map(Vec::len).sum();
    let num_supported = per_sentence_verdicts.iter().map(|s| count_supported(s)).sum();
    FactualityScores::from_counts(num_claims, num_supported, k)
}
