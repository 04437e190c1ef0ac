//! Labeled alignment data built from assessed responses.
//!
//! A response is chosen when its f1@K exceeds `t`. Each sentence with at
//! least one assessed claim becomes its own item, chosen when the mean
//! support of its claims passes `t_s`, with the prompt and the preceding
//! sentences as its context.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evaluator::{AssessmentRecord, AtomicClaim, EvidenceSet, Sentence, UnassessedClaim};
use crate::jsonl::{self, JsonlError};
use crate::metrics::{self, ClaimVerdict, FactualityScores, MetricsError};
use crate::types::{Granularity, Label, Source};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DatasetError {
    #[error("sentence index {index} out of range for {len} sentences")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("mixture labeling requires rho")]
    MissingRho,
    #[error("invalid label config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
}

pub type Result<T> = std::result::Result<T, DatasetError>;

/// One assessed (prompt, response) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseRecord {
    pub record_id: String,
    pub prompt: String,
    pub response: String,
    pub sentences: Vec<Sentence>,
    pub assessments: Vec<AssessmentRecord>,
    #[serde(default)]
    pub unassessed: Vec<UnassessedClaim>,
    /// Claims left out of `scores` because they could not be assessed.
    #[serde(default)]
    pub num_excluded: usize,
    pub scores: FactualityScores,
    #[serde(default)]
    pub source: Source,
    #[serde(default)]
    pub iteration: usize,
}

impl ResponseRecord {
    /// Builds a record from verdicts already grouped by sentence, with one
    /// claim per verdict named by `claim_text(sentence, j)`.
    pub fn from_sentence_verdicts(
        record_id: impl Into<String>,
        prompt: impl Into<String>,
        sentences: Vec<Sentence>,
        verdicts: &[Vec<ClaimVerdict>],
        claim_text: impl Fn(usize, usize) -> String,
        k: usize,
    ) -> Result<Self> {
        let response = sentences.iter().map(|s| s.text.as_str()).collect::<Vec<_>>().join(" ");
        let mut assessments = Vec::new();
        for (sentence, sentence_verdicts) in verdicts.iter().enumerate() {
            for (j, verdict) in sentence_verdicts.iter().enumerate() {
                assessments.push(AssessmentRecord {
                    claim: AtomicClaim::new(sentence, claim_text(sentence, j)),
                    evidence: EvidenceSet::default(),
                    verdict: *verdict,
                    rationale: String::new(),
                });
            }
        }
        Ok(Self {
            record_id: record_id.into(),
            prompt: prompt.into(),
            response,
            sentences,
            assessments,
            unassessed: Vec::new(),
            num_excluded: 0,
            scores: metrics::score_response(verdicts, k)?,
            source: Source::Factuality,
            iteration: 0,
        })
    }

    /// Assessed verdicts keyed by sentence index.
    pub fn verdicts_by_sentence(&self) -> BTreeMap<usize, Vec<ClaimVerdict>> {
        let mut grouped: BTreeMap<usize, Vec<ClaimVerdict>> = BTreeMap::new();
        for a in &self.assessments {
            grouped.entry(a.claim.sentence_index).or_default().push(a.verdict);
        }
        grouped
    }

    pub fn recompute_scores(&self, k: usize) -> std::result::Result<FactualityScores, MetricsError> {
        let grouped: Vec<Vec<ClaimVerdict>> = self.verdicts_by_sentence().into_values().collect();
        metrics::score_response(&grouped, k)
    }
}

fn default_weight() -> f64 {
    1.0
}

/// A (context, completion, label) unit for the alignment losses. Fields not
/// known to this struct are kept in `extra` and written back on export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceItem {
    pub context: String,
    pub completion: String,
    pub label: Label,
    pub granularity: Granularity,
    #[serde(default)]
    pub source: Source,
    #[serde(default = "default_weight")]
    pub weight_hint: f64,
    #[serde(default)]
    pub record_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sentence_index: Option<usize>,
    #[serde(flatten)]
    pub extra: serde_json::Map<String, serde_json::Value>,
}

impl PreferenceItem {
    pub fn new(context: impl Into<String>, completion: impl Into<String>, label: Label, granularity: Granularity) -> Self {
        Self {
            context: context.into(),
            completion: completion.into(),
            label,
            granularity,
            source: Source::Factuality,
            weight_hint: 1.0,
            record_id: String::new(),
            sentence_index: None,
            extra: serde_json::Map::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LabelConfig {
    /// Response threshold on f1@K (strict).
    pub t: f64,
    /// Sentence threshold on mean claim support.
    pub t_s: f64,
    pub k: usize,
    /// Fraction of records labeled by precision instead of recall.
    pub rho: Option<f64>,
    /// Seed for the precision/recall partition.
    pub seed: u64,
}

impl Default for LabelConfig {
    fn default() -> Self {
        Self {
            t: 0.75,
            t_s: 1.0,
            k: 100,
            rho: None,
            seed: 0,
        }
    }
}

impl LabelConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("t", self.t), ("t_s", self.t_s)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(DatasetError::InvalidConfig(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        if let Some(rho) = self.rho {
            if !(0.0..=1.0).contains(&rho) {
                return Err(DatasetError::InvalidConfig(format!("rho must lie in [0, 1], got {rho}")));
            }
        }
        if self.k == 0 {
            return Err(MetricsError::InvalidK.into());
        }
        Ok(())
    }

    /// `>= 1.0` at `t_s = 1.0` (all claims supported), strict `>` otherwise.
    fn sentence_passes(&self, mean_support: f64) -> bool {
        if self.t_s >= 1.0 {
            mean_support >= 1.0
        } else {
            mean_support > self.t_s
        }
    }
}

/// Which score a response label was thresholded on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelBasis {
    F1,
    Precision,
    Recall,
}

fn scores_at(record: &ResponseRecord, k: usize) -> Result<FactualityScores> {
    Ok(FactualityScores::from_counts(
        record.scores.num_claims,
        record.scores.num_supported,
        k,
    )?)
}

fn response_item(record: &ResponseRecord, chosen: bool) -> PreferenceItem {
    let mut item = PreferenceItem::new(
        record.prompt.clone(),
        record.response.clone(),
        Label::from_bool(chosen),
        Granularity::Response,
    );
    item.source = record.source;
    item.record_id = record.record_id.clone();
    item
}

fn label_response_by(record: &ResponseRecord, cfg: &LabelConfig, basis: LabelBasis) -> Result<PreferenceItem> {
    let scores = scores_at(record, cfg.k)?;
    let value = match basis {
        LabelBasis::F1 => scores.f1_at_k,
        LabelBasis::Precision => scores.precision_or_zero(),
        LabelBasis::Recall => scores.recall_at_k,
    };
    Ok(response_item(record, value > cfg.t))
}

/// Chosen iff f1@K is strictly greater than `t`.
pub fn label_response(record: &ResponseRecord, cfg: &LabelConfig) -> Result<PreferenceItem> {
    cfg.validate()?;
    label_response_by(record, cfg, LabelBasis::F1)
}

/// `prompt` followed by sentences `0..i`, space-separated.
pub fn build_context(prompt: &str, sentences: &[Sentence], i: usize) -> Result<String> {
    if i >= sentences.len() {
        return Err(DatasetError::IndexOutOfRange {
            index: i,
            len: sentences.len(),
        });
    }
    let mut context = prompt.to_string();
    for s in &sentences[..i] {
        context.push(' ');
        context.push_str(&s.text);
    }
    Ok(context)
}

/// One item per sentence with at least one assessed claim.
pub fn label_sentences(record: &ResponseRecord, cfg: &LabelConfig) -> Result<Vec<PreferenceItem>> {
    cfg.validate()?;
    let grouped = record.verdicts_by_sentence();
    let mut items = Vec::new();
    for (position, sentence) in record.sentences.iter().enumerate() {
        let Some(verdicts) = grouped.get(&sentence.index).filter(|v| !v.is_empty()) else {
            continue;
        };
        let supported = verdicts.iter().filter(|v| v.is_supported()).count();
        let mean_support = supported as f64 / verdicts.len() as f64;
        let mut item = PreferenceItem::new(
            build_context(&record.prompt, &record.sentences, position)?,
            sentence.text.clone(),
            Label::from_bool(cfg.sentence_passes(mean_support)),
            Granularity::Sentence,
        );
        item.source = record.source;
        item.record_id = record.record_id.clone();
        item.sentence_index = Some(sentence.index);
        items.push(item);
    }
    Ok(items)
}

/// Indices of the records labeled by precision: exactly `round(rho * n)` of
/// them, picked by a seeded shuffle.
pub fn precision_partition(n: usize, rho: f64, seed: u64) -> Vec<bool> {
    let take = (rho * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut by_precision = vec![false; n];
    for &i in order.iter().take(take.min(n)) {
        by_precision[i] = true;
    }
    by_precision
}

/// Response items thresholded on precision for a `rho` fraction of records
/// and on recall@K for the rest; each response item records its basis under
/// `label_basis`. Sentence items follow their response unchanged.
pub fn label_with_mixture(records: &[ResponseRecord], cfg: &LabelConfig) -> Result<Vec<PreferenceItem>> {
    cfg.validate()?;
    let rho = cfg.rho.ok_or(DatasetError::MissingRho)?;
    let partition = precision_partition(records.len(), rho, cfg.seed);
    let mut items = Vec::new();
    for (record, by_precision) in records.iter().zip(partition) {
        let basis = if by_precision {
            LabelBasis::Precision
        } else {
            LabelBasis::Recall
        };
        let mut item = label_response_by(record, cfg, basis)?;
        item.extra
            .insert("label_basis".into(), serde_json::to_value(basis).expect("enum serializes"));
        items.push(item);
        items.extend(label_sentences(record, cfg)?);
    }
    Ok(items)
}

/// Response and sentence items for every record; mixture labeling when
/// `rho` is set.
pub fn label_records(records: &[ResponseRecord], cfg: &LabelConfig) -> Result<Vec<PreferenceItem>> {
    if cfg.rho.is_some() {
        return label_with_mixture(records, cfg);
    }
    let mut items = Vec::new();
    for record in records {
        items.push(label_response(record, cfg)?);
        items.extend(label_sentences(record, cfg)?);
    }
    Ok(items)
}

/// Concatenates both sets and applies a seeded shuffle.
pub fn mix_general(factuality: Vec<PreferenceItem>, general: Vec<PreferenceItem>, seed: u64) -> Vec<PreferenceItem> {
    let mut all = factuality;
    all.extend(general);
    all.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    all
}

pub fn export_items(path: &Path, items: &[PreferenceItem]) -> Result<()> {
    Ok(jsonl::write_jsonl(path, items)?)
}

pub fn import_items(path: &Path) -> Result<Vec<PreferenceItem>> {
    Ok(jsonl::read_jsonl(path)?)
}

pub fn write_records(path: &Path, records: &[ResponseRecord]) -> Result<()> {
    Ok(jsonl::write_jsonl(path, records)?)
}

pub fn read_records(path: &Path) -> Result<Vec<ResponseRecord>> {
    Ok(jsonl::read_jsonl(path)?)
}
