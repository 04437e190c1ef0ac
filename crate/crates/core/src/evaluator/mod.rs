//! Automatic long-form factuality evaluation.
//!
//! A response goes through four stages: sentence splitting and atomic claim
//! decomposition (with a self-contained revision of each claim), search
//! query generation, passage retrieval, and a final support assessment.
//! Query generation and retrieval repeat up to `max_search_steps` times per
//! claim, accumulating evidence.

pub mod backend;
pub mod heuristic;
pub mod prompts;
pub mod retriever;
pub mod sentences;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dataset::ResponseRecord;
use crate::metrics::{self, ClaimVerdict, MetricsError};
use crate::types::Source;
use backend::{complete_with_retry, BackendError, GenerativeBackend, PromptRequest, RetryPolicy};
use prompts::{PromptTemplates, TemplateError};
use retriever::{Passage, Retriever, RetrieverError};

pub use sentences::{split_sentences, Sentence};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("backend failure: {0}")]
    Backend(#[from] BackendError),
    #[error("retriever failure: {0}")]
    Retriever(#[from] RetrieverError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("could not parse a search query: {0}")]
    QueryParseFailure(String),
    #[error("could not parse a verdict: {0}")]
    VerdictParseFailure(String),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("invalid evaluator config: {0}")]
    InvalidConfig(String),
}

pub type Result<T> = std::result::Result<T, EvalError>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AtomicClaim {
    pub sentence_index: usize,
    pub raw_text: String,
    /// Self-contained form; equals `raw_text` until revised.
    pub revised_text: String,
}

impl AtomicClaim {
    pub fn new(sentence_index: usize, raw_text: impl Into<String>) -> Self {
        let raw_text = raw_text.into();
        Self {
            sentence_index,
            revised_text: raw_text.clone(),
            raw_text,
        }
    }
}

/// Passages gathered for one claim, unique by `doc_id` in first-seen order.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvidenceSet {
    pub passages: Vec<Passage>,
    pub queries_issued: Vec<String>,
}

impl EvidenceSet {
    pub fn extend(&mut self, passages: impl IntoIterator<Item = Passage>) {
        for p in passages {
            if !self.passages.iter().any(|seen| seen.doc_id == p.doc_id) {
                self.passages.push(p);
            }
        }
    }

    pub fn doc_ids(&self) -> Vec<&str> {
        self.passages.iter().map(|p| p.doc_id.as_str()).collect()
    }

    /// Knowledge block for the prompts: one passage per line, or `N/A`.
    pub fn knowledge_text(&self) -> String {
        if self.passages.is_empty() {
            return "N/A".to_string();
        }
        self.passages
            .iter()
            .map(|p| {
                if p.title.is_empty() {
                    p.text.clone()
                } else {
                    format!("{}: {}", p.title, p.text)
                }
            })
            .collect::<Vec<_>>()
            .join("\n")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssessmentRecord {
    pub claim: AtomicClaim,
    pub evidence: EvidenceSet,
    pub verdict: ClaimVerdict,
    /// The backend's reasoning, verbatim.
    pub rationale: String,
}

/// A claim (or a whole sentence, when decomposition failed) that could not
/// be assessed. Excluded from scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnassessedClaim {
    pub sentence_index: usize,
    pub claim: Option<AtomicClaim>,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvaluatorConfig {
    pub top_k: usize,
    pub max_search_steps: usize,
    pub backend_temperature: f64,
    pub max_parallel_claims: usize,
    /// `K` for recall@K and f1@K in the record's scores.
    pub k: usize,
    pub retry: RetryPolicy,
}

impl Default for EvaluatorConfig {
    fn default() -> Self {
        Self {
            top_k: 3,
            max_search_steps: 2,
            backend_temperature: 0.1,
            max_parallel_claims: 4,
            k: 100,
            retry: RetryPolicy::default(),
        }
    }
}

impl EvaluatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.top_k == 0 {
            return Err(EvalError::InvalidConfig("top_k must be at least 1".into()));
        }
        if self.max_search_steps == 0 {
            return Err(EvalError::InvalidConfig("max_search_steps must be at least 1".into()));
        }
        if self.max_parallel_claims == 0 {
            return Err(EvalError::InvalidConfig("max_parallel_claims must be at least 1".into()));
        }
        if self.k == 0 {
            return Err(EvalError::Metrics(MetricsError::InvalidK));
        }
        if !self.backend_temperature.is_finite() || self.backend_temperature < 0.0 {
            return Err(EvalError::InvalidConfig("backend_temperature must be non-negative".into()));
        }
        Ok(())
    }
}

const QUERY_FORMAT_REMINDER: &str =
    "\n\nYour previous answer did not contain a query in a markdown code block. Put your query in a markdown code block.";
const VERDICT_FORMAT_REMINDER: &str =
    "\n\nYour previous answer did not end with a valid final answer. Wrap your final answer, either \"Supported\" or \"Not Supported\", in square brackets.";

/// Content-addressed id for a (prompt, response) pair.
pub fn record_id(prompt: &str, response: &str) -> String {
    let mut hasher = Sha256::new();
    hasher.update(prompt.as_bytes());
    hasher.update([0u8]);
    hasher.update(response.as_bytes());
    hex::encode(&hasher.finalize()[..8])
}

/// The evaluator's collaborators bundled together. All methods are `&self`
/// and the struct is `Sync`, so claims can be processed on worker threads.
pub struct Evaluator<'a> {
    backend: &'a dyn GenerativeBackend,
    retriever: &'a dyn Retriever,
    templates: PromptTemplates,
    cfg: EvaluatorConfig,
    retriever_calls: AtomicUsize,
}

impl<'a> Evaluator<'a> {
    pub fn new(backend: &'a dyn GenerativeBackend, retriever: &'a dyn Retriever, cfg: EvaluatorConfig) -> Result<Self> {
        Self::with_templates(backend, retriever, cfg, PromptTemplates::default())
    }

    pub fn with_templates(
        backend: &'a dyn GenerativeBackend,
        retriever: &'a dyn Retriever,
        cfg: EvaluatorConfig,
        templates: PromptTemplates,
    ) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            backend,
            retriever,
            templates,
            cfg,
            retriever_calls: AtomicUsize::new(0),
        })
    }

    pub fn config(&self) -> &EvaluatorConfig {
        &self.cfg
    }

    /// Total retriever calls made through this evaluator.
    pub fn retriever_calls(&self) -> usize {
        self.retriever_calls.load(Ordering::Relaxed)
    }

    fn call(&self, request: &PromptRequest) -> Result<String> {
        Ok(complete_with_retry(self.backend, request, &self.cfg.retry)?)
    }

    pub fn decompose_sentence(&self, sentence: &Sentence, context: &str) -> Result<Vec<AtomicClaim>> {
        let request = self.templates.decompose.render(
            &[("response", context), ("sentence", &sentence.text)],
            self.cfg.backend_temperature,
        )?;
        let output = self.call(&request)?;
        Ok(prompts::parse_claims(&output)
            .into_iter()
            .map(|text| AtomicClaim::new(sentence.index, text))
            .collect())
    }

    pub fn revise_claim(&self, claim: &AtomicClaim, full_response: &str) -> Result<AtomicClaim> {
        let request = self.templates.revise.render(
            &[("response", full_response), ("statement", &claim.raw_text)],
            self.cfg.backend_temperature,
        )?;
        let mut revised = prompts::parse_revision(&self.call(&request)?);
        if revised.is_none() {
            revised = prompts::parse_revision(&self.call(&request)?);
        }
        let revised_text = revised.ok_or_else(|| BackendError::Format("empty revision".into()))?;
        Ok(AtomicClaim {
            revised_text,
            ..claim.clone()
        })
    }

    /// One search query for `claim`, given the evidence gathered so far. A
    /// repeat of an earlier query triggers one retry that lists the earlier
    /// queries; a second repeat is accepted.
    pub fn generate_query(&self, claim: &AtomicClaim, prior: &EvidenceSet) -> Result<String> {
        let knowledge = prior.knowledge_text();
        let request = self.templates.query.render(
            &[("knowledge", &knowledge), ("statement", &claim.revised_text)],
            self.cfg.backend_temperature,
        )?;
        let query = self.query_with_format_retry(request.clone())?;
        if !prior.queries_issued.contains(&query) {
            return Ok(query);
        }
        let previous = prior.queries_issued.join("\n");
        let mut retry = request;
        retry.prompt.push_str("\n\nPREVIOUS QUERIES (issue a different one):\n");
        retry.prompt.push_str(&previous);
        retry.fields.insert("previous_queries".into(), previous);
        match self.query_with_format_retry(retry) {
            Ok(q) => Ok(q),
            Err(EvalError::QueryParseFailure(_)) => Ok(query),
            Err(e) => Err(e),
        }
    }

    fn query_with_format_retry(&self, request: PromptRequest) -> Result<String> {
        let output = self.call(&request)?;
        if let Some(q) = prompts::parse_fenced_block(&output) {
            return Ok(q);
        }
        let mut again = request;
        again.prompt.push_str(QUERY_FORMAT_REMINDER);
        let output = self.call(&again)?;
        prompts::parse_fenced_block(&output).ok_or_else(|| EvalError::QueryParseFailure(truncate(&output, 200)))
    }

    pub fn search(&self, query: &str) -> Result<Vec<Passage>> {
        self.retriever_calls.fetch_add(1, Ordering::Relaxed);
        let mut passages = self.retriever.retrieve(query, self.cfg.top_k)?;
        passages.truncate(self.cfg.top_k);
        Ok(passages)
    }

    pub fn assess_claim(&self, claim: &AtomicClaim, evidence: &EvidenceSet) -> Result<AssessmentRecord> {
        let knowledge = evidence.knowledge_text();
        let request = self.templates.assess.render(
            &[("knowledge", &knowledge), ("statement", &claim.revised_text)],
            self.cfg.backend_temperature,
        )?;
        let mut rationale = self.call(&request)?;
        let verdict = match prompts::parse_verdict(&rationale) {
            Ok(v) => v,
            Err(_) => {
                let mut again = request;
                again.prompt.push_str(VERDICT_FORMAT_REMINDER);
                rationale = self.call(&again)?;
                prompts::parse_verdict(&rationale).map_err(EvalError::VerdictParseFailure)?
            }
        };
        Ok(AssessmentRecord {
            claim: claim.clone(),
            evidence: evidence.clone(),
            verdict,
            rationale,
        })
    }

    /// Revision, up to `max_search_steps` rounds of query + search, then assessment.
    pub fn investigate_claim(&self, claim: &AtomicClaim, full_response: &str) -> Result<AssessmentRecord> {
        let claim = self.revise_claim(claim, full_response)?;
        let mut evidence = EvidenceSet::default();
        for _ in 0..self.cfg.max_search_steps {
            let query = self.generate_query(&claim, &evidence)?;
            let passages = self.search(&query)?;
            evidence.queries_issued.push(query);
            evidence.extend(passages);
        }
        self.assess_claim(&claim, &evidence)
    }

    pub fn evaluate_response(&self, prompt: &str, response: &str) -> Result<ResponseRecord> {
        let sentences = split_sentences(response);
        let mut claims = Vec::new();
        let mut unassessed = Vec::new();
        for sentence in &sentences {
            match self.decompose_sentence(sentence, response) {
                Ok(found) => claims.extend(found),
                Err(e) => {
                    tracing::warn!(sentence = sentence.index, error = %e, "decomposition failed");
                    unassessed.push(UnassessedClaim {
                        sentence_index: sentence.index,
                        claim: None,
                        error: e.to_string(),
                    });
                }
            }
        }

        let outcomes = self.investigate_all(&claims, response);
        let mut assessments = Vec::new();
        for (claim, outcome) in claims.into_iter().zip(outcomes) {
            match outcome {
                Ok(record) => assessments.push(record),
                Err(e) => {
                    tracing::warn!(claim = %claim.raw_text, error = %e, "claim could not be assessed");
                    unassessed.push(UnassessedClaim {
                        sentence_index: claim.sentence_index,
                        claim: Some(claim),
                        error: e.to_string(),
                    });
                }
            }
        }
        unassessed.sort_by_key(|u| u.sentence_index);

        let mut record = ResponseRecord {
            record_id: record_id(prompt, response),
            prompt: prompt.to_string(),
            response: response.to_string(),
            sentences,
            assessments,
            num_excluded: unassessed.len(),
            unassessed,
            scores: metrics::score_response(&[], self.cfg.k)?,
            source: Source::Factuality,
            iteration: 0,
        };
        record.scores = record.recompute_scores(self.cfg.k)?;
        Ok(record)
    }

    /// Runs claims on up to `max_parallel_claims` threads; results come back
    /// in claim order whatever the completion order.
    fn investigate_all(&self, claims: &[AtomicClaim], response: &str) -> Vec<Result<AssessmentRecord>> {
        let workers = self.cfg.max_parallel_claims.min(claims.len());
        if workers <= 1 {
            return claims.iter().map(|c| self.investigate_claim(c, response)).collect();
        }
        let next = AtomicUsize::new(0);
        let slots: Vec<Mutex<Option<Result<AssessmentRecord>>>> = claims.iter().map(|_| Mutex::new(None)).collect();
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    if i >= claims.len() {
                        break;
                    }
                    let outcome = self.investigate_claim(&claims[i], response);
                    *slots[i].lock().unwrap_or_else(|p| p.into_inner()) = Some(outcome);
                });
            }
        });
        slots
            .into_iter()
            .map(|slot| {
                slot.into_inner()
                    .unwrap_or_else(|p| p.into_inner())
                    .expect("every claim slot is filled")
            })
            .collect()
    }
}

/// One-shot evaluation with the bundled prompt templates.
pub fn evaluate_response(
    prompt: &str,
    response: &str,
    backend: &dyn GenerativeBackend,
    retriever: &dyn Retriever,
    cfg: &EvaluatorConfig,
) -> Result<ResponseRecord> {
    Evaluator::new(backend, retriever, cfg.clone())?.evaluate_response(prompt, response)
}

fn truncate(text: &str, max_chars: usize) -> String {
    let mut out: String = text.chars().take(max_chars).collect();
    if text.chars().count() > max_chars {
        out.push_str("...");
    }
    out
}
