//! A tabular first-order language model and the sample, assess, label and
//! train loop run on it.
//!
//! Tokens are whitespace-separated words. The model scores the next token
//! from the previous one (or from a begin-of-sequence row), so every
//! gradient is the closed-form softmax log-likelihood gradient.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::align::{self, AlignError, CombinedParams, LabeledExample, LogProbPair};
use crate::dataset::{self, DatasetError, LabelConfig, PreferenceItem, ResponseRecord};
use crate::evaluator::Sentence;
use crate::jsonl::{self, JsonlError};
use crate::metrics::{self, ClaimVerdict, MetricsError};
use crate::types::{Granularity, Label};

pub const MAX_VOCAB: usize = 64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VocabError {
    #[error("unknown token {0:?}")]
    UnknownToken(String),
    #[error("token id {0} out of range")]
    OutOfRange(usize),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainError {
    #[error(transparent)]
    Vocab(#[from] VocabError),
    #[error(transparent)]
    Align(#[from] AlignError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
    #[error("invalid world: {0}")]
    InvalidWorld(String),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("no items to train on")]
    EmptyItems,
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// Next-token logits indexed by (previous token, next token). Row `V` is the
/// begin-of-sequence row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawToyLM")]
pub struct ToyLM {
    vocab: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
    logits: Vec<f64>,
    temperature: f64,
    /// Row-wise log-softmax of `logits / temperature`, kept in sync by `refresh`.
    #[serde(skip)]
    log_probs: Vec<f64>,
    #[serde(skip)]
    probs: Vec<f64>,
}

#[derive(Deserialize)]
struct RawToyLM {
    vocab: Vec<String>,
    logits: Vec<f64>,
    temperature: f64,
}

impl TryFrom<RawToyLM> for ToyLM {
    type Error = TrainError;

    fn try_from(raw: RawToyLM) -> Result<Self> {
        ToyLM::new(raw.vocab, raw.logits, raw.temperature)
    }
}

impl ToyLM {
    pub fn new(vocab: Vec<String>, logits: Vec<f64>, temperature: f64) -> Result<Self> {
        let v = vocab.len();
        if v == 0 || v > MAX_VOCAB {
            return Err(TrainError::InvalidWorld(format!("vocabulary size {v} outside 1..={MAX_VOCAB}")));
        }
        if logits.len() != (v + 1) * v {
            return Err(TrainError::InvalidWorld(format!(
                "expected {} logits for {v} tokens, got {}",
                (v + 1) * v,
                logits.len()
            )));
        }
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(TrainError::InvalidWorld(format!("temperature must be positive, got {temperature}")));
        }
        let index = build_index(&vocab)?;
        let mut model = Self {
            vocab,
            index,
            logits,
            temperature,
            log_probs: Vec::new(),
            probs: Vec::new(),
        };
        model.refresh();
        Ok(model)
    }

    fn refresh(&mut self) {
        let v = self.vocab_size();
        self.log_probs = (0..=v).flat_map(|row| self.log_softmax_row(row)).collect();
        self.probs = self.log_probs.iter().map(|x| x.exp()).collect();
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn set_temperature(&mut self, temperature: f64) -> Result<()> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(TrainError::InvalidWorld(format!("temperature must be positive, got {temperature}")));
        }
        self.temperature = temperature;
        self.refresh();
        Ok(())
    }

    pub fn uniform(vocab: Vec<String>, temperature: f64) -> Result<Self> {
        let n = (vocab.len() + 1) * vocab.len();
        Self::new(vocab, vec![0.0; n], temperature)
    }

    /// Logits drawn uniformly from `[-scale, scale]`, plus a per-token column bias.
    pub fn random(
        vocab: Vec<String>,
        temperature: f64,
        scale: f64,
        bias: &BTreeMap<String, f64>,
        seed: u64,
    ) -> Result<Self> {
        let mut model = Self::uniform(vocab, temperature)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for x in model.logits.iter_mut() {
            *x = if scale > 0.0 { rng.gen_range(-scale..=scale) } else { 0.0 };
        }
        for (token, b) in bias {
            let col = model.token_id(token)?;
            let v = model.vocab_size();
            for row in 0..=v {
                model.logits[row * v + col] += b;
            }
        }
        model.refresh();
        Ok(model)
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn bos_row(&self) -> usize {
        self.vocab.len()
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn token_id(&self, token: &str) -> std::result::Result<usize, VocabError> {
        self.index
            .get(token)
            .copied()
            .ok_or_else(|| VocabError::UnknownToken(token.to_string()))
    }

    pub fn token(&self, id: usize) -> std::result::Result<&str, VocabError> {
        self.vocab.get(id).map(String::as_str).ok_or(VocabError::OutOfRange(id))
    }

    pub fn encode(&self, text: &str) -> std::result::Result<Vec<usize>, VocabError> {
        text.split_whitespace().map(|t| self.token_id(t)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> std::result::Result<String, VocabError> {
        Ok(ids.iter().map(|&i| self.token(i)).collect::<std::result::Result<Vec<_>, _>>()?.join(" "))
    }

    fn row_of(&self, prev: Option<usize>) -> usize {
        prev.unwrap_or(self.bos_row())
    }

    /// Next-token probabilities after `prev` (`None` for the sequence start).
    pub fn next_token_distribution(&self, prev: Option<usize>) -> Vec<f64> {
        self.row_probs(self.row_of(prev)).to_vec()
    }

    fn row_probs(&self, row: usize) -> &[f64] {
        let v = self.vocab_size();
        &self.probs[row * v..(row + 1) * v]
    }

    fn log_softmax_row(&self, row: usize) -> Vec<f64> {
        let v = self.vocab_size();
        let scaled: Vec<f64> = self.logits[row * v..(row + 1) * v]
            .iter()
            .map(|x| x / self.temperature)
            .collect();
        let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let log_total = max + scaled.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        scaled.into_iter().map(|x| x - log_total).collect()
    }

    /// Sum of `log p(completion | context)`; only the last context token is seen.
    pub fn sequence_logprob_ids(&self, context: &[usize], completion: &[usize]) -> f64 {
        let mut prev = context.last().copied();
        let mut total = 0.0;
        for &next in completion {
            total += self.log_probs[self.row_of(prev) * self.vocab_size() + next];
            prev = Some(next);
        }
        total
    }

    /// Adds `weight * d logprob / d logits` for one completion into `grad`.
    fn accumulate_logprob_grad(&self, context: &[usize], completion: &[usize], weight: f64, grad: &mut [f64]) {
        let v = self.vocab_size();
        let mut prev = context.last().copied();
        for &next in completion {
            let row = self.row_of(prev);
            for (j, p) in self.row_probs(row).iter().enumerate() {
                let onehot = if j == next { 1.0 } else { 0.0 };
                grad[row * v + j] += weight * (onehot - p) / self.temperature;
            }
            prev = Some(next);
        }
    }

    /// Draws one token after `prev` by inverse-CDF sampling.
    pub fn sample_next(&self, prev: Option<usize>, rng: &mut impl Rng) -> usize {
        let probs = self.row_probs(self.row_of(prev));
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (j, p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return j;
            }
        }
        probs
            .iter()
            .enumerate()
            .rev()
            .find(|(_, p)| **p > 0.0)
            .map_or(probs.len() - 1, |(j, _)| j)
    }
}

fn build_index(vocab: &[String]) -> Result<HashMap<String, usize>> {
    let mut index = HashMap::new();
    for (i, t) in vocab.iter().enumerate() {
        if t.is_empty() || t.contains(char::is_whitespace) {
            return Err(TrainError::InvalidWorld(format!("token {t:?} must be a non-empty word")));
        }
        if index.insert(t.clone(), i).is_some() {
            return Err(TrainError::InvalidWorld(format!("duplicate token {t:?}")));
        }
    }
    Ok(index)
}

/// Samples up to `max_len` tokens after the prompt, stopping after `eos`.
pub fn sample_response(model: &ToyLM, prompt: &[usize], max_len: usize, eos: Option<usize>, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut prev = prompt.last().copied();
    let mut out = Vec::with_capacity(max_len);
    for _ in 0..max_len {
        let next = model.sample_next(prev, &mut rng);
        out.push(next);
        if Some(next) == eos {
            break;
        }
        prev = Some(next);
    }
    out
}

/// `sequence_logprob_ids` over whitespace-tokenized strings.
pub fn sequence_logprob(model: &ToyLM, context: &str, completion: &str) -> std::result::Result<f64, VocabError> {
    Ok(model.sequence_logprob_ids(&model.encode(context)?, &model.encode(completion)?))
}

/// A closed world: every token outside the fact set is a false claim.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticWorld {
    pub vocab: Vec<String>,
    pub fact_tokens: BTreeSet<String>,
    /// Each prompt is a vocabulary token the response is conditioned on.
    pub prompts: Vec<String>,
    pub k: usize,
    pub seed: u64,
    pub separator: String,
    pub eos: String,
    #[serde(default = "default_max_len")]
    pub max_len: usize,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default)]
    pub init_scale: f64,
    #[serde(default)]
    pub init_bias: BTreeMap<String, f64>,
    /// Responses sampled per iteration.
    #[serde(default = "default_samples")]
    pub samples_per_iteration: usize,
    /// Fixed-seed responses scored after each iteration.
    #[serde(default = "default_eval_samples")]
    pub eval_samples: usize,
}

fn default_max_len() -> usize {
    16
}
fn default_temperature() -> f64 {
    1.0
}
fn default_samples() -> usize {
    64
}
fn default_eval_samples() -> usize {
    256
}

impl SyntheticWorld {
    pub fn validate(&self) -> Result<()> {
        let vocab: BTreeSet<&String> = self.vocab.iter().collect();
        let bad = |m: String| Err(TrainError::InvalidWorld(m));
        if self.fact_tokens.is_empty() {
            return bad("fact_tokens is empty".into());
        }
        if let Some(t) = self.fact_tokens.iter().find(|t| !vocab.contains(t)) {
            return bad(format!("fact token {t:?} is not in the vocabulary"));
        }
        if self.fact_tokens.len() >= self.vocab.len() {
            return bad("fact_tokens must be a strict subset of the vocabulary".into());
        }
        for t in self.prompts.iter().chain([&self.separator, &self.eos]) {
            if !vocab.contains(t) {
                return bad(format!("token {t:?} is not in the vocabulary"));
            }
        }
        if self.prompts.is_empty() {
            return bad("prompts is empty".into());
        }
        if self.k == 0 || self.max_len == 0 || self.samples_per_iteration == 0 || self.eval_samples == 0 {
            return bad("k, max_len, samples_per_iteration and eval_samples must be positive".into());
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            TrainError::InvalidWorld(format!("{}: {e}", path.display()))
        })?;
        let world: Self = serde_json::from_str(&text).map_err(|e| {
            TrainError::InvalidWorld(format!("{} line {}, column {}: {e}", path.display(), e.line(), e.column()))
        })?;
        world.validate()?;
        Ok(world)
    }

    pub fn initial_model(&self) -> Result<ToyLM> {
        self.validate()?;
        ToyLM::random(self.vocab.clone(), self.temperature, self.init_scale, &self.init_bias, self.seed)
    }
}

/// Splits a response at separator tokens; the separator stays with its
/// sentence and `eos` is dropped.
pub fn token_sentences<'a>(tokens: &'a [String], world: &SyntheticWorld) -> Vec<Vec<&'a str>> {
    let mut sentences = Vec::new();
    let mut current: Vec<&str> = Vec::new();
    for t in tokens {
        if *t == world.eos {
            break;
        }
        current.push(t);
        if *t == world.separator {
            sentences.push(std::mem::take(&mut current));
        }
    }
    if !current.is_empty() {
        sentences.push(current);
    }
    sentences
}

/// One claim per non-separator token, supported iff it is a fact token.
pub fn oracle_assess(tokens: &[String], world: &SyntheticWorld) -> Vec<Vec<ClaimVerdict>> {
    token_sentences(tokens, world)
        .into_iter()
        .map(|sentence| {
            sentence
                .into_iter()
                .filter(|t| *t != world.separator)
                .map(|t| {
                    if world.fact_tokens.contains(t) {
                        ClaimVerdict::Supported
                    } else {
                        ClaimVerdict::NotSupported
                    }
                })
                .collect()
        })
        .collect()
}

/// Assessed record for a sampled response, with `eos` kept in the response text.
pub fn assess_sample(
    record_id: String,
    prompt: &str,
    tokens: &[String],
    world: &SyntheticWorld,
    iteration: usize,
) -> Result<ResponseRecord> {
    let sentences: Vec<Sentence> = token_sentences(tokens, world)
        .iter()
        .enumerate()
        .map(|(i, s)| Sentence::new(i, s.join(" ")))
        .collect();
    let verdicts = oracle_assess(tokens, world);
    let claim_tokens: Vec<Vec<&str>> = token_sentences(tokens, world)
        .into_iter()
        .map(|s| s.into_iter().filter(|t| *t != world.separator).collect())
        .collect();
    let mut record = ResponseRecord::from_sentence_verdicts(
        record_id,
        prompt,
        sentences,
        &verdicts,
        |s, j| claim_tokens[s][j].to_string(),
        world.k,
    )?;
    record.response = tokens.join(" ");
    record.iteration = iteration;
    Ok(record)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossMode {
    #[default]
    Combined,
    KtoOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Responses per batch; each brings its sentence items along.
    pub batch_size: usize,
    pub epochs_per_iteration: usize,
    pub iterations: usize,
    pub seed: u64,
    pub grad_clip: Option<f64>,
    pub loss: LossMode,
    pub params: CombinedParams,
    /// Labeling thresholds; `k` is taken from the world.
    pub label: LabelConfig,
    /// Re-snapshot the reference at the start of every iteration.
    pub refreeze_reference: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-2,
            batch_size: 16,
            epochs_per_iteration: 1,
            iterations: 3,
            seed: 0,
            grad_clip: None,
            loss: LossMode::Combined,
            params: CombinedParams::default(),
            label: LabelConfig::default(),
            refreeze_reference: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::InvalidConfig(format!(
                "learning_rate must be non-negative, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 || self.epochs_per_iteration == 0 {
            return Err(TrainError::InvalidConfig("batch_size and epochs_per_iteration must be positive".into()));
        }
        if let Some(c) = self.grad_clip {
            if c.is_nan() || c <= 0.0 {
                return Err(TrainError::InvalidConfig(format!("grad_clip must be positive, got {c}")));
            }
        }
        Ok(())
    }
}

/// Metrics recorded once before training and once per iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationMetrics {
    pub iteration: usize,
    pub mean_f1: f64,
    pub mean_precision: f64,
    pub mean_recall: f64,
    pub mean_claims: f64,
    /// Over every pooled item, under the updated policy.
    pub mean_chosen_log_ratio: Option<f64>,
    pub mean_rejected_log_ratio: Option<f64>,
    /// Mean batch loss over the iteration's epochs.
    pub loss: Option<f64>,
    pub batch_size: usize,
    pub num_batches: usize,
    pub num_items: usize,
    pub num_chosen: usize,
    pub num_rejected: usize,
    pub loss_mode: LossMode,
    pub rho: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub policy: ToyLM,
    pub reference: ToyLM,
    pub iteration: usize,
    pub history: Vec<IterationMetrics>,
    /// Mean batch loss of every epoch run so far.
    pub epoch_losses: Vec<f64>,
    /// Batches in the most recent epoch.
    pub last_num_batches: usize,
}

impl TrainState {
    pub fn new(policy: ToyLM) -> Self {
        Self {
            reference: policy.clone(),
            policy,
            iteration: 0,
            history: Vec::new(),
            epoch_losses: Vec::new(),
            last_num_batches: 0,
        }
    }
}

struct Encoded<'a> {
    item: &'a PreferenceItem,
    context: Vec<usize>,
    completion: Vec<usize>,
}

fn encode_items<'a>(model: &ToyLM, items: &'a [PreferenceItem]) -> Result<Vec<Encoded<'a>>> {
    items
        .iter()
        .map(|item| {
            Ok(Encoded {
                item,
                context: model.encode(&item.context)?,
                completion: model.encode(&item.completion)?,
            })
        })
        .collect()
}

/// Items grouped into per-response units in first-seen order; items
/// without a record id form units of their own.
fn response_units(items: &[Encoded<'_>]) -> Vec<Vec<usize>> {
    let mut units: Vec<Vec<usize>> = Vec::new();
    let mut by_id: HashMap<&str, usize> = HashMap::new();
    for (i, e) in items.iter().enumerate() {
        let id = e.item.record_id.as_str();
        if id.is_empty() {
            units.push(vec![i]);
            continue;
        }
        match by_id.get(id) {
            Some(&u) => units[u].push(i),
            None => {
                by_id.insert(id, units.len());
                units.push(vec![i]);
            }
        }
    }
    units
}

fn batch_step(
    state: &mut TrainState,
    encoded: &[Encoded<'_>],
    batch: &[usize],
    sentence_counts: &HashMap<&str, usize>,
    cfg: &TrainConfig,
) -> Result<f64> {
    let mut response_idx = Vec::new();
    let mut response_examples = Vec::new();
    let mut sentence_idx = Vec::new();
    let mut sentence_examples = Vec::new();
    for &i in batch {
        let e = &encoded[i];
        let pair = LogProbPair::new(
            state.policy.sequence_logprob_ids(&e.context, &e.completion),
            state.reference.sequence_logprob_ids(&e.context, &e.completion),
        );
        match e.item.granularity {
            Granularity::Response => {
                response_idx.push(i);
                response_examples.push(LabeledExample::response(pair, e.item.label, e.item.record_id.clone()));
            }
            Granularity::Sentence if cfg.loss == LossMode::Combined => {
                let count = sentence_counts.get(e.item.record_id.as_str()).copied().unwrap_or(1);
                sentence_idx.push(i);
                sentence_examples.push(LabeledExample::sentence(pair, e.item.label, e.item.record_id.clone(), count));
            }
            Granularity::Sentence => {}
        }
    }
    let (loss, response_grads, sentence_grads) = if response_examples.is_empty() {
        if sentence_examples.is_empty() {
            return Ok(0.0);
        }
        let z0 = align::estimate_z0(&sentence_examples)?;
        let (loss, grads) = align::sentence_loss_and_grads_at(&sentence_examples, &cfg.params.fkto, z0)?;
        let lambda = cfg.params.lambda_combine;
        (lambda * loss, Vec::new(), grads.into_iter().map(|g| g * lambda).collect())
    } else {
        let out = align::loss_and_grads(&response_examples, &sentence_examples, &cfg.params)?;
        (out.loss, out.response_grads, out.sentence_grads)
    };

    let mut grad = vec![0.0; state.policy.logits.len()];
    for (&i, g) in response_idx.iter().chain(&sentence_idx).zip(response_grads.iter().chain(&sentence_grads)) {
        state
            .policy
            .accumulate_logprob_grad(&encoded[i].context, &encoded[i].completion, *g, &mut grad);
    }
    if let Some(clip) = cfg.grad_clip {
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if norm > clip {
            grad.iter_mut().for_each(|g| *g *= clip / norm);
        }
    }
    for (w, g) in state.policy.logits.iter_mut().zip(&grad) {
        *w -= cfg.learning_rate * g;
    }
    state.policy.refresh();
    Ok(loss)
}

/// One pass of gradient descent over `items`, in seeded-shuffled batches of
/// `batch_size` responses.
pub fn train_epoch(mut state: TrainState, items: &[PreferenceItem], cfg: &TrainConfig) -> Result<TrainState> {
    cfg.validate()?;
    if items.is_empty() {
        return Err(TrainError::EmptyItems);
    }
    let encoded = encode_items(&state.policy, items)?;
    let mut sentence_counts: HashMap<&str, usize> = HashMap::new();
    for e in &encoded {
        if e.item.granularity == Granularity::Sentence {
            *sentence_counts.entry(e.item.record_id.as_str()).or_default() += 1;
        }
    }
    let mut units = response_units(&encoded);
    let epoch = state.epoch_losses.len() as u64;
    units.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed ^ epoch.wrapping_mul(0x9e37_79b9_7f4a_7c15)));

    let mut losses = Vec::new();
    for chunk in units.chunks(cfg.batch_size) {
        let batch: Vec<usize> = chunk.iter().flatten().copied().collect();
        losses.push(batch_step(&mut state, &encoded, &batch, &sentence_counts, cfg)?);
    }
    state.last_num_batches = losses.len();
    state.epoch_losses.push(losses.iter().sum::<f64>() / losses.len() as f64);
    Ok(state)
}

/// Mean of the batch losses `train_epoch` would report, without updating.
pub fn evaluate_loss(state: &TrainState, items: &[PreferenceItem], cfg: &TrainConfig) -> Result<f64> {
    let mut frozen = TrainConfig {
        learning_rate: 0.0,
        ..cfg.clone()
    };
    frozen.grad_clip = None;
    let probe = TrainState {
        epoch_losses: state.epoch_losses.clone(),
        ..state.clone()
    };
    let after = train_epoch(probe, items, &frozen)?;
    Ok(*after.epoch_losses.last().expect("one epoch ran"))
}

struct Sample {
    prompt: String,
    tokens: Vec<String>,
}

fn sample_batch(model: &ToyLM, world: &SyntheticWorld, n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Sample>> {
    let eos = model.token_id(&world.eos)?;
    (0..n)
        .map(|_| {
            let prompt = world.prompts.choose(rng).expect("prompts validated non-empty").clone();
            let context = [model.token_id(&prompt)?];
            let ids = sample_response(model, &context, world.max_len, Some(eos), rng.next_u64());
            let tokens = ids.iter().map(|&i| model.vocab[i].clone()).collect();
            Ok(Sample { prompt, tokens })
        })
        .collect()
}

/// Scores on the world's fixed evaluation samples.
pub struct SampleScores {
    pub mean_f1: f64,
    pub mean_precision: f64,
    pub mean_recall: f64,
    pub mean_claims: f64,
}

pub fn evaluate_policy(model: &ToyLM, world: &SyntheticWorld) -> Result<SampleScores> {
    let mut rng = ChaCha8Rng::seed_from_u64(world.seed);
    let samples = sample_batch(model, world, world.eval_samples, &mut rng)?;
    let (mut f1, mut precision, mut recall, mut claims) = (0.0, 0.0, 0.0, 0.0);
    for s in &samples {
        let scores = metrics::score_response(&oracle_assess(&s.tokens, world), world.k)?;
        f1 += scores.f1_at_k;
        precision += scores.precision_or_zero();
        recall += scores.recall_at_k;
        claims += scores.num_claims as f64;
    }
    let n = samples.len() as f64;
    Ok(SampleScores {
        mean_f1: f1 / n,
        mean_precision: precision / n,
        mean_recall: recall / n,
        mean_claims: claims / n,
    })
}

fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

fn log_ratio_means(state: &TrainState, items: &[PreferenceItem]) -> Result<(Option<f64>, Option<f64>)> {
    let (mut chosen, mut rejected) = (Vec::new(), Vec::new());
    for e in encode_items(&state.policy, items)? {
        let ratio = state.policy.sequence_logprob_ids(&e.context, &e.completion)
            - state.reference.sequence_logprob_ids(&e.context, &e.completion);
        match e.item.label {
            Label::Chosen => chosen.push(ratio),
            Label::Rejected => rejected.push(ratio),
        }
    }
    Ok((mean(&chosen), mean(&rejected)))
}

fn metrics_entry(
    state: &TrainState,
    world: &SyntheticWorld,
    pool: &[PreferenceItem],
    cfg: &TrainConfig,
    loss: Option<f64>,
) -> Result<IterationMetrics> {
    let scores = evaluate_policy(&state.policy, world)?;
    let (chosen, rejected) = log_ratio_means(state, pool)?;
    Ok(IterationMetrics {
        iteration: state.iteration,
        mean_f1: scores.mean_f1,
        mean_precision: scores.mean_precision,
        mean_recall: scores.mean_recall,
        mean_claims: scores.mean_claims,
        mean_chosen_log_ratio: chosen,
        mean_rejected_log_ratio: rejected,
        loss,
        batch_size: cfg.batch_size,
        num_batches: if loss.is_some() { state.last_num_batches } else { 0 },
        num_items: pool.len(),
        num_chosen: pool.iter().filter(|i| i.label.is_chosen()).count(),
        num_rejected: pool.iter().filter(|i| !i.label.is_chosen()).count(),
        loss_mode: cfg.loss,
        rho: cfg.label.rho,
    })
}

/// Output of `iterative_optimize`: the final state plus every pooled item
/// and assessed record.
pub struct TrainRun {
    pub state: TrainState,
    pub pool: Vec<PreferenceItem>,
    pub records: Vec<ResponseRecord>,
}

/// Each iteration samples fresh responses from the current policy,
/// assesses them against the world, labels them, adds them to the pool and
/// trains on the whole pool. History entry 0 holds the untrained metrics.
pub fn iterative_optimize(world: &SyntheticWorld, cfg: &TrainConfig) -> Result<TrainRun> {
    iterative_optimize_from(world.initial_model()?, world, cfg)
}

pub fn iterative_optimize_from(initial: ToyLM, world: &SyntheticWorld, cfg: &TrainConfig) -> Result<TrainRun> {
    world.validate()?;
    cfg.validate()?;
    let label_cfg = LabelConfig {
        k: world.k,
        seed: cfg.label.seed,
        ..cfg.label
    };
    label_cfg.validate()?;
    let mut state = TrainState::new(initial);
    let mut pool: Vec<PreferenceItem> = Vec::new();
    let mut records: Vec<ResponseRecord> = Vec::new();
    state.history.push(metrics_entry(&state, world, &pool, cfg, None)?);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for iteration in 1..=cfg.iterations {
        state.iteration = iteration;
        if cfg.refreeze_reference {
            state.reference = state.policy.clone();
        }
        let samples = sample_batch(&state.policy, world, world.samples_per_iteration, &mut rng)?;
        let fresh: Vec<ResponseRecord> = samples
            .iter()
            .enumerate()
            .map(|(n, s)| assess_sample(format!("it{iteration}-{n}"), &s.prompt, &s.tokens, world, iteration))
            .collect::<Result<_>>()?;
        let iteration_label_cfg = LabelConfig {
            seed: label_cfg.seed.wrapping_add(iteration as u64),
            ..label_cfg
        };
        pool.extend(dataset::label_records(&fresh, &iteration_label_cfg)?);
        records.extend(fresh);

        let first_epoch = state.epoch_losses.len();
        for _ in 0..cfg.epochs_per_iteration {
            state = train_epoch(state, &pool, cfg)?;
        }
        let loss = mean(&state.epoch_losses[first_epoch..]);
        state.history.push(metrics_entry(&state, world, &pool, cfg, loss)?);
    }
    Ok(TrainRun { state, pool, records })
}

pub fn write_history(path: &Path, history: &[IterationMetrics]) -> Result<()> {
    Ok(jsonl::write_jsonl(path, history)?)
}

pub fn read_history(path: &Path) -> Result<Vec<IterationMetrics>> {
    Ok(jsonl::read_jsonl(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn words(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    fn world() -> SyntheticWorld {
        SyntheticWorld {
            vocab: words("t0 t1 a b c x y . </s>"),
            fact_tokens: ["a", "b", "c"].iter().map(|s| s.to_string()).collect(),
            prompts: words("t0 t1"),
            k: 4,
            seed: 3,
            separator: ".".into(),
            eos: "</s>".into(),
            max_len: 10,
            temperature: 1.0,
            init_scale: 0.5,
            init_bias: BTreeMap::new(),
            samples_per_iteration: 16,
            eval_samples: 32,
        }
    }

    #[test]
    fn distributions_normalize() {
        let m = world().initial_model().unwrap();
        for prev in (0..m.vocab_size()).map(Some).chain([None]) {
            let total: f64 = m.next_token_distribution(prev).iter().sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn sequence_logprob_examples() {
        let m = ToyLM::uniform(words("a b c d"), 1.0).unwrap();
        assert_eq!(sequence_logprob(&m, "a", "").unwrap(), 0.0);
        assert!((sequence_logprob(&m, "", "b").unwrap() - 0.25f64.ln()).abs() < 1e-15);
        assert_eq!(
            sequence_logprob(&m, "a", "zzz"),
            Err(VocabError::UnknownToken("zzz".into()))
        );

        let r = world().initial_model().unwrap();
        let ab = sequence_logprob(&r, "t0", "a b").unwrap();
        let a = sequence_logprob(&r, "t0", "a").unwrap();
        let b_after_a = sequence_logprob(&r, "t0 a", "b").unwrap();
        assert!((ab - (a + b_after_a)).abs() < 1e-12);
    }

    #[test]
    fn sampling_is_seeded_and_argmax_at_low_temperature() {
        let m = world().initial_model().unwrap();
        assert_eq!(sample_response(&m, &[0], 8, None, 5), sample_response(&m, &[0], 8, None, 5));

        let mut cold = m.clone();
        cold.set_temperature(1e-9).unwrap();
        let greedy: Vec<usize> = {
            let mut prev = Some(0);
            (0..6)
                .map(|_| {
                    let row = cold.row_of(prev);
                    let v = cold.vocab_size();
                    let logits = &cold.logits[row * v..(row + 1) * v];
                    let best = (0..v).max_by(|&i, &j| logits[i].total_cmp(&logits[j])).unwrap();
                    prev = Some(best);
                    best
                })
                .collect()
        };
        assert_eq!(sample_response(&cold, &[0], 6, None, 1), greedy);
        assert_eq!(sample_response(&cold, &[0], 6, None, 2), greedy);
    }

    /// Upper 99.9% chi-square quantile by the Wilson-Hilferty approximation.
    fn chi_square_critical(df: f64) -> f64 {
        let z = 3.090_232;
        let h = 2.0 / (9.0 * df);
        df * (1.0 - h + z * h.sqrt()).powi(3)
    }

    #[test]
    fn sampled_frequencies_match_softmax() {
        let m = world().initial_model().unwrap();
        let probs = m.next_token_distribution(Some(2));
        let n = 10_000usize;
        let mut counts = vec![0usize; m.vocab_size()];
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..n {
            counts[m.sample_next(Some(2), &mut rng)] += 1;
        }
        let mut chi2 = 0.0;
        for (c, p) in counts.iter().zip(&probs) {
            let expected = n as f64 * p;
            let sigma = (n as f64 * p * (1.0 - p)).sqrt();
            assert!((*c as f64 - expected).abs() <= 3.0 * sigma, "count {c} vs expected {expected}");
            chi2 += (*c as f64 - expected).powi(2) / expected;
        }
        assert!(chi2 < chi_square_critical((probs.len() - 1) as f64));
    }

    #[test]
    fn oracle_examples() {
        let w = world();
        let all_facts = oracle_assess(&words("a b . c </s>"), &w);
        assert_eq!(all_facts.len(), 2);
        assert_eq!(metrics::score_response(&all_facts, 4).unwrap().precision, Some(1.0));
        assert_eq!(metrics::score_response(&oracle_assess(&[], &w), 4).unwrap().f1_at_k, 0.0);
        let half = oracle_assess(&words("a x . b y ."), &w);
        let f1 = metrics::score_response(&half, 4).unwrap().f1_at_k;
        assert!((f1 - 2.0 * 0.5 * 1.0 / 1.5).abs() < 1e-12);
    }

    #[test]
    fn sample_record_keeps_eos_out_of_sentences() {
        let w = world();
        let r = assess_sample("r".into(), "t0", &words("a . x </s>"), &w, 1).unwrap();
        assert_eq!(r.response, "a . x </s>");
        assert_eq!(r.sentences.iter().map(|s| s.text.as_str()).collect::<Vec<_>>(), vec!["a .", "x"]);
        assert_eq!((r.scores.num_claims, r.scores.num_supported), (2, 1));
    }

    fn chosen_item() -> PreferenceItem {
        let mut item = PreferenceItem::new("t0", "a b . </s>", Label::Chosen, Granularity::Response);
        item.record_id = "r".into();
        item
    }

    #[test]
    fn zero_learning_rate_leaves_parameters() {
        let state = TrainState::new(world().initial_model().unwrap());
        let cfg = TrainConfig {
            learning_rate: 0.0,
            ..TrainConfig::default()
        };
        let after = train_epoch(state.clone(), &[chosen_item()], &cfg).unwrap();
        assert_eq!(after.policy, state.policy);
        assert_eq!(after.reference, state.reference);
        assert_eq!(after.epoch_losses.len(), 1);
    }

    #[test]
    fn chosen_step_raises_its_logprob() {
        let state = TrainState::new(world().initial_model().unwrap());
        let item = chosen_item();
        let before = sequence_logprob(&state.policy, &item.context, &item.completion).unwrap();
        let after = train_epoch(state.clone(), std::slice::from_ref(&item), &TrainConfig::default()).unwrap();
        assert!(sequence_logprob(&after.policy, &item.context, &item.completion).unwrap() > before);
        assert_eq!(after.reference, state.reference);
    }

    fn fixed_batch(w: &SyntheticWorld) -> Vec<PreferenceItem> {
        let model = w.initial_model().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let records: Vec<ResponseRecord> = sample_batch(&model, w, 16, &mut rng)
            .unwrap()
            .iter()
            .enumerate()
            .map(|(n, s)| assess_sample(format!("r{n}"), &s.prompt, &s.tokens, w, 1).unwrap())
            .collect();
        let cfg = LabelConfig { k: w.k, ..LabelConfig::default() };
        dataset::label_records(&records, &cfg).unwrap()
    }

    #[test]
    fn small_step_descends_on_a_fixed_batch() {
        let w = world();
        let items = fixed_batch(&w);
        // Move the policy off the reference so the loss has slope.
        let mut state = TrainState::new(w.initial_model().unwrap());
        let warm = TrainConfig {
            learning_rate: 0.5,
            ..TrainConfig::default()
        };
        state = train_epoch(state, &items, &warm).unwrap();
        let cfg = TrainConfig {
            learning_rate: 1e-3,
            batch_size: 64,
            ..TrainConfig::default()
        };
        let before = evaluate_loss(&state, &items, &cfg).unwrap();
        let after = train_epoch(state, &items, &cfg).unwrap();
        assert!(evaluate_loss(&after, &items, &cfg).unwrap() <= before);
    }

    #[test]
    fn zero_iterations_returns_initial_state() {
        let w = world();
        let run = iterative_optimize(&w, &TrainConfig { iterations: 0, ..TrainConfig::default() }).unwrap();
        assert_eq!(run.state.history.len(), 1);
        assert_eq!(run.state.policy, w.initial_model().unwrap());
        assert!(run.pool.is_empty());
    }

    #[test]
    fn training_is_deterministic_and_reference_stays_frozen() {
        let w = world();
        let cfg = TrainConfig {
            learning_rate: 0.3,
            seed: 4,
            ..TrainConfig::default()
        };
        let a = iterative_optimize(&w, &cfg).unwrap();
        let b = iterative_optimize(&w, &cfg).unwrap();
        assert_eq!(a.state.history, b.state.history);
        assert_eq!(a.state.history.len(), 4);
        assert_eq!(a.state.reference, w.initial_model().unwrap());
        assert_ne!(a.state.policy, a.state.reference);

        let refrozen = iterative_optimize(&w, &TrainConfig { refreeze_reference: true, ..cfg }).unwrap();
        assert_ne!(refrozen.state.reference, w.initial_model().unwrap());
    }

    #[test]
    fn world_validation() {
        let mut w = world();
        w.fact_tokens = w.vocab.iter().cloned().collect();
        assert!(w.validate().is_err());
        let mut w = world();
        w.fact_tokens.insert("zzz".into());
        assert!(w.validate().is_err());
        let mut w = world();
        w.fact_tokens.clear();
        assert!(w.validate().is_err());
    }

    #[test]
    fn history_round_trips() {
        let w = world();
        let run = iterative_optimize(&w, &TrainConfig { iterations: 1, ..TrainConfig::default() }).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("history.jsonl");
        write_history(&path, &run.state.history).unwrap();
        assert_eq!(read_history(&path).unwrap(), run.state.history);
    }
}
