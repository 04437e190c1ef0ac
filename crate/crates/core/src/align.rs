//! KTO and sentence-level fKTO loss kernels.
//!
//! Both losses are functions of per-example log-probabilities under the
//! policy and a frozen reference model, so they work with any model that can
//! score a completion. Gradients are taken with respect to each example's
//! policy log-probability; the KL reference point `z0` is a batch statistic
//! treated as a constant.
//!
//! Reduction order is always index order, which keeps results
//! bit-reproducible.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{Granularity, Label};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AlignError {
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("inconsistent sentence group for response {response_id}: {reason}")]
    InconsistentGroup { response_id: String, reason: String },
    #[error("example {index} has granularity {found:?}, expected {expected:?}")]
    GranularityMismatch {
        index: usize,
        expected: Granularity,
        found: Granularity,
    },
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
}

pub type Result<T> = std::result::Result<T, AlignError>;

/// Summed log-probability of a completion under the policy and the reference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogProbPair {
    pub policy_logprob: f64,
    pub ref_logprob: f64,
}

impl LogProbPair {
    pub fn new(policy_logprob: f64, ref_logprob: f64) -> Self {
        Self {
            policy_logprob,
            ref_logprob,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub pair: LogProbPair,
    pub label: Label,
    pub granularity: Granularity,
    pub response_id: String,
    /// Number of labeled sentences in the owning response (sentence items only).
    pub sentence_count: usize,
}

impl LabeledExample {
    pub fn response(pair: LogProbPair, label: Label, response_id: impl Into<String>) -> Self {
        Self {
            pair,
            label,
            granularity: Granularity::Response,
            response_id: response_id.into(),
            sentence_count: 0,
        }
    }

    pub fn sentence(pair: LogProbPair, label: Label, response_id: impl Into<String>, sentence_count: usize) -> Self {
        Self {
            pair,
            label,
            granularity: Granularity::Sentence,
            response_id: response_id.into(),
            sentence_count,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KtoParams {
    pub beta: f64,
    /// Weight on the value of chosen examples.
    pub lambda_c: f64,
    /// Weight on the value of rejected examples.
    pub lambda_r: f64,
    /// Constant offset for chosen examples.
    pub lambda_y_chosen: f64,
    /// Constant offset for rejected examples.
    pub lambda_y_rejected: f64,
}

impl Default for KtoParams {
    fn default() -> Self {
        Self {
            beta: 0.1,
            lambda_c: 1.0,
            lambda_r: 1.0,
            lambda_y_chosen: 1.0,
            lambda_y_rejected: 1.0,
        }
    }
}

impl KtoParams {
    /// Sentence-level defaults (`beta = 0.5`).
    pub fn sentence_default() -> Self {
        Self {
            beta: 0.5,
            ..Self::default()
        }
    }

    pub fn with_beta(self, beta: f64) -> Self {
        Self { beta, ..self }
    }

    fn lambda_y(&self, label: Label) -> f64 {
        match label {
            Label::Chosen => self.lambda_y_chosen,
            Label::Rejected => self.lambda_y_rejected,
        }
    }

    fn validate(&self) -> Result<()> {
        let positive = [
            ("beta", self.beta),
            ("lambda_c", self.lambda_c),
            ("lambda_r", self.lambda_r),
        ];
        for (name, value) in positive {
            if !(value.is_finite() && value > 0.0) {
                return Err(AlignError::InvalidParams(format!("{name} must be positive, got {value}")));
            }
        }
        if !(self.lambda_y_chosen.is_finite() && self.lambda_y_rejected.is_finite()) {
            return Err(AlignError::InvalidParams("lambda_y weights must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CombinedParams {
    pub kto: KtoParams,
    pub fkto: KtoParams,
    /// Weight of the sentence-level term.
    pub lambda_combine: f64,
}

impl Default for CombinedParams {
    fn default() -> Self {
        Self {
            kto: KtoParams::default(),
            fkto: KtoParams::sentence_default(),
            lambda_combine: 2.0,
        }
    }
}

impl CombinedParams {
    fn validate(&self) -> Result<()> {
        self.kto.validate()?;
        self.fkto.validate()?;
        if !(self.lambda_combine.is_finite() && self.lambda_combine >= 0.0) {
            return Err(AlignError::InvalidParams(format!(
                "lambda_combine must be non-negative, got {}",
                self.lambda_combine
            )));
        }
        Ok(())
    }
}

/// KL reference points, one per granularity.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ReferencePoints {
    pub response: f64,
    pub sentence: f64,
}

/// Logistic function in the two-branch form that never overflows.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `sigmoid(x) * (1 - sigmoid(x))` without cancellation.
fn sigmoid_slope(x: f64) -> f64 {
    sigmoid(x) * sigmoid(-x)
}

fn check_finite(value: f64, what: &str) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(AlignError::Numeric(format!("{what} is not finite ({value})")))
    }
}

pub fn log_ratio(pair: &LogProbPair) -> Result<f64> {
    check_finite(pair.policy_logprob, "policy log-probability")?;
    check_finite(pair.ref_logprob, "reference log-probability")?;
    check_finite(pair.policy_logprob - pair.ref_logprob, "log ratio")
}

/// Batch estimate of the KL reference point: the mean log ratio, clamped at 0.
pub fn estimate_z0(batch: &[LabeledExample]) -> Result<f64> {
    if batch.is_empty() {
        return Err(AlignError::EmptyBatch);
    }
    let mut sum = 0.0;
    for example in batch {
        sum += log_ratio(&example.pair)?;
    }
    Ok((sum / batch.len() as f64).max(0.0))
}

/// Reference points for a response batch and a (possibly empty) sentence batch.
pub fn reference_points(response_batch: &[LabeledExample], sentence_items: &[LabeledExample]) -> Result<ReferencePoints> {
    Ok(ReferencePoints {
        response: estimate_z0(response_batch)?,
        sentence: if sentence_items.is_empty() {
            0.0
        } else {
            estimate_z0(sentence_items)?
        },
    })
}

pub fn kto_value(pair: &LogProbPair, label: Label, z0: f64, params: &KtoParams) -> Result<f64> {
    let r = log_ratio(pair)?;
    check_finite(z0, "z0")?;
    let v = match label {
        Label::Chosen => params.lambda_c * sigmoid(params.beta * (r - z0)),
        Label::Rejected => params.lambda_r * sigmoid(params.beta * (z0 - r)),
    };
    check_finite(v, "value")
}

/// One example's loss term `lambda_y - v` and its derivative with respect to
/// the policy log-probability.
fn term_and_slope(pair: &LogProbPair, label: Label, z0: f64, params: &KtoParams) -> Result<(f64, f64)> {
    let r = log_ratio(pair)?;
    check_finite(z0, "z0")?;
    let (v, slope) = match label {
        Label::Chosen => {
            let u = params.beta * (r - z0);
            (
                params.lambda_c * sigmoid(u),
                -params.lambda_c * params.beta * sigmoid_slope(u),
            )
        }
        Label::Rejected => {
            let u = params.beta * (z0 - r);
            (
                params.lambda_r * sigmoid(u),
                params.lambda_r * params.beta * sigmoid_slope(u),
            )
        }
    };
    Ok((check_finite(params.lambda_y(label) - v, "loss term")?, slope))
}

fn check_granularity(batch: &[LabeledExample], expected: Granularity) -> Result<()> {
    match batch.iter().position(|e| e.granularity != expected) {
        Some(index) => Err(AlignError::GranularityMismatch {
            index,
            expected,
            found: batch[index].granularity,
        }),
        None => Ok(()),
    }
}

/// Response-level loss and per-example gradients at a fixed reference point.
pub fn response_loss_and_grads_at(batch: &[LabeledExample], params: &KtoParams, z0: f64) -> Result<(f64, Vec<f64>)> {
    params.validate()?;
    if batch.is_empty() {
        return Err(AlignError::EmptyBatch);
    }
    check_granularity(batch, Granularity::Response)?;
    let scale = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(batch.len());
    for example in batch {
        let (term, slope) = term_and_slope(&example.pair, example.label, z0, params)?;
        loss += term;
        grads.push(slope * scale);
    }
    Ok((loss * scale, grads))
}

/// Groups sentence items by response in first-seen order, returning the
/// member indices and the divisor `|S|` of each group.
fn sentence_groups(items: &[LabeledExample]) -> Result<Vec<(Vec<usize>, usize)>> {
    let mut groups: Vec<(&str, Vec<usize>, usize)> = Vec::new();
    for (index, item) in items.iter().enumerate() {
        match groups.iter_mut().find(|(id, _, _)| *id == item.response_id) {
            Some((id, members, count)) => {
                if *count != item.sentence_count {
                    return Err(AlignError::InconsistentGroup {
                        response_id: id.to_string(),
                        reason: format!("sentence_count {} disagrees with {}", item.sentence_count, count),
                    });
                }
                members.push(index);
            }
            None => groups.push((&item.response_id, vec![index], item.sentence_count)),
        }
    }
    groups
        .into_iter()
        .map(|(id, members, count)| {
            if count == 0 || members.len() > count {
                Err(AlignError::InconsistentGroup {
                    response_id: id.to_string(),
                    reason: format!("{} items but sentence_count {}", members.len(), count),
                })
            } else {
                Ok((members, count))
            }
        })
        .collect()
}

/// Sentence-level loss and per-item gradients at a fixed reference point.
pub fn sentence_loss_and_grads_at(items: &[LabeledExample], params: &KtoParams, z0: f64) -> Result<(f64, Vec<f64>)> {
    params.validate()?;
    if items.is_empty() {
        return Err(AlignError::EmptyBatch);
    }
    check_granularity(items, Granularity::Sentence)?;
    let groups = sentence_groups(items)?;
    let per_response = 1.0 / groups.len() as f64;
    let mut loss = 0.0;
    let mut grads = vec![0.0; items.len()];
    for (members, count) in &groups {
        let scale = per_response / *count as f64;
        let mut group_sum = 0.0;
        for &i in members {
            let (term, slope) = term_and_slope(&items[i].pair, items[i].label, z0, params)?;
            group_sum += term;
            grads[i] = slope * scale;
        }
        loss += group_sum / *count as f64;
    }
    Ok((loss * per_response, grads))
}

pub fn kto_loss_at(batch: &[LabeledExample], params: &KtoParams, z0: f64) -> Result<f64> {
    response_loss_and_grads_at(batch, params, z0).map(|(loss, _)| loss)
}

/// Mean of `lambda_y - v` over a response batch, with `z0` estimated from it.
pub fn kto_loss(batch: &[LabeledExample], params: &KtoParams) -> Result<f64> {
    kto_loss_at(batch, params, estimate_z0(batch)?)
}

pub fn fkto_loss_at(items: &[LabeledExample], params: &KtoParams, z0: f64) -> Result<f64> {
    sentence_loss_and_grads_at(items, params, z0).map(|(loss, _)| loss)
}

/// Sentence-level loss: each response contributes the mean term over its
/// labeled sentences, and responses are averaged.
pub fn fkto_loss(items: &[LabeledExample], params: &KtoParams) -> Result<f64> {
    fkto_loss_at(items, params, estimate_z0(items)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossAndGrads {
    pub loss: f64,
    /// d loss / d policy_logprob for each response example.
    pub response_grads: Vec<f64>,
    /// d loss / d policy_logprob for each sentence item.
    pub sentence_grads: Vec<f64>,
    pub reference: ReferencePoints,
}

/// Combined loss and gradients with the reference points held fixed.
pub fn loss_and_grads_at(
    response_batch: &[LabeledExample],
    sentence_items: &[LabeledExample],
    params: &CombinedParams,
    reference: &ReferencePoints,
) -> Result<LossAndGrads> {
    params.validate()?;
    let (mut loss, response_grads) = response_loss_and_grads_at(response_batch, &params.kto, reference.response)?;
    let mut sentence_grads = Vec::new();
    if !sentence_items.is_empty() {
        let (sentence_loss, grads) = sentence_loss_and_grads_at(sentence_items, &params.fkto, reference.sentence)?;
        loss += params.lambda_combine * sentence_loss;
        sentence_grads = grads.into_iter().map(|g| g * params.lambda_combine).collect();
    }
    Ok(LossAndGrads {
        loss,
        response_grads,
        sentence_grads,
        reference: *reference,
    })
}

pub fn combined_loss_at(
    response_batch: &[LabeledExample],
    sentence_items: &[LabeledExample],
    params: &CombinedParams,
    reference: &ReferencePoints,
) -> Result<f64> {
    loss_and_grads_at(response_batch, sentence_items, params, reference).map(|out| out.loss)
}

/// `kto_loss + lambda_combine * fkto_loss`; the sentence term is 0 when
/// there are no sentence items.
pub fn combined_loss(response_batch: &[LabeledExample], sentence_items: &[LabeledExample], params: &CombinedParams) -> Result<f64> {
    let reference = reference_points(response_batch, sentence_items)?;
    combined_loss_at(response_batch, sentence_items, params, &reference)
}

pub fn loss_and_grads(
    response_batch: &[LabeledExample],
    sentence_items: &[LabeledExample],
    params: &CombinedParams,
) -> Result<LossAndGrads> {
    let reference = reference_points(response_batch, sentence_items)?;
    loss_and_grads_at(response_batch, sentence_items, params, &reference)
}
