//! Extractive question-answering formulation.
//!
//! The question is the pronoun's word window, the passage is the full text and
//! the gold answer is the coreferent candidate's wordpiece span. A dense head
//! maps every token state to a start and an end logit. For class
//! probabilities, span-wise max pooling reduces the logits to six features
//! (start/end maxima over A, over B and over the whole sequence) that feed a
//! multinomial logistic regression.

mod extract;
pub mod logreg;

use ndarray::Array2;
use rand::Rng;

use crate::data::{gold_label, GapRecord, Label};
use crate::encoder::TokenStates;
use crate::error::ModelError;
use crate::params::{bias, row, weight, ParamGroup, ParamInfo, Parameters};
use crate::tokenizer::{align_char_span, wordpiece_tokenize, EncodedInput, TokenSpan, Vocab};

pub use extract::{
    answer_question, build_question, encode_question, extract_best_span, question_for, span_to_answer,
    DEFAULT_MAX_ANSWER_LEN, DEFAULT_WINDOW,
};
pub use logreg::{fit_span_lr, qa_probabilities, LrModel, DEFAULT_C};

/// Start and end logit per token.
#[derive(Debug, Clone, PartialEq)]
pub struct SpanLogits {
    pub start: Vec<f64>,
    pub end: Vec<f64>,
}

impl SpanLogits {
    pub fn len(&self) -> usize {
        self.start.len()
    }

    pub fn is_empty(&self) -> bool {
        self.start.is_empty()
    }
}

/// Span-pooled logit features in the order
/// (start A, end A, start B, end B, start global, end global).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PooledFeatures(pub [f64; 6]);

/// Linear token head `H -> 2` (column 0 start, column 1 end).
#[derive(Debug, Clone, PartialEq)]
pub struct QaHead {
    pub weight: Array2<f64>,
    pub bias: Array2<f64>,
}

impl QaHead {
    pub fn zeros(hidden: usize) -> QaHead {
        QaHead { weight: Array2::zeros((hidden, 2)), bias: row(vec![0.0; 2]) }
    }

    pub fn init<R: Rng>(hidden: usize, rng: &mut R) -> QaHead {
        let a = (6.0 / (hidden + 2) as f64).sqrt();
        QaHead { weight: crate::encoder::uniform(rng, hidden, 2, a), bias: row(vec![0.0; 2]) }
    }
}

impl Parameters for QaHead {
    fn infos(&self) -> Vec<ParamInfo> {
        let mut v = Vec::new();
        weight(&mut v, "qa.weight", ParamGroup::Head);
        bias(&mut v, "qa.bias", ParamGroup::Head);
        v
    }

    fn tensors(&self) -> Vec<&Array2<f64>> {
        vec![&self.weight, &self.bias]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Array2<f64>> {
        vec![&mut self.weight, &mut self.bias]
    }
}

pub fn qa_forward(states: &TokenStates, head: &QaHead) -> SpanLogits {
    let out = states.0.dot(&head.weight) + &head.bias;
    SpanLogits { start: out.column(0).to_vec(), end: out.column(1).to_vec() }
}

/// Mean of the start and end cross-entropies at the gold span.
pub fn qa_loss(logits: &SpanLogits, answer: TokenSpan) -> f64 {
    let ce = |z: &[f64], gold: usize| crate::nn::log_sum_exp(z) - z[gold];
    0.5 * (ce(&logits.start, answer.start) + ce(&logits.end, answer.end))
}

/// Loss with its gradient with respect to the logits.
pub fn qa_loss_grad(logits: &SpanLogits, answer: TokenSpan) -> (f64, SpanLogits) {
    let grad = |z: &[f64], gold: usize| {
        let mut p = crate::nn::softmax(z);
        p[gold] -= 1.0;
        p.iter_mut().for_each(|v| *v *= 0.5);
        p
    };
    let g = SpanLogits { start: grad(&logits.start, answer.start), end: grad(&logits.end, answer.end) };
    (qa_loss(logits, answer), g)
}

/// Backward through [`qa_forward`]: accumulates head gradients and returns
/// the gradient with respect to the token states.
pub fn qa_head_backward(states: &TokenStates, head: &QaHead, d_logits: &SpanLogits, grads: &mut QaHead) -> Array2<f64> {
    let n = d_logits.len();
    let mut d_out = Array2::zeros((n, 2));
    for i in 0..n {
        d_out[[i, 0]] = d_logits.start[i];
        d_out[[i, 1]] = d_logits.end[i];
    }
    grads.weight += &states.0.t().dot(&d_out);
    grads.bias += &crate::nn::sum_rows(&d_out);
    d_out.dot(&head.weight.t())
}

/// The six pooled features for candidate spans `a` and `b`.
pub fn span_pool_features(logits: &SpanLogits, a: TokenSpan, b: TokenSpan) -> Result<PooledFeatures, ModelError> {
    let n = logits.len();
    for s in [a, b] {
        if s.is_empty() || s.end >= n {
            return Err(ModelError::EmptySpan { start: s.start, end: s.end, len: n });
        }
    }
    if n == 0 {
        return Err(ModelError::EmptySpan { start: 0, end: 0, len: 0 });
    }
    let max = |v: &[f64]| v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(PooledFeatures([
        max(&logits.start[a.start..=a.end]),
        max(&logits.end[a.start..=a.end]),
        max(&logits.start[b.start..=b.end]),
        max(&logits.end[b.start..=b.end]),
        max(&logits.start),
        max(&logits.end),
    ]))
}

/// Features when a candidate was truncated away: its span maxima fall back to
/// the sequence minima.
pub fn pooled_features_with_missing(
    logits: &SpanLogits,
    a: Option<TokenSpan>,
    b: Option<TokenSpan>,
) -> Result<PooledFeatures, ModelError> {
    let min = |v: &[f64]| v.iter().copied().fold(f64::INFINITY, f64::min);
    let anchor = TokenSpan::new(0, 0);
    let mut f = span_pool_features(logits, a.unwrap_or(anchor), b.unwrap_or(anchor))?;
    if a.is_none() {
        f.0[0] = min(&logits.start);
        f.0[1] = min(&logits.end);
    }
    if b.is_none() {
        f.0[2] = min(&logits.start);
        f.0[3] = min(&logits.end);
    }
    Ok(f)
}

/// A QA input with its gold answer and candidate spans (absolute token
/// positions). Candidate spans are `None` when truncated away.
#[derive(Debug, Clone, PartialEq)]
pub struct QaExample {
    pub record_id: String,
    pub encoded: EncodedInput,
    pub answer_span: Option<TokenSpan>,
    pub a_span: Option<TokenSpan>,
    pub b_span: Option<TokenSpan>,
    pub label: Label,
}

#[derive(Debug, Clone, PartialEq)]
#[allow(clippy::large_enum_variant)]
pub enum QaBuild {
    Example(QaExample),
    /// Gold label N: no extractive answer exists.
    Skip,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BuildMode {
    Training,
    Inference,
}

/// Absolute token span of `(offset, name)` in the passage region, or `None`
/// when the passage was truncated before it ends.
pub(crate) fn passage_span(
    encoded: &EncodedInput,
    passage_tokens: &crate::tokenizer::TokenizedText,
    offset: usize,
    name: &str,
) -> Result<Option<TokenSpan>, ModelError> {
    let local = align_char_span(passage_tokens, offset, name.chars().count())?;
    let span = local.shifted(encoded.passage_range.start);
    Ok((span.end < encoded.passage_range.end).then_some(span))
}

pub fn build_qa_example(
    record: &GapRecord,
    vocab: &Vocab,
    window: usize,
    max_seq_len: usize,
    mode: BuildMode,
) -> Result<QaBuild, ModelError> {
    let label = gold_label(record)?;
    if mode == BuildMode::Training && label == Label::N {
        return Ok(QaBuild::Skip);
    }
    let question = question_for(record, window)?;
    let q_tokens = wordpiece_tokenize(&question, vocab);
    let p_tokens = wordpiece_tokenize(&record.text, vocab);
    let encoded = crate::tokenizer::encode_pair(&q_tokens, &p_tokens, vocab, max_seq_len)?;
    let a_span = passage_span(&encoded, &p_tokens, record.a_offset, &record.a_name)?;
    let b_span = passage_span(&encoded, &p_tokens, record.b_offset, &record.b_name)?;
    let answer_span = match label {
        Label::A => a_span,
        Label::B => b_span,
        Label::N => None,
    };
    if mode == BuildMode::Training && answer_span.is_none() {
        return Err(ModelError::AnswerTruncated(record.id.clone()));
    }
    Ok(QaBuild::Example(QaExample { record_id: record.id.clone(), encoded, answer_span, a_span, b_span, label }))
}
