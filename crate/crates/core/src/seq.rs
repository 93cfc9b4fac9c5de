//! Sequence-classification formulation.
//!
//! The passage alone is encoded. Span embeddings of A, B and the pronoun
//! (start state, end state and their elementwise product) are concatenated
//! into a `9H` feature, passed through dropout, one ReLU layer and a 3-way
//! softmax.

use ndarray::{concatenate, s, Array1, Array2, ArrayView1, Axis};
use rand::{Rng, RngCore};

use crate::data::{gold_label, GapRecord, Label};
use crate::encoder::TokenStates;
use crate::error::ModelError;
use crate::metrics::ProbTriple;
use crate::params::{bias, row, weight, ParamGroup, ParamInfo, Parameters};
use crate::qa::passage_span;
use crate::tokenizer::{encode_single, wordpiece_tokenize, EncodedInput, TokenSpan, Vocab};

pub const SEQ_HIDDEN_UNITS: usize = 512;
pub const SEQ_DROPOUT: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeqSpans {
    pub a: TokenSpan,
    pub b: TokenSpan,
    pub p: TokenSpan,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeqExample {
    pub record_id: String,
    pub encoded: EncodedInput,
    pub spans: SeqSpans,
    pub gold: Label,
}

/// Encode the passage and align the three mentions. A mention cut off by
/// truncation is represented by the last passage token.
pub fn build_seq_example(record: &GapRecord, vocab: &Vocab, max_seq_len: usize) -> Result<SeqExample, ModelError> {
    let gold = gold_label(record)?;
    let tokens = wordpiece_tokenize(&record.text, vocab);
    let encoded = encode_single(&tokens, vocab, max_seq_len);
    if encoded.passage_range.is_empty() {
        return Err(ModelError::EmptySpan { start: 0, end: 0, len: encoded.len() });
    }
    let last = encoded.passage_range.end - 1;
    let fallback = TokenSpan::new(last, last);
    let span = |offset: usize, text: &str| -> Result<TokenSpan, ModelError> {
        Ok(passage_span(&encoded, &tokens, offset, text)?.unwrap_or(fallback))
    };
    let spans = SeqSpans {
        a: span(record.a_offset, &record.a_name)?,
        b: span(record.b_offset, &record.b_name)?,
        p: span(record.pronoun_offset, &record.pronoun)?,
    };
    Ok(SeqExample { record_id: record.id.clone(), encoded, spans, gold })
}

/// `concat(states[start], states[end], states[start] ⊙ states[end])`.
pub fn span_embedding(states: &TokenStates, span: TokenSpan) -> Result<Array1<f64>, ModelError> {
    let n = states.len();
    if span.is_empty() || span.end >= n {
        return Err(ModelError::EmptySpan { start: span.start, end: span.end, len: n });
    }
    let a = states.0.row(span.start);
    let b = states.0.row(span.end);
    let prod = &a * &b;
    Ok(concatenate(Axis(0), &[a, b, prod.view()]).expect("equal widths"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeqHead {
    pub w1: Array2<f64>,
    pub b1: Array2<f64>,
    pub w2: Array2<f64>,
    pub b2: Array2<f64>,
}

impl SeqHead {
    pub fn zeros(hidden: usize, units: usize) -> SeqHead {
        SeqHead {
            w1: Array2::zeros((9 * hidden, units)),
            b1: row(vec![0.0; units]),
            w2: Array2::zeros((units, 3)),
            b2: row(vec![0.0; 3]),
        }
    }

    pub fn init<R: Rng>(hidden: usize, units: usize, rng: &mut R) -> SeqHead {
        let a1 = (6.0 / (9 * hidden + units) as f64).sqrt();
        let a2 = (6.0 / (units + 3) as f64).sqrt();
        SeqHead {
            w1: crate::encoder::uniform(rng, 9 * hidden, units, a1),
            b1: row(vec![0.0; units]),
            w2: crate::encoder::uniform(rng, units, 3, a2),
            b2: row(vec![0.0; 3]),
        }
    }
}

impl Parameters for SeqHead {
    fn infos(&self) -> Vec<ParamInfo> {
        let mut v = Vec::new();
        weight(&mut v, "seq.hidden.weight", ParamGroup::Head);
        bias(&mut v, "seq.hidden.bias", ParamGroup::Head);
        weight(&mut v, "seq.out.weight", ParamGroup::Head);
        bias(&mut v, "seq.out.bias", ParamGroup::Head);
        v
    }

    fn tensors(&self) -> Vec<&Array2<f64>> {
        vec![&self.w1, &self.b1, &self.w2, &self.b2]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Array2<f64>> {
        vec![&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }
}

/// Dropout applied to the feature vector during training.
pub struct Dropout<'a> {
    pub rate: f64,
    pub rng: &'a mut dyn RngCore,
}

/// Intermediates for [`seq_backward`].
#[derive(Debug, Clone)]
pub struct SeqCache {
    spans: SeqSpans,
    n_tokens: usize,
    /// Feature after dropout.
    input: Array1<f64>,
    /// Per-feature dropout multiplier (0 or 1/(1-p)); all ones at inference.
    keep: Array1<f64>,
    hidden: Array1<f64>,
    pub probs: ProbTriple,
}

pub fn seq_features(states: &TokenStates, spans: &SeqSpans) -> Result<Array1<f64>, ModelError> {
    let parts = [span_embedding(states, spans.a)?, span_embedding(states, spans.b)?, span_embedding(states, spans.p)?];
    Ok(concatenate(Axis(0), &[parts[0].view(), parts[1].view(), parts[2].view()]).expect("equal widths"))
}

pub fn seq_forward_cached(
    states: &TokenStates,
    spans: &SeqSpans,
    head: &SeqHead,
    dropout: Option<Dropout<'_>>,
) -> Result<SeqCache, ModelError> {
    let feature = seq_features(states, spans)?;
    let keep = match dropout {
        Some(d) if d.rate > 0.0 => {
            let scale = 1.0 / (1.0 - d.rate);
            feature.mapv(|_| if d.rng.gen::<f64>() < d.rate { 0.0 } else { scale })
        }
        _ => Array1::ones(feature.len()),
    };
    let input = &feature * &keep;
    let hidden = (input.dot(&head.w1) + head.b1.row(0)).mapv(|v| v.max(0.0));
    let logits = hidden.dot(&head.w2) + head.b2.row(0);
    let probs = ProbTriple::softmax([logits[0], logits[1], logits[2]]);
    Ok(SeqCache { spans: *spans, n_tokens: states.len(), input, keep, hidden, probs })
}

pub fn seq_forward(
    states: &TokenStates,
    spans: &SeqSpans,
    head: &SeqHead,
    dropout: Option<Dropout<'_>>,
) -> Result<ProbTriple, ModelError> {
    seq_forward_cached(states, spans, head, dropout).map(|c| c.probs)
}

pub fn seq_loss(probs: &ProbTriple, gold: Label) -> f64 {
    -probs.get(gold).ln()
}

fn add_span_grad(d: &mut Array2<f64>, states: &TokenStates, span: TokenSpan, g: ArrayView1<f64>) {
    let h = states.hidden();
    let (ga, gb, gp) = (g.slice(s![..h]), g.slice(s![h..2 * h]), g.slice(s![2 * h..]));
    let a = states.0.row(span.start).to_owned();
    let b = states.0.row(span.end).to_owned();
    {
        let mut ra = d.row_mut(span.start);
        ra += &ga;
        ra += &(&gp * &b);
    }
    let mut rb = d.row_mut(span.end);
    rb += &gb;
    rb += &(&gp * &a);
}

/// Backward of `seq_loss(seq_forward(..))`: accumulates head gradients and
/// returns the gradient with respect to the token states.
pub fn seq_backward(
    states: &TokenStates,
    cache: &SeqCache,
    head: &SeqHead,
    gold: Label,
    grads: &mut SeqHead,
) -> Array2<f64> {
    let mut d_logits = cache.probs.as_array();
    d_logits[gold.index()] -= 1.0;
    let d_logits = Array1::from(d_logits.to_vec());
    let outer = |a: &Array1<f64>, b: &Array1<f64>| a.view().insert_axis(Axis(1)).dot(&b.view().insert_axis(Axis(0)));
    grads.w2 += &outer(&cache.hidden, &d_logits);
    grads.b2.row_mut(0).scaled_add(1.0, &d_logits);
    let mut d_hidden = head.w2.dot(&d_logits);
    d_hidden.zip_mut_with(&cache.hidden, |d, &h| {
        if h <= 0.0 {
            *d = 0.0;
        }
    });
    grads.w1 += &outer(&cache.input, &d_hidden);
    grads.b1.row_mut(0).scaled_add(1.0, &d_hidden);
    let d_feature = head.w1.dot(&d_hidden) * &cache.keep;

    let h3 = 3 * states.hidden();
    let mut d = Array2::zeros((cache.n_tokens, states.hidden()));
    let sp = cache.spans;
    for (k, span) in [sp.a, sp.b, sp.p].into_iter().enumerate() {
        add_span_grad(&mut d, states, span, d_feature.slice(s![k * h3..(k + 1) * h3]));
    }
    d
}
