//! Candidate-blind answer extraction.
//!
//! Everything here works from the passage, the pronoun and its offset only.
//! Candidate names and offsets never enter this file.

use std::ops::Range;

use super::{qa_forward, QaHead, SpanLogits};
use crate::data::{char_slice, GapRecord};
use crate::encoder::StateSource;
use crate::error::ModelError;
use crate::metrics::PredictedAnswer;
use crate::tokenizer::{encode_pair, wordpiece_tokenize, EncodedInput, TokenSpan, Vocab};

/// Default question window: the pronoun's word and two words per side.
pub const DEFAULT_WINDOW: usize = 5;
/// Longest answer considered, in wordpieces.
pub const DEFAULT_MAX_ANSWER_LEN: usize = 30;

/// Whitespace-separated words of `text` as character ranges.
fn words(text: &str) -> Vec<Range<usize>> {
    let mut out = Vec::new();
    let mut start = None;
    let mut count = 0;
    for (i, c) in text.chars().enumerate() {
        count = i + 1;
        match (c.is_whitespace(), start) {
            (true, Some(s)) => {
                out.push(s..i);
                start = None;
            }
            (false, None) => start = Some(i),
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push(s..count);
    }
    out
}

/// The question for a pronoun: the whitespace-separated word containing the
/// pronoun offset plus up to `window / 2` words on each side, joined by single
/// spaces.
pub fn build_question(text: &str, pronoun: &str, pronoun_offset: usize, window: usize) -> Option<String> {
    if char_slice(text, pronoun_offset, pronoun.chars().count()) != Some(pronoun) || pronoun.is_empty() {
        return None;
    }
    let words = words(text);
    let center = words.iter().position(|w| w.contains(&pronoun_offset))?;
    let half = window / 2;
    let lo = center.saturating_sub(half);
    let hi = (center + half).min(words.len() - 1);
    let parts: Vec<&str> =
        words[lo..=hi].iter().map(|w| char_slice(text, w.start, w.end - w.start).expect("word in range")).collect();
    Some(parts.join(" "))
}

pub fn question_for(record: &GapRecord, window: usize) -> Result<String, ModelError> {
    build_question(&record.text, &record.pronoun, record.pronoun_offset, window)
        .ok_or_else(|| ModelError::PronounNotFound(record.id.clone()))
}

/// `[CLS] question [SEP] passage [SEP]`.
pub fn encode_question(
    question: &str,
    passage: &str,
    vocab: &Vocab,
    max_seq_len: usize,
) -> Result<EncodedInput, ModelError> {
    let q = wordpiece_tokenize(question, vocab);
    let p = wordpiece_tokenize(passage, vocab);
    Ok(encode_pair(&q, &p, vocab, max_seq_len)?)
}

/// Highest-scoring span `(i, j)` with `i <= j < i + max_answer_len`, both in
/// `passage`, maximizing `start[i] + end[j]`. Ties go to the smaller `i`, then
/// the smaller `j`.
pub fn extract_best_span(logits: &SpanLogits, passage: Range<usize>, max_answer_len: usize) -> Option<TokenSpan> {
    if passage.is_empty() || max_answer_len == 0 || passage.end > logits.start.len() {
        return None;
    }
    let mut best: Option<(f64, TokenSpan)> = None;
    for i in passage.clone() {
        let last = (i + max_answer_len).min(passage.end);
        for j in i..last {
            let score = logits.start[i] + logits.end[j];
            if best.is_none_or(|(b, _)| score > b) {
                best = Some((score, TokenSpan::new(i, j)));
            }
        }
    }
    best.map(|(_, s)| s)
}

/// Map a token span of an encoded passage back to passage text.
pub fn span_to_answer(encoded: &EncodedInput, passage: &str, span: TokenSpan) -> Option<PredictedAnswer> {
    let first = encoded.alignment.get(span.start).copied().flatten()?;
    let last = encoded.alignment.get(span.end).copied().flatten()?;
    let text = char_slice(passage, first.start, last.end - first.start)?;
    Some(PredictedAnswer { char_start: first.start, char_end: last.end, text: text.to_string() })
}

/// Answer a question about a passage with one or more fold models whose
/// span logits are averaged.
pub fn answer_question<S: StateSource + ?Sized>(
    models: &[(&S, &QaHead)],
    key: &str,
    question: &str,
    passage: &str,
    vocab: &Vocab,
    max_seq_len: usize,
    max_answer_len: usize,
) -> Result<Option<PredictedAnswer>, ModelError> {
    let encoded = encode_question(question, passage, vocab, max_seq_len)?;
    let mut sum: Option<SpanLogits> = None;
    for (source, head) in models {
        let logits = qa_forward(&source.states(key, &encoded)?, head);
        sum = Some(match sum {
            None => logits,
            Some(mut acc) => {
                acc.start.iter_mut().zip(&logits.start).for_each(|(a, b)| *a += b);
                acc.end.iter_mut().zip(&logits.end).for_each(|(a, b)| *a += b);
                acc
            }
        });
    }
    let Some(mut logits) = sum else {
        return Ok(None);
    };
    let k = models.len() as f64;
    logits.start.iter_mut().chain(logits.end.iter_mut()).for_each(|v| *v /= k);
    Ok(extract_best_span(&logits, encoded.passage_range.clone(), max_answer_len)
        .and_then(|span| span_to_answer(&encoded, passage, span)))
}
