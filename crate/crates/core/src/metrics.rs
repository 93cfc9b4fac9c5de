//! Probability triples, ensembling, GAP-style F1 split by gender, bias ratio,
//! log loss and exact-answer matching.
//!
//! F1 follows the GAP scorer convention: every example contributes two binary
//! decisions (pronoun–A and pronoun–B). Predicting A means (true, false), B
//! means (false, true) and N means (false, false). Precision, recall and F1 are
//! micro-averaged over all decisions.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::data::{char_slice, gold_label, pronoun_gender, GapRecord, Gender, Label};
use crate::error::{DataError, MetricsError};

/// Tolerance for the sum-to-one check on probability triples.
pub const SIMPLEX_TOL: f64 = 1e-9;
/// Lower clip for log loss, as in the shared-task evaluation.
pub const LOG_LOSS_CLIP: f64 = 1e-15;

/// Probabilities for A, B and neither.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbTriple {
    pub p_a: f64,
    pub p_b: f64,
    pub p_n: f64,
}

impl ProbTriple {
    pub const UNIFORM: ProbTriple = ProbTriple { p_a: 1.0 / 3.0, p_b: 1.0 / 3.0, p_n: 1.0 / 3.0 };

    /// Validating constructor.
    pub fn new(p_a: f64, p_b: f64, p_n: f64) -> Option<ProbTriple> {
        let t = ProbTriple { p_a, p_b, p_n };
        t.is_simplex(SIMPLEX_TOL).then_some(t)
    }

    pub fn from_array(p: [f64; 3]) -> ProbTriple {
        ProbTriple { p_a: p[0], p_b: p[1], p_n: p[2] }
    }

    pub fn softmax(logits: [f64; 3]) -> ProbTriple {
        let p = crate::nn::softmax(&logits);
        ProbTriple { p_a: p[0], p_b: p[1], p_n: p[2] }
    }

    pub fn one_hot(label: Label) -> ProbTriple {
        let mut p = [0.0; 3];
        p[label.index()] = 1.0;
        ProbTriple::from_array(p)
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.p_a, self.p_b, self.p_n]
    }

    pub fn get(&self, label: Label) -> f64 {
        self.as_array()[label.index()]
    }

    pub fn is_simplex(&self, tol: f64) -> bool {
        let a = self.as_array();
        a.iter().all(|&p| p.is_finite() && (-tol..=1.0 + tol).contains(&p))
            && (a.iter().sum::<f64>() - 1.0).abs() <= tol
    }
}

/// Per-example probabilities keyed by record id.
pub type Predictions = BTreeMap<String, ProbTriple>;

fn coverage_error<A, B>(left: &BTreeMap<String, A>, right: &BTreeMap<String, B>) -> Option<MetricsError> {
    if left.len() == right.len() && left.keys().zip(right.keys()).all(|(a, b)| a == b) {
        return None;
    }
    let missing = right.keys().find(|k| !left.contains_key(*k));
    let extra = left.keys().find(|k| !right.contains_key(*k));
    let msg = match (missing, extra) {
        (Some(m), _) => format!("{m:?} has no prediction"),
        (None, Some(e)) => format!("{e:?} has no gold entry"),
        (None, None) => "size mismatch".to_string(),
    };
    Some(MetricsError::CoverageMismatch(msg))
}

/// Per-id arithmetic mean of several prediction sets with identical ids.
pub fn ensemble_average(systems: &[Predictions]) -> Result<Predictions, MetricsError> {
    let (first, rest) = systems.split_first().ok_or(MetricsError::NoSystems)?;
    for s in rest {
        if let Some(e) = coverage_error(s, first) {
            return Err(e);
        }
    }
    let k = systems.len() as f64;
    Ok(first
        .keys()
        .map(|id| {
            let mut sum = [0.0; 3];
            for s in systems {
                for (acc, p) in sum.iter_mut().zip(s[id].as_array()) {
                    *acc += p;
                }
            }
            (id.clone(), ProbTriple::from_array(sum.map(|v| v / k)))
        })
        .collect())
}

/// Most probable label; exact ties resolve in the order A, B, N.
pub fn argmax_label(p: &ProbTriple) -> Label {
    let mut best = Label::A;
    for label in [Label::B, Label::N] {
        if p.get(label) > p.get(best) {
            best = label;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct F1Score {
    pub true_pos: usize,
    pub false_pos: usize,
    pub false_neg: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl F1Score {
    fn from_counts(true_pos: usize, false_pos: usize, false_neg: usize) -> F1Score {
        let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        let precision = ratio(true_pos, true_pos + false_pos);
        let recall = ratio(true_pos, true_pos + false_neg);
        let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
        F1Score { true_pos, false_pos, false_neg, precision, recall, f1 }
    }
}

/// GAP-scorer F1 of predicted labels against gold (a_coref, b_coref) flags.
pub fn gap_f1(
    preds: &BTreeMap<String, Label>,
    golds: &BTreeMap<String, (bool, bool)>,
) -> Result<F1Score, MetricsError> {
    if let Some(e) = coverage_error(preds, golds) {
        return Err(e);
    }
    let (mut tp, mut fp, mut fneg) = (0, 0, 0);
    for (id, label) in preds {
        let (pa, pb) = label.as_flags();
        let (ga, gb) = golds[id];
        for (p, g) in [(pa, ga), (pb, gb)] {
            match (p, g) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fneg += 1,
                (false, false) => {}
            }
        }
    }
    Ok(F1Score::from_counts(tp, fp, fneg))
}

/// Mean of `-ln(clamp(p_gold, clip, 1 - clip))` over ids.
pub fn log_loss(probs: &Predictions, golds: &BTreeMap<String, Label>, clip: f64) -> Result<f64, MetricsError> {
    if let Some(e) = coverage_error(probs, golds) {
        return Err(e);
    }
    if probs.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = probs.iter().map(|(id, p)| -p.get(golds[id]).clamp(clip, 1.0 - clip).ln()).sum();
    Ok(total / probs.len() as f64)
}

/// Gold annotation of one example as needed for scoring.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Gold {
    pub a_coref: bool,
    pub b_coref: bool,
    pub gender: Gender,
}

impl Gold {
    pub fn label(&self) -> Label {
        match (self.a_coref, self.b_coref) {
            (true, _) => Label::A,
            (false, true) => Label::B,
            (false, false) => Label::N,
        }
    }
}

pub fn golds_from_records(records: &[GapRecord]) -> Result<BTreeMap<String, Gold>, DataError> {
    records
        .iter()
        .map(|r| {
            gold_label(r)?;
            Ok((r.id.clone(), Gold { a_coref: r.a_coref, b_coref: r.b_coref, gender: pronoun_gender(r)? }))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum F1Averaging {
    /// One pool of decisions over all examples.
    #[default]
    Micro,
    /// Mean of the male and female F1.
    MacroOverGenders,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub male: F1Score,
    pub female: F1Score,
    pub overall: F1Score,
    pub male_f1: f64,
    pub female_f1: f64,
    pub overall_f1: f64,
    /// Female F1 over male F1; `None` when male F1 is zero.
    pub bias: Option<f64>,
    pub log_loss: f64,
    pub male_count: usize,
    pub female_count: usize,
}

pub fn gender_metrics(
    probs: &Predictions,
    golds: &BTreeMap<String, Gold>,
    averaging: F1Averaging,
) -> Result<MetricsReport, MetricsError> {
    if let Some(e) = coverage_error(probs, golds) {
        return Err(e);
    }
    let labels: BTreeMap<String, Label> = probs.iter().map(|(id, p)| (id.clone(), argmax_label(p))).collect();
    let subset = |gender: Option<Gender>| {
        let keep = |id: &String| gender.is_none_or(|g| golds[id].gender == g);
        let p: BTreeMap<String, Label> =
            labels.iter().filter(|(id, _)| keep(id)).map(|(k, v)| (k.clone(), *v)).collect();
        let g: BTreeMap<String, (bool, bool)> =
            golds.iter().filter(|(id, _)| keep(id)).map(|(k, v)| (k.clone(), (v.a_coref, v.b_coref))).collect();
        (p, g)
    };
    let (male_p, male_g) = subset(Some(Gender::Male));
    let (female_p, female_g) = subset(Some(Gender::Female));
    if male_p.is_empty() {
        return Err(MetricsError::EmptyGenderSubset(Gender::Male));
    }
    if female_p.is_empty() {
        return Err(MetricsError::EmptyGenderSubset(Gender::Female));
    }
    let (all_p, all_g) = subset(None);
    let male = gap_f1(&male_p, &male_g)?;
    let female = gap_f1(&female_p, &female_g)?;
    let overall = gap_f1(&all_p, &all_g)?;
    let overall_f1 = match averaging {
        F1Averaging::Micro => overall.f1,
        F1Averaging::MacroOverGenders => (male.f1 + female.f1) / 2.0,
    };
    let gold_labels: BTreeMap<String, Label> = golds.iter().map(|(k, g)| (k.clone(), g.label())).collect();
    Ok(MetricsReport {
        male,
        female,
        overall,
        male_f1: male.f1,
        female_f1: female.f1,
        overall_f1,
        bias: bias_ratio(female.f1, male.f1),
        log_loss: log_loss(probs, &gold_labels, LOG_LOSS_CLIP)?,
        male_count: male_p.len(),
        female_count: female_p.len(),
    })
}

pub fn bias_ratio(female_f1: f64, male_f1: f64) -> Option<f64> {
    (male_f1 > 0.0).then(|| female_f1 / male_f1)
}

/// Bias rounded to two decimals for display.
pub fn format_bias(bias: Option<f64>) -> String {
    bias.map_or_else(|| "n/a".to_string(), |b| format!("{b:.2}"))
}

impl MetricsReport {
    /// Aligned table with the columns M, F, B, O, L (F1 values in percent).
    pub fn to_table(&self, name: &str) -> String {
        let mut out = String::new();
        let width = name.len().max(5);
        let _ = writeln!(out, "{:<width$}  {:>6}  {:>6}  {:>5}  {:>6}  {:>6}", "model", "M", "F", "B", "O", "L");
        let _ = writeln!(
            out,
            "{:<width$}  {:>6.1}  {:>6.1}  {:>5}  {:>6.1}  {:>6.3}",
            name,
            self.male_f1 * 100.0,
            self.female_f1 * 100.0,
            format_bias(self.bias),
            self.overall_f1 * 100.0,
            self.log_loss
        );
        out
    }

    /// One `key=value` line per field.
    pub fn to_key_values(&self) -> String {
        let mut out = String::new();
        let bias = self.bias.map_or_else(|| "nan".to_string(), |b| b.to_string());
        for (k, v) in [
            ("male_f1", self.male_f1.to_string()),
            ("female_f1", self.female_f1.to_string()),
            ("overall_f1", self.overall_f1.to_string()),
            ("bias", bias),
            ("log_loss", self.log_loss.to_string()),
            ("overall_precision", self.overall.precision.to_string()),
            ("overall_recall", self.overall.recall.to_string()),
            ("male_count", self.male_count.to_string()),
            ("female_count", self.female_count.to_string()),
        ] {
            let _ = writeln!(out, "{k}={v}");
        }
        out
    }
}

/// An extracted answer: a character span of the passage and its text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PredictedAnswer {
    pub char_start: usize,
    pub char_end: usize,
    pub text: String,
}

fn normalize(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

/// Strip one trailing possessive or parenthetical from a normalized answer.
fn head_of(s: &str) -> Option<&str> {
    if let Some(stripped) = s.strip_suffix("'s").or_else(|| s.strip_suffix("\u{2019}s")) {
        return Some(stripped.trim_end());
    }
    if s.ends_with(')') {
        if let Some(open) = s.rfind('(') {
            return Some(s[..open].trim_end());
        }
    }
    None
}

/// Whether an extracted answer names the gold antecedent.
///
/// The answer must overlap the gold candidate's span in the passage and its
/// normalized text must equal the gold name, or equal it once a trailing
/// possessive or parenthetical is removed. Gold-N records never match.
pub fn exact_answer_match(pred: &PredictedAnswer, record: &GapRecord) -> bool {
    let (name, offset) = match gold_label(record) {
        Ok(Label::A) => (&record.a_name, record.a_offset),
        Ok(Label::B) => (&record.b_name, record.b_offset),
        _ => return false,
    };
    let gold_end = offset + name.chars().count();
    let overlaps = pred.char_start < gold_end && offset < pred.char_end;
    if !overlaps {
        return false;
    }
    let gold = normalize(name);
    let predicted = normalize(&pred.text);
    predicted == gold || head_of(&predicted) == Some(gold.as_str())
}

/// Build a [`PredictedAnswer`] from a character span of the record text.
pub fn answer_from_span(record: &GapRecord, char_start: usize, char_end: usize) -> Option<PredictedAnswer> {
    let text = char_slice(&record.text, char_start, char_end.checked_sub(char_start)?)?;
    Some(PredictedAnswer { char_start, char_end, text: text.to_string() })
}

pub const CSV_HEADER: &str = "ID,A,B,NEITHER";

/// Shared-task submission format with twelve decimals per probability.
pub fn write_predictions_csv(preds: &Predictions) -> String {
    let mut out = String::with_capacity(preds.len() * 48);
    out.push_str(CSV_HEADER);
    out.push('\n');
    for (id, p) in preds {
        let _ = writeln!(out, "{},{:.12},{:.12},{:.12}", id, p.p_a, p.p_b, p.p_n);
    }
    out
}

/// Parse a prediction CSV. Triples must sum to one within 1e-6 (rounded
/// decimal output does not sum exactly).
pub fn read_predictions_csv(content: &str) -> Result<Predictions, MetricsError> {
    let content = content.strip_prefix('\u{feff}').unwrap_or(content);
    let mut lines = content.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim().eq_ignore_ascii_case(CSV_HEADER) => {}
        _ => return Err(MetricsError::Csv { line: 1, reason: format!("expected header {CSV_HEADER}") }),
    }
    let mut preds = Predictions::new();
    for (i, line) in lines {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 4 {
            return Err(MetricsError::Csv {
                line: line_no,
                reason: format!("expected 4 fields, got {}", fields.len()),
            });
        }
        let mut p = [0.0; 3];
        for (slot, f) in p.iter_mut().zip(&fields[1..]) {
            *slot =
                f.parse().map_err(|_| MetricsError::Csv { line: line_no, reason: format!("not a number: {f:?}") })?;
        }
        let triple = ProbTriple::from_array(p);
        if !triple.is_simplex(1e-6) {
            return Err(MetricsError::NotSimplex { id: fields[0].to_string(), values: p });
        }
        if preds.insert(fields[0].to_string(), triple).is_some() {
            return Err(MetricsError::Csv { line: line_no, reason: format!("duplicate id {}", fields[0]) });
        }
    }
    Ok(preds)
}
