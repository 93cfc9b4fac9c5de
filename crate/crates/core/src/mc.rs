//! Multiple-choice formulation.
//!
//! The first segment is the passage followed by `" <pronoun> is "`; the three
//! second segments are A's name, B's name and the word "neither". A linear
//! head scores each choice's `[CLS]` state and a softmax over the three
//! scores gives the class probabilities.

use ndarray::{Array2, Axis};
use rand::Rng;

use crate::data::{gold_label, GapRecord, Label};
use crate::encoder::TokenStates;
use crate::error::ModelError;
use crate::metrics::ProbTriple;
use crate::params::{bias, row, weight, ParamGroup, ParamInfo, Parameters};
use crate::tokenizer::{encode_pair, wordpiece_tokenize, EncodedInput, TokenizedText, Vocab};

pub const NEITHER: &str = "neither";

#[derive(Debug, Clone, PartialEq)]
pub struct McExample {
    pub record_id: String,
    /// Ordered A, B, neither.
    pub choice_inputs: [EncodedInput; 3],
    pub gold_choice: usize,
}

/// `passage + " " + pronoun + " is "`.
pub fn first_segment(record: &GapRecord) -> String {
    format!("{} {} is ", record.text, record.pronoun)
}

/// Build the three choice inputs. When the pair would exceed `max_seq_len`,
/// the first segment loses pieces from its start so the `"<pronoun> is"`
/// suffix survives; all three inputs keep the identical first segment.
pub fn build_mc_example(record: &GapRecord, vocab: &Vocab, max_seq_len: usize) -> Result<McExample, ModelError> {
    let label = gold_label(record)?;
    let s1 = wordpiece_tokenize(&first_segment(record), vocab);
    let choices = [record.a_name.as_str(), record.b_name.as_str(), NEITHER].map(|c| wordpiece_tokenize(c, vocab));
    let longest = choices.iter().map(TokenizedText::len).max().unwrap_or(0);
    let budget = max_seq_len.saturating_sub(3 + longest).max(1);
    let s1 = if s1.len() > budget { TokenizedText { pieces: s1.pieces[s1.len() - budget..].to_vec() } } else { s1 };
    let mut inputs = Vec::with_capacity(3);
    for c in &choices {
        inputs.push(encode_pair(&s1, c, vocab, max_seq_len)?);
    }
    let choice_inputs: [EncodedInput; 3] = inputs.try_into().expect("three choices");
    Ok(McExample { record_id: record.id.clone(), choice_inputs, gold_choice: label.index() })
}

/// Linear scorer `H -> 1` on the `[CLS]` state.
#[derive(Debug, Clone, PartialEq)]
pub struct McHead {
    pub weight: Array2<f64>,
    pub bias: Array2<f64>,
}

impl McHead {
    pub fn zeros(hidden: usize) -> McHead {
        McHead { weight: Array2::zeros((hidden, 1)), bias: row(vec![0.0]) }
    }

    pub fn init<R: Rng>(hidden: usize, rng: &mut R) -> McHead {
        let a = (6.0 / (hidden + 1) as f64).sqrt();
        McHead { weight: crate::encoder::uniform(rng, hidden, 1, a), bias: row(vec![0.0]) }
    }
}

impl Parameters for McHead {
    fn infos(&self) -> Vec<ParamInfo> {
        let mut v = Vec::new();
        weight(&mut v, "mc.weight", ParamGroup::Head);
        bias(&mut v, "mc.bias", ParamGroup::Head);
        v
    }

    fn tensors(&self) -> Vec<&Array2<f64>> {
        vec![&self.weight, &self.bias]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Array2<f64>> {
        vec![&mut self.weight, &mut self.bias]
    }
}

pub fn mc_scores(states: [&TokenStates; 3], head: &McHead) -> [f64; 3] {
    states.map(|s| {
        let cls = s.0.row(0);
        cls.dot(&head.weight.column(0)) + head.bias[[0, 0]]
    })
}

pub fn mc_forward(states: [&TokenStates; 3], head: &McHead) -> ProbTriple {
    ProbTriple::softmax(mc_scores(states, head))
}

pub fn mc_loss(probs: &ProbTriple, gold_choice: usize) -> f64 {
    -probs.as_array()[gold_choice].ln()
}

/// Backward of `mc_loss(mc_forward(..))`: accumulates head gradients and
/// returns the gradient with respect to each choice's states.
pub fn mc_backward(
    states: [&TokenStates; 3],
    head: &McHead,
    probs: &ProbTriple,
    gold_choice: usize,
    grads: &mut McHead,
) -> [Array2<f64>; 3] {
    let mut d_scores = probs.as_array();
    d_scores[gold_choice] -= 1.0;
    let w = head.weight.column(0);
    std::array::from_fn(|k| {
        let s = &states[k].0;
        let cls = s.row(0);
        grads.weight.column_mut(0).scaled_add(d_scores[k], &cls);
        grads.bias[[0, 0]] += d_scores[k];
        let mut d = Array2::zeros(s.raw_dim());
        d.index_axis_mut(Axis(0), 0).assign(&(&w * d_scores[k]));
        d
    })
}

pub fn choice_label(choice: usize) -> Option<Label> {
    Label::from_index(choice)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn record() -> GapRecord {
        GapRecord {
            id: "w".into(),
            text: "They say John and his wife Carol had a son.".into(),
            pronoun: "his".into(),
            pronoun_offset: 18,
            a_name: "John".into(),
            a_offset: 9,
            a_coref: true,
            b_name: "Carol".into(),
            b_offset: 27,
            b_coref: false,
            url: String::new(),
        }
    }

    fn vocab() -> Vocab {
        let words = "[PAD] [UNK] [CLS] [SEP] [MASK] they say john and his wife carol had a son . is neither";
        Vocab::from_tokens(words.split(' ').map(String::from).collect()).unwrap()
    }

    #[test]
    fn first_segment_matches_worked_example() {
        assert_eq!(first_segment(&record()), "They say John and his wife Carol had a son. his is ");
    }

    #[test]
    fn choices_share_first_segment() {
        let v = vocab();
        let mut r = record();
        let ex = build_mc_example(&r, &v, 64).unwrap();
        assert_eq!(ex.gold_choice, 0);
        let seg0 = |e: &EncodedInput| -> Vec<u32> {
            e.ids.iter().zip(&e.segment_ids).filter(|(_, &s)| s == 0).map(|(&i, _)| i).collect()
        };
        assert_eq!(seg0(&ex.choice_inputs[0]), seg0(&ex.choice_inputs[1]));
        assert_eq!(seg0(&ex.choice_inputs[0]), seg0(&ex.choice_inputs[2]));
        let second: Vec<&str> =
            ex.choice_inputs[2].passage_range.clone().map(|i| v.token(ex.choice_inputs[2].ids[i]).unwrap()).collect();
        assert_eq!(second, vec!["neither"]);

        r.a_coref = false;
        assert_eq!(build_mc_example(&r, &v, 64).unwrap().gold_choice, 2);
    }

    #[test]
    fn truncation_keeps_suffix() {
        let v = vocab();
        let ex = build_mc_example(&record(), &v, 8).unwrap();
        for input in &ex.choice_inputs {
            assert!(input.len() <= 8);
        }
        let e = &ex.choice_inputs[0];
        let sep = e.ids.iter().position(|&i| i == v.sep_id()).unwrap();
        let tail: Vec<&str> = e.ids[sep - 2..sep].iter().map(|&i| v.token(i).unwrap()).collect();
        assert_eq!(tail, vec!["his", "is"]);
    }

    #[test]
    fn forward_cases() {
        let s = TokenStates(array![[1.0, 2.0], [0.0, 0.0]]);
        let p = mc_forward([&s, &s, &s], &McHead { weight: array![[0.3], [-0.1]], bias: array![[0.2]] });
        assert!((p.p_a - 1.0 / 3.0).abs() < 1e-15 && (p.p_b - p.p_n).abs() < 1e-15);
        let s2 = TokenStates(array![[-1.0, 0.5], [9.0, 9.0]]);
        let s3 = TokenStates(array![[0.0, 3.0], [9.0, 9.0]]);
        let p = mc_forward([&s, &s2, &s3], &McHead::zeros(2));
        assert!((p.p_a - 1.0 / 3.0).abs() < 1e-15);
        let head = McHead { weight: array![[1.0], [0.5]], bias: array![[0.0]] };
        let p = mc_forward([&s, &s2, &s3], &head);
        // Scores 2, -0.75, 1.5.
        let e = [2f64.exp(), (-0.75f64).exp(), 1.5f64.exp()];
        let z: f64 = e.iter().sum();
        assert!((p.p_a - e[0] / z).abs() < 1e-15 && (p.p_b - e[1] / z).abs() < 1e-15);
    }

    #[test]
    fn loss_cases() {
        assert!((mc_loss(&ProbTriple::UNIFORM, 1) - 3f64.ln()).abs() < 1e-15);
        assert_eq!(mc_loss(&ProbTriple::one_hot(Label::B), 1), 0.0);
        assert!((mc_loss(&ProbTriple::from_array([0.7, 0.2, 0.1]), 0) - 0.356_674_943_938_732_4).abs() < 1e-12);
    }

    #[test]
    fn choice_permutation_commutes() {
        let s: Vec<TokenStates> =
            (0..3).map(|k| TokenStates(array![[k as f64 - 1.0, 0.5 * k as f64], [1.0, 1.0]])).collect();
        let head = McHead { weight: array![[0.7], [-1.2]], bias: array![[0.1]] };
        let p = mc_forward([&s[0], &s[1], &s[2]], &head).as_array();
        let q = mc_forward([&s[2], &s[0], &s[1]], &head).as_array();
        for (a, b) in [p[2], p[0], p[1]].iter().zip(q) {
            assert!((a - b).abs() < 1e-15);
        }
    }
}
