//! End-to-end gradients through encoder and heads, and brute-force oracles
//! for the span machinery.

use gapcoref::data::Label;
use gapcoref::encoder::{init_params, EncoderConfig, EncoderParams};
use gapcoref::gradcheck;
use gapcoref::mc::{build_mc_example, mc_backward, mc_forward, mc_loss, McHead};
use gapcoref::params::{Joint, Parameters};
use gapcoref::qa::{
    build_qa_example, extract_best_span, qa_forward, qa_head_backward, qa_loss, qa_loss_grad, span_pool_features,
    BuildMode, QaBuild, QaHead, SpanLogits,
};
use gapcoref::seq::{build_seq_example, seq_backward, seq_forward, seq_forward_cached, seq_loss, SeqHead};
use gapcoref::synthetic::{generate, vocab_for_records};
use gapcoref::tokenizer::TokenSpan;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny(vocab_size: usize) -> EncoderParams {
    init_params(&EncoderConfig {
        num_layers: 2,
        hidden_dim: 8,
        num_heads: 2,
        ffn_dim: 16,
        max_positions: 64,
        seed: 3,
        ..EncoderConfig::new(vocab_size)
    })
    .unwrap()
}

const TOL: f64 = 1e-4;

#[test]
fn qa_path_gradient() {
    let recs = generate(4, 21);
    let vocab = vocab_for_records(&recs);
    let rec = recs.iter().find(|r| r.a_coref || r.b_coref).unwrap();
    let QaBuild::Example(ex) = build_qa_example(rec, &vocab, 5, 64, BuildMode::Training).unwrap() else { panic!() };
    let span = ex.answer_span.unwrap();
    let params = Joint { first: tiny(vocab.len()), second: QaHead::init(8, &mut ChaCha8Rng::seed_from_u64(1)) };
    let loss = |p: &Joint<EncoderParams, QaHead>| {
        qa_loss(&qa_forward(&p.first.forward(&ex.encoded).unwrap(), &p.second), span)
    };
    let (states, cache) = params.first.forward_cached(&ex.encoded).unwrap();
    let (_, d_logits) = qa_loss_grad(&qa_forward(&states, &params.second), span);
    let mut grads = params.zeros_like();
    let d_states = qa_head_backward(&states, &params.second, &d_logits, &mut grads.second);
    params.first.backward(&cache, &d_states, &mut grads.first);
    let report = gradcheck::check(&params, loss, &grads, 1e-5);
    assert!(report.max_rel_error() < TOL, "{:?}", report.worst());
}

#[test]
fn mc_path_gradient() {
    let recs = generate(4, 22);
    let vocab = vocab_for_records(&recs);
    let ex = build_mc_example(&recs[1], &vocab, 64).unwrap();
    let params = Joint { first: tiny(vocab.len()), second: McHead::init(8, &mut ChaCha8Rng::seed_from_u64(2)) };
    let loss = |p: &Joint<EncoderParams, McHead>| {
        let s: Vec<_> = ex.choice_inputs.iter().map(|i| p.first.forward(i).unwrap()).collect();
        mc_loss(&mc_forward([&s[0], &s[1], &s[2]], &p.second), ex.gold_choice)
    };
    let fwd: Vec<_> = ex.choice_inputs.iter().map(|i| params.first.forward_cached(i).unwrap()).collect();
    let st = [&fwd[0].0, &fwd[1].0, &fwd[2].0];
    let probs = mc_forward(st, &params.second);
    let mut grads = params.zeros_like();
    let d = mc_backward(st, &params.second, &probs, ex.gold_choice, &mut grads.second);
    for ((_, cache), d) in fwd.iter().zip(&d) {
        params.first.backward(cache, d, &mut grads.first);
    }
    let report = gradcheck::check(&params, loss, &grads, 1e-5);
    assert!(report.max_rel_error() < TOL, "{:?}", report.worst());
}

#[test]
fn seq_path_gradient() {
    let recs = generate(4, 23);
    let vocab = vocab_for_records(&recs);
    let ex = build_seq_example(&recs[2], &vocab, 64).unwrap();
    let params = Joint { first: tiny(vocab.len()), second: SeqHead::init(8, 6, &mut ChaCha8Rng::seed_from_u64(3)) };
    let loss = |p: &Joint<EncoderParams, SeqHead>| {
        seq_loss(&seq_forward(&p.first.forward(&ex.encoded).unwrap(), &ex.spans, &p.second, None).unwrap(), ex.gold)
    };
    let (states, cache) = params.first.forward_cached(&ex.encoded).unwrap();
    let sc = seq_forward_cached(&states, &ex.spans, &params.second, None).unwrap();
    let mut grads = params.zeros_like();
    let d = seq_backward(&states, &sc, &params.second, ex.gold, &mut grads.second);
    params.first.backward(&cache, &d, &mut grads.first);
    let report = gradcheck::check(&params, loss, &grads, 1e-5);
    assert!(report.max_rel_error() < TOL, "{:?}", report.worst());
    assert!(matches!(ex.gold, Label::A | Label::B | Label::N));
}

fn brute_best(l: &SpanLogits, range: std::ops::Range<usize>, max_len: usize) -> Option<TokenSpan> {
    let mut best: Option<(f64, usize, usize)> = None;
    for i in range.clone() {
        for j in range.clone() {
            if j < i || j - i + 1 > max_len {
                continue;
            }
            let s = l.start[i] + l.end[j];
            let better = match best {
                None => true,
                Some((b, bi, bj)) => s > b || (s == b && (i, j) < (bi, bj)),
            };
            if better {
                best = Some((s, i, j));
            }
        }
    }
    best.map(|(_, i, j)| TokenSpan::new(i, j))
}

fn span_max(v: &[f64], s: TokenSpan) -> f64 {
    let mut m = f64::NEG_INFINITY;
    for &x in &v[s.start..=s.end] {
        if x > m {
            m = x;
        }
    }
    m
}

proptest! {
    #[test]
    fn best_span_matches_brute_force(
        n in 1usize..64,
        seed in any::<u64>(),
        max_len in 1usize..40,
        coarse in any::<bool>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Coarse logits produce many exact ties.
        let draw = |rng: &mut ChaCha8Rng| if coarse { rng.gen_range(0..3) as f64 } else { rng.gen_range(-5.0..5.0) };
        let l = SpanLogits { start: (0..n).map(|_| draw(&mut rng)).collect(), end: (0..n).map(|_| draw(&mut rng)).collect() };
        let lo = rng.gen_range(0..n);
        let hi = rng.gen_range(lo + 1..=n);
        prop_assert_eq!(extract_best_span(&l, lo..hi, max_len), brute_best(&l, lo..hi, max_len));
    }

    #[test]
    fn pooling_matches_scan_and_dominance(n in 1usize..64, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let l = SpanLogits { start: (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect(), end: (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect() };
        let mut span = || { let i = rng.gen_range(0..n); TokenSpan::new(i, rng.gen_range(i..n)) };
        let (a, b) = (span(), span());
        let f = span_pool_features(&l, a, b).unwrap().0;
        let whole = TokenSpan::new(0, n - 1);
        prop_assert_eq!(f, [span_max(&l.start, a), span_max(&l.end, a), span_max(&l.start, b), span_max(&l.end, b), span_max(&l.start, whole), span_max(&l.end, whole)]);
        prop_assert!(f[4] >= f[0] && f[4] >= f[2] && f[5] >= f[1] && f[5] >= f[3]);
    }
}
