use super::*;
use crate::gradcheck;
use proptest::prelude::*;

fn input(ids: &[u32], segs: &[u8]) -> EncodedInput {
    EncodedInput {
        ids: ids.to_vec(),
        segment_ids: segs.to_vec(),
        mask: vec![1; ids.len()],
        passage_range: 0..ids.len(),
        alignment: vec![None; ids.len()],
    }
}

fn pad(inp: &EncodedInput, extra: usize) -> EncodedInput {
    let mut out = inp.clone();
    for _ in 0..extra {
        out.ids.push(0);
        out.segment_ids.push(0);
        out.mask.push(0);
        out.alignment.push(None);
    }
    out
}

fn tiny(seed: u64) -> EncoderConfig {
    EncoderConfig {
        num_layers: 2,
        hidden_dim: 8,
        num_heads: 2,
        ffn_dim: 12,
        max_positions: 16,
        vocab_size: 11,
        frozen_layers: BTreeSet::new(),
        output_layer: None,
        seed,
    }
}

#[test]
fn init_is_deterministic_per_seed() {
    let a = init_params(&tiny(3)).unwrap();
    let b = init_params(&tiny(3)).unwrap();
    assert_eq!(a, b);
    assert!(a
        .tensors()
        .iter()
        .zip(b.tensors())
        .all(|(x, y)| x.iter().zip(y.iter()).all(|(p, q)| p.to_bits() == q.to_bits())));
    let c = init_params(&tiny(4)).unwrap();
    assert_ne!(a.tok_emb, c.tok_emb);
}

#[test]
fn default_parameter_count_matches_closed_form() {
    let cfg = EncoderConfig::new(1000);
    let p = init_params(&cfg).unwrap();
    // (V + P + 2)·H + 2H for embeddings, then per block
    // 4H² + 4H (attention) + 2·H·F + F + H (ffn) + 4H (two norms).
    let (v, pos, h, f, l) = (1000, 512, 128, 512, 4);
    let expected = (v + pos + 2) * h + 2 * h + l * (4 * h * h + 4 * h + 2 * h * f + f + h + 4 * h);
    assert_eq!(p.num_params(), expected);
    assert_eq!(cfg.param_count(), expected);
}

#[test]
fn config_validation() {
    let mut c = tiny(0);
    c.num_heads = 3;
    assert!(matches!(init_params(&c), Err(EncoderError::InvalidConfig(_))));
    let mut c = tiny(0);
    c.frozen_layers.insert(3);
    assert!(matches!(init_params(&c), Err(EncoderError::InvalidConfig(_))));
    let mut p = init_params(&tiny(0)).unwrap();
    assert!(matches!(freeze_layers(&mut p, 0..=1), Err(EncoderError::BadRange { .. })));
    assert!(matches!(freeze_layers(&mut p, 1..=3), Err(EncoderError::BadRange { .. })));
    freeze_layers(&mut p, 1..=2).unwrap();
    assert!(p.config.is_group_frozen(ParamGroup::Embeddings));
}

#[test]
fn sequence_too_long() {
    let p = init_params(&tiny(0)).unwrap();
    let long = input(&[1; 17], &[0; 17]);
    assert!(matches!(p.forward(&long), Err(EncoderError::SequenceTooLong { len: 17, max: 16 })));
}

/// Scalar-loop reference forward pass, written independently of the
/// matrix code path.
fn reference_forward(p: &EncoderParams, ids: &[usize], segs: &[usize]) -> Vec<Vec<f64>> {
    let cfg = &p.config;
    let (n, h, heads) = (ids.len(), cfg.hidden_dim, cfg.num_heads);
    let d = h / heads;
    let ln = |x: &Vec<f64>, g: &Array2<f64>, b: &Array2<f64>| -> Vec<f64> {
        let mean = x.iter().sum::<f64>() / h as f64;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / h as f64;
        (0..h).map(|j| g[[0, j]] * (x[j] - mean) / (var + 1e-12).sqrt() + b[[0, j]]).collect()
    };
    let affine = |x: &Vec<f64>, w: &Array2<f64>, b: &Array2<f64>| -> Vec<f64> {
        (0..w.ncols()).map(|j| b[[0, j]] + (0..w.nrows()).map(|i| x[i] * w[[i, j]]).sum::<f64>()).collect()
    };
    let mut xs: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let raw: Vec<f64> =
                (0..h).map(|j| p.tok_emb[[ids[i], j]] + p.pos_emb[[i, j]] + p.seg_emb[[segs[i], j]]).collect();
            ln(&raw, &p.emb_ln_g, &p.emb_ln_b)
        })
        .collect();
    for l in &p.layers {
        let q: Vec<_> = xs.iter().map(|x| affine(x, &l.wq, &l.bq)).collect();
        let k: Vec<_> = xs.iter().map(|x| affine(x, &l.wk, &l.bk)).collect();
        let v: Vec<_> = xs.iter().map(|x| affine(x, &l.wv, &l.bv)).collect();
        let mut ctx = vec![vec![0.0; h]; n];
        for hd in 0..heads {
            for i in 0..n {
                let scores: Vec<f64> = (0..n)
                    .map(|j| (0..d).map(|c| q[i][hd * d + c] * k[j][hd * d + c]).sum::<f64>() / (d as f64).sqrt())
                    .collect();
                let probs = crate::nn::softmax(&scores);
                for c in 0..d {
                    ctx[i][hd * d + c] = (0..n).map(|j| probs[j] * v[j][hd * d + c]).sum();
                }
            }
        }
        xs = (0..n)
            .map(|i| {
                let a = affine(&ctx[i], &l.wo, &l.bo);
                let r1: Vec<f64> = (0..h).map(|j| xs[i][j] + a[j]).collect();
                let y1 = ln(&r1, &l.ln1_g, &l.ln1_b);
                let hid: Vec<f64> = affine(&y1, &l.w1, &l.b1).into_iter().map(crate::nn::gelu).collect();
                let f = affine(&hid, &l.w2, &l.b2);
                let r2: Vec<f64> = (0..h).map(|j| y1[j] + f[j]).collect();
                ln(&r2, &l.ln2_g, &l.ln2_b)
            })
            .collect();
    }
    xs
}

#[test]
fn hand_set_single_head_matches_reference() {
    let cfg = EncoderConfig {
        num_layers: 1,
        hidden_dim: 2,
        num_heads: 1,
        ffn_dim: 2,
        max_positions: 2,
        vocab_size: 3,
        frozen_layers: BTreeSet::new(),
        output_layer: None,
        seed: 0,
    };
    let mut p = init_params(&cfg).unwrap();
    p.tok_emb = ndarray::array![[0.5, -0.5], [1.0, 0.2], [-0.3, 0.8]];
    p.pos_emb = ndarray::array![[0.1, 0.0], [0.0, 0.1]];
    p.seg_emb = ndarray::array![[0.0, 0.0], [0.2, -0.2]];
    let l = &mut p.layers[0];
    l.wq = ndarray::array![[1.0, 0.5], [-0.5, 1.0]];
    l.wk = ndarray::array![[0.8, 0.0], [0.3, 1.2]];
    l.wv = ndarray::array![[1.0, -1.0], [0.5, 0.5]];
    l.wo = ndarray::array![[0.7, 0.1], [-0.2, 0.9]];
    l.bq = ndarray::array![[0.1, -0.1]];
    l.w1 = ndarray::array![[1.5, -0.4], [0.3, 0.6]];
    l.b1 = ndarray::array![[0.05, -0.05]];
    l.w2 = ndarray::array![[0.9, 0.2], [-0.6, 1.1]];
    l.ln1_g = ndarray::array![[1.2, 0.8]];
    l.ln2_b = ndarray::array![[0.1, -0.3]];

    let out = p.forward(&input(&[1, 2], &[0, 1])).unwrap();
    let reference = reference_forward(&p, &[1, 2], &[0, 1]);
    for ((i, j), v) in out.0.indexed_iter() {
        assert!((v - reference[i][j]).abs() < 1e-12, "{i},{j}");
    }
    // With H = 2 every normalized row is (±1, ∓1) scaled by the final gain,
    // shifted by the final bias.
    for i in 0..2 {
        assert!(((out.0[[i, 0]] - 0.1).abs() - 1.0).abs() < 1e-9);
        assert!(((out.0[[i, 1]] + 0.3).abs() - 1.0).abs() < 1e-9);
    }
}

#[test]
fn random_config_matches_reference() {
    let p = init_params(&tiny(9)).unwrap();
    let ids = [2usize, 5, 7, 1, 10];
    let segs = [0usize, 0, 1, 1, 1];
    let out = p.forward(&input(&[2, 5, 7, 1, 10], &[0, 0, 1, 1, 1])).unwrap();
    let reference = reference_forward(&p, &ids, &segs);
    for ((i, j), v) in out.0.indexed_iter() {
        assert!((v - reference[i][j]).abs() < 1e-10);
    }
}

#[test]
fn padding_does_not_change_real_rows() {
    let p = init_params(&tiny(1)).unwrap();
    let base = input(&[3, 4, 5, 6], &[0, 0, 1, 1]);
    let plain = p.forward(&base).unwrap();
    let padded = p.forward(&pad(&base, 5)).unwrap();
    assert_eq!(padded.len(), 9);
    for i in 0..4 {
        for j in 0..8 {
            assert!((plain.0[[i, j]] - padded.0[[i, j]]).abs() < 1e-12);
        }
    }
    assert!(padded.0.iter().all(|v| v.is_finite()));
}

#[test]
fn permuting_pad_columns_leaves_real_rows() {
    let p = init_params(&tiny(2)).unwrap();
    let mut a = pad(&input(&[3, 4, 5], &[0, 1, 1]), 2);
    a.ids[3] = 7;
    a.ids[4] = 9;
    let mut b = a.clone();
    b.ids.swap(3, 4);
    let (sa, sb) = (p.forward(&a).unwrap(), p.forward(&b).unwrap());
    for i in 0..3 {
        assert_eq!(sa.0.row(i), sb.0.row(i));
    }
}

fn weighted_sum_loss(p: &EncoderParams, inp: &EncodedInput, w: &Array2<f64>) -> f64 {
    (&p.forward(inp).unwrap().0 * w).sum()
}

#[test]
fn backward_matches_finite_differences() {
    let p = init_params(&tiny(5)).unwrap();
    let inp = pad(&input(&[1, 4, 2, 9, 3], &[0, 0, 1, 1, 1]), 2);
    let mut rng = seed::rng(11, "gradcheck-weights");
    let w = uniform(&mut rng, inp.len(), 8, 1.0);
    let (_, cache) = p.forward_cached(&inp).unwrap();
    let mut grads = p.zeros_like();
    p.backward(&cache, &w, &mut grads);
    let report = gradcheck::check(&p, |q| weighted_sum_loss(q, &inp, &w), &grads, 1e-5);
    assert!(report.max_rel_error() < 1e-4, "{:?}", report.worst());
}

#[test]
fn backward_respects_output_layer() {
    let mut cfg = tiny(6);
    cfg.output_layer = Some(1);
    let p = init_params(&cfg).unwrap();
    let inp = input(&[1, 2, 3], &[0, 0, 1]);
    let w = Array2::from_shape_fn((3, 8), |(i, j)| ((i * 8 + j) as f64 * 0.37).sin());
    let (states, cache) = p.forward_cached(&inp).unwrap();
    assert_eq!(states.len(), 3);
    let mut grads = p.zeros_like();
    p.backward(&cache, &w, &mut grads);
    assert!(grads.layers[1].wq.iter().all(|&v| v == 0.0));
    let report = gradcheck::check(&p, |q| weighted_sum_loss(q, &inp, &w), &grads, 1e-5);
    assert!(report.max_rel_error() < 1e-4, "{:?}", report.worst());
}

#[test]
fn frozen_bottom_is_skipped() {
    let mut p = init_params(&tiny(7)).unwrap();
    freeze_layers(&mut p, 1..=1).unwrap();
    let inp = input(&[1, 2, 3], &[0, 0, 1]);
    let (_, cache) = p.forward_cached(&inp).unwrap();
    let mut grads = p.zeros_like();
    p.backward(&cache, &Array2::from_elem((3, 8), 1.0), &mut grads);
    assert!(grads.tok_emb.iter().all(|&v| v == 0.0));
    assert!(grads.layers[0].w1.iter().all(|&v| v == 0.0));
    assert!(grads.layers[1].w1.iter().any(|&v| v != 0.0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn padding_invariance_random(
        ids in proptest::collection::vec(0u32..11, 1..8),
        extra in 1usize..6,
        seed in 0u64..1000,
    ) {
        let p = init_params(&tiny(seed)).unwrap();
        let segs: Vec<u8> = (0..ids.len()).map(|i| u8::from(i * 2 >= ids.len())).collect();
        let base = input(&ids, &segs);
        let plain = p.forward(&base).unwrap();
        let padded = p.forward(&pad(&base, extra.min(16 - ids.len()))).unwrap();
        for i in 0..ids.len() {
            for j in 0..8 {
                prop_assert!((plain.0[[i, j]] - padded.0[[i, j]]).abs() < 1e-12);
            }
        }
    }
}
