//! Compact post-LN transformer encoder with hand-written backpropagation.
//!
//! Token, position and segment embeddings are summed and normalized, then fed
//! through a stack of self-attention blocks. Each block is
//! `LN(x + Attn(x))` followed by `LN(y + FFN(y))` with a GELU feed-forward.
//! Padding positions (mask 0) neither attend nor are attended to.
//!
//! All arithmetic is `f64`. [`EncoderParams::forward_cached`] keeps the
//! intermediates that [`EncoderParams::backward`] needs.

mod external;

use std::collections::BTreeSet;
use std::ops::RangeInclusive;

use ndarray::{s, Array2, Axis};
use rand::Rng;

use crate::error::EncoderError;
use crate::nn::{gelu, gelu_grad, layer_norm, layer_norm_backward, sum_rows, LnCache};
use crate::params::{bias, row, weight, ParamGroup, ParamInfo, Parameters};
use crate::seed;
use crate::tokenizer::EncodedInput;

pub use external::{read_embeddings, write_embeddings, EmbeddingStore, StateSource};

/// Per-token contextual vectors, one row per input position.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenStates(pub Array2<f64>);

impl TokenStates {
    pub fn len(&self) -> usize {
        self.0.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.0.nrows() == 0
    }

    pub fn hidden(&self) -> usize {
        self.0.ncols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub max_positions: usize,
    pub vocab_size: usize,
    /// 1-based block indices excluded from updates. Freezing block 1 also
    /// freezes the embeddings beneath it.
    pub frozen_layers: BTreeSet<usize>,
    /// Block whose output is returned (1-based); `None` means the last.
    pub output_layer: Option<usize>,
    pub seed: u64,
}

impl EncoderConfig {
    /// Desk-scale defaults: 4 layers, H = 128, 4 heads, FFN 4·H.
    pub fn new(vocab_size: usize) -> EncoderConfig {
        EncoderConfig {
            num_layers: 4,
            hidden_dim: 128,
            num_heads: 4,
            ffn_dim: 512,
            max_positions: 512,
            vocab_size,
            frozen_layers: BTreeSet::new(),
            output_layer: None,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), EncoderError> {
        let bad = |m: String| Err(EncoderError::InvalidConfig(m));
        if self.num_layers == 0 || self.hidden_dim == 0 || self.num_heads == 0 || self.ffn_dim == 0 {
            return bad("layer, hidden, head and ffn sizes must be positive".into());
        }
        if !self.hidden_dim.is_multiple_of(self.num_heads) {
            return bad(format!("hidden_dim {} not divisible by num_heads {}", self.hidden_dim, self.num_heads));
        }
        if self.vocab_size == 0 || self.max_positions == 0 {
            return bad("vocab_size and max_positions must be positive".into());
        }
        if let Some(&l) = self.frozen_layers.iter().find(|&&l| l == 0 || l > self.num_layers) {
            return bad(format!("frozen layer {l} outside 1..={}", self.num_layers));
        }
        if let Some(o) = self.output_layer {
            if o == 0 || o > self.num_layers {
                return bad(format!("output layer {o} outside 1..={}", self.num_layers));
            }
        }
        Ok(())
    }

    pub fn output_layer(&self) -> usize {
        self.output_layer.unwrap_or(self.num_layers)
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let (h, f, l) = (self.hidden_dim, self.ffn_dim, self.num_layers);
        let embeddings = (self.vocab_size + self.max_positions + 2) * h + 2 * h;
        let attention = 4 * h * h + 4 * h;
        let ffn = h * f + f + f * h + h;
        let norms = 4 * h;
        embeddings + l * (attention + ffn + norms)
    }

    pub fn is_group_frozen(&self, group: ParamGroup) -> bool {
        match group {
            ParamGroup::Embeddings => self.frozen_layers.contains(&1),
            ParamGroup::Layer(l) => self.frozen_layers.contains(&l),
            ParamGroup::Head => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub wq: Array2<f64>,
    pub bq: Array2<f64>,
    pub wk: Array2<f64>,
    pub bk: Array2<f64>,
    pub wv: Array2<f64>,
    pub bv: Array2<f64>,
    pub wo: Array2<f64>,
    pub bo: Array2<f64>,
    pub ln1_g: Array2<f64>,
    pub ln1_b: Array2<f64>,
    pub w1: Array2<f64>,
    pub b1: Array2<f64>,
    pub w2: Array2<f64>,
    pub b2: Array2<f64>,
    pub ln2_g: Array2<f64>,
    pub ln2_b: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub tok_emb: Array2<f64>,
    pub pos_emb: Array2<f64>,
    pub seg_emb: Array2<f64>,
    pub emb_ln_g: Array2<f64>,
    pub emb_ln_b: Array2<f64>,
    pub layers: Vec<LayerParams>,
}

/// Uniform(-a, a) matrix.
pub(crate) fn uniform<R: Rng>(rng: &mut R, rows: usize, cols: usize, a: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-a..a))
}

fn xavier<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Array2<f64> {
    uniform(rng, rows, cols, (6.0 / (rows + cols) as f64).sqrt())
}

/// Embedding tables use a uniform distribution with standard deviation 0.02.
const EMB_RANGE: f64 = 0.02 * 1.732_050_807_568_877_2;

/// Deterministic initialization from `config.seed`.
pub fn init_params(config: &EncoderConfig) -> Result<EncoderParams, EncoderError> {
    config.validate()?;
    let mut rng = seed::rng(config.seed, "encoder-init");
    let (h, f) = (config.hidden_dim, config.ffn_dim);
    let ones = || row(vec![1.0; h]);
    let zeros = |n: usize| row(vec![0.0; n]);
    let tok_emb = uniform(&mut rng, config.vocab_size, h, EMB_RANGE);
    let pos_emb = uniform(&mut rng, config.max_positions, h, EMB_RANGE);
    let seg_emb = uniform(&mut rng, 2, h, EMB_RANGE);
    let layers = (0..config.num_layers)
        .map(|_| LayerParams {
            wq: xavier(&mut rng, h, h),
            bq: zeros(h),
            wk: xavier(&mut rng, h, h),
            bk: zeros(h),
            wv: xavier(&mut rng, h, h),
            bv: zeros(h),
            wo: xavier(&mut rng, h, h),
            bo: zeros(h),
            ln1_g: ones(),
            ln1_b: zeros(h),
            w1: xavier(&mut rng, h, f),
            b1: zeros(f),
            w2: xavier(&mut rng, f, h),
            b2: zeros(h),
            ln2_g: ones(),
            ln2_b: zeros(h),
        })
        .collect();
    Ok(EncoderParams {
        config: config.clone(),
        tok_emb,
        pos_emb,
        seg_emb,
        emb_ln_g: ones(),
        emb_ln_b: zeros(h),
        layers,
    })
}

/// Mark blocks `range` (1-based, inclusive) as frozen.
pub fn freeze_layers(params: &mut EncoderParams, range: RangeInclusive<usize>) -> Result<(), EncoderError> {
    let (start, end) = (*range.start(), *range.end());
    let layers = params.config.num_layers;
    if start == 0 || end > layers || start > end {
        return Err(EncoderError::BadRange { start, end, layers });
    }
    params.config.frozen_layers.extend(range);
    Ok(())
}

impl Parameters for EncoderParams {
    fn infos(&self) -> Vec<ParamInfo> {
        let mut v = Vec::new();
        let e = ParamGroup::Embeddings;
        weight(&mut v, "embeddings.token", e);
        weight(&mut v, "embeddings.position", e);
        weight(&mut v, "embeddings.segment", e);
        bias(&mut v, "embeddings.ln.gain", e);
        bias(&mut v, "embeddings.ln.bias", e);
        for l in 1..=self.layers.len() {
            let g = ParamGroup::Layer(l);
            for (name, is_weight) in [
                ("attn.q.weight", true),
                ("attn.q.bias", false),
                ("attn.k.weight", true),
                ("attn.k.bias", false),
                ("attn.v.weight", true),
                ("attn.v.bias", false),
                ("attn.out.weight", true),
                ("attn.out.bias", false),
                ("ln1.gain", false),
                ("ln1.bias", false),
                ("ffn.in.weight", true),
                ("ffn.in.bias", false),
                ("ffn.out.weight", true),
                ("ffn.out.bias", false),
                ("ln2.gain", false),
                ("ln2.bias", false),
            ] {
                let full = format!("layer{l}.{name}");
                if is_weight {
                    weight(&mut v, full, g);
                } else {
                    bias(&mut v, full, g);
                }
            }
        }
        v
    }

    fn tensors(&self) -> Vec<&Array2<f64>> {
        let mut v = vec![&self.tok_emb, &self.pos_emb, &self.seg_emb, &self.emb_ln_g, &self.emb_ln_b];
        for l in &self.layers {
            v.extend([
                &l.wq, &l.bq, &l.wk, &l.bk, &l.wv, &l.bv, &l.wo, &l.bo, &l.ln1_g, &l.ln1_b, &l.w1, &l.b1, &l.w2, &l.b2,
                &l.ln2_g, &l.ln2_b,
            ]);
        }
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut v =
            vec![&mut self.tok_emb, &mut self.pos_emb, &mut self.seg_emb, &mut self.emb_ln_g, &mut self.emb_ln_b];
        for l in &mut self.layers {
            v.extend([
                &mut l.wq,
                &mut l.bq,
                &mut l.wk,
                &mut l.bk,
                &mut l.wv,
                &mut l.bv,
                &mut l.wo,
                &mut l.bo,
                &mut l.ln1_g,
                &mut l.ln1_b,
                &mut l.w1,
                &mut l.b1,
                &mut l.w2,
                &mut l.b2,
                &mut l.ln2_g,
                &mut l.ln2_b,
            ]);
        }
        v
    }

    fn frozen(&self) -> Vec<bool> {
        self.infos().iter().map(|i| self.config.is_group_frozen(i.group)).collect()
    }
}

#[derive(Debug, Clone)]
struct LayerCache {
    x: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    ctx: Array2<f64>,
    ln1: LnCache,
    y1: Array2<f64>,
    pre_act: Array2<f64>,
    act: Array2<f64>,
    ln2: LnCache,
}

/// Intermediates of one forward pass.
#[derive(Debug, Clone)]
pub struct EncoderCache {
    ids: Vec<usize>,
    segments: Vec<usize>,
    emb_ln: LnCache,
    layers: Vec<LayerCache>,
}

impl EncoderParams {
    pub fn hidden(&self) -> usize {
        self.config.hidden_dim
    }

    pub fn forward(&self, input: &EncodedInput) -> Result<TokenStates, EncoderError> {
        self.forward_cached(input).map(|(s, _)| s)
    }

    pub fn forward_cached(&self, input: &EncodedInput) -> Result<(TokenStates, EncoderCache), EncoderError> {
        let n = input.len();
        let cfg = &self.config;
        if n > cfg.max_positions {
            return Err(EncoderError::SequenceTooLong { len: n, max: cfg.max_positions });
        }
        let ids: Vec<usize> = input.ids.iter().map(|&i| i as usize).collect();
        if let Some(&id) = ids.iter().find(|&&i| i >= cfg.vocab_size) {
            return Err(EncoderError::TokenOutOfRange { id, vocab: cfg.vocab_size });
        }
        let segments: Vec<usize> = input.segment_ids.iter().map(|&s| usize::from(s.min(1))).collect();
        let real: Vec<bool> = input.mask.iter().map(|&m| m != 0).collect();

        let mut x0 = Array2::zeros((n, cfg.hidden_dim));
        for i in 0..n {
            let mut r = x0.row_mut(i);
            r += &self.tok_emb.row(ids[i]);
            r += &self.pos_emb.row(i);
            r += &self.seg_emb.row(segments[i]);
        }
        let (mut x, emb_ln) = layer_norm(&x0, &self.emb_ln_g, &self.emb_ln_b);

        let mut caches = Vec::with_capacity(cfg.output_layer());
        for layer in &self.layers[..cfg.output_layer()] {
            let (y, cache) = self.layer_forward(layer, x, &real);
            caches.push(cache);
            x = y;
        }
        Ok((TokenStates(x), EncoderCache { ids, segments, emb_ln, layers: caches }))
    }

    fn layer_forward(&self, p: &LayerParams, x: Array2<f64>, real: &[bool]) -> (Array2<f64>, LayerCache) {
        let d = self.config.head_dim();
        let scale = 1.0 / (d as f64).sqrt();
        let q = x.dot(&p.wq) + &p.bq;
        let k = x.dot(&p.wk) + &p.bk;
        let v = x.dot(&p.wv) + &p.bv;
        let mut ctx = Array2::zeros(x.raw_dim());
        let mut probs = Vec::with_capacity(self.config.num_heads);
        for h in 0..self.config.num_heads {
            let cols = s![.., h * d..(h + 1) * d];
            let mut scores = q.slice(cols).dot(&k.slice(cols).t());
            for (i, mut r) in scores.rows_mut().into_iter().enumerate() {
                if !real[i] {
                    r.fill(0.0);
                    continue;
                }
                let max =
                    r.iter().zip(real).filter(|(_, &m)| m).map(|(&s, _)| s * scale).fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for (s, &m) in r.iter_mut().zip(real) {
                    *s = if m { (*s * scale - max).exp() } else { 0.0 };
                    sum += *s;
                }
                r.mapv_inplace(|e| e / sum);
            }
            ctx.slice_mut(cols).assign(&scores.dot(&v.slice(cols)));
            probs.push(scores);
        }
        let attn = ctx.dot(&p.wo) + &p.bo;
        let (y1, ln1) = layer_norm(&(&x + &attn), &p.ln1_g, &p.ln1_b);
        let pre_act = y1.dot(&p.w1) + &p.b1;
        let act = pre_act.mapv(gelu);
        let ffn = act.dot(&p.w2) + &p.b2;
        let (y2, ln2) = layer_norm(&(&y1 + &ffn), &p.ln2_g, &p.ln2_b);
        (y2, LayerCache { x, q, k, v, probs, ctx, ln1, y1, pre_act, act, ln2 })
    }

    /// Accumulate parameter gradients of a scalar loss into `grads`, given the
    /// loss gradient with respect to the returned states. Backpropagation
    /// stops early below the lowest trainable block.
    pub fn backward(&self, cache: &EncoderCache, d_states: &Array2<f64>, grads: &mut EncoderParams) {
        let cfg = &self.config;
        let lowest_needed = if !cfg.is_group_frozen(ParamGroup::Embeddings) {
            0
        } else {
            match (1..=cfg.output_layer()).find(|l| !cfg.frozen_layers.contains(l)) {
                Some(l) => l,
                None => return,
            }
        };
        let mut dx = d_states.clone();
        for li in (0..cache.layers.len()).rev() {
            dx = self.layer_backward(&self.layers[li], &cache.layers[li], &dx, &mut grads.layers[li]);
            if li + 1 == lowest_needed {
                return;
            }
        }
        let de = layer_norm_backward(&dx, &cache.emb_ln, &self.emb_ln_g, &mut grads.emb_ln_g, &mut grads.emb_ln_b);
        for (i, r) in de.rows().into_iter().enumerate() {
            let mut t = grads.tok_emb.row_mut(cache.ids[i]);
            t += &r;
            let mut p = grads.pos_emb.row_mut(i);
            p += &r;
            let mut s = grads.seg_emb.row_mut(cache.segments[i]);
            s += &r;
        }
    }

    fn layer_backward(&self, p: &LayerParams, c: &LayerCache, dy2: &Array2<f64>, g: &mut LayerParams) -> Array2<f64> {
        let d = self.config.head_dim();
        let scale = 1.0 / (d as f64).sqrt();

        let dr2 = layer_norm_backward(dy2, &c.ln2, &p.ln2_g, &mut g.ln2_g, &mut g.ln2_b);
        g.w2 += &c.act.t().dot(&dr2);
        g.b2 += &sum_rows(&dr2);
        let mut dpre = dr2.dot(&p.w2.t());
        ndarray::Zip::from(&mut dpre).and(&c.pre_act).for_each(|dv, &z| *dv *= gelu_grad(z));
        g.w1 += &c.y1.t().dot(&dpre);
        g.b1 += &sum_rows(&dpre);
        let dy1 = &dr2 + &dpre.dot(&p.w1.t());

        let dr1 = layer_norm_backward(&dy1, &c.ln1, &p.ln1_g, &mut g.ln1_g, &mut g.ln1_b);
        g.wo += &c.ctx.t().dot(&dr1);
        g.bo += &sum_rows(&dr1);
        let dctx = dr1.dot(&p.wo.t());

        let mut dq = Array2::zeros(c.q.raw_dim());
        let mut dk = Array2::zeros(c.k.raw_dim());
        let mut dv = Array2::zeros(c.v.raw_dim());
        for (h, probs) in c.probs.iter().enumerate() {
            let cols = s![.., h * d..(h + 1) * d];
            let dctx_h = dctx.slice(cols);
            let dprobs = dctx_h.dot(&c.v.slice(cols).t());
            dv.slice_mut(cols).assign(&probs.t().dot(&dctx_h));
            let row_dot = (&dprobs * probs).sum_axis(Axis(1)).insert_axis(Axis(1));
            let dscores = probs * &(&dprobs - &row_dot) * scale;
            dq.slice_mut(cols).assign(&dscores.dot(&c.k.slice(cols)));
            dk.slice_mut(cols).assign(&dscores.t().dot(&c.q.slice(cols)));
        }
        g.wq += &c.x.t().dot(&dq);
        g.bq += &sum_rows(&dq);
        g.wk += &c.x.t().dot(&dk);
        g.bk += &sum_rows(&dk);
        g.wv += &c.x.t().dot(&dv);
        g.bv += &sum_rows(&dv);
        dr1 + dq.dot(&p.wq.t()) + dk.dot(&p.wk.t()) + dv.dot(&p.wv.t())
    }
}

#[cfg(test)]
mod tests;
