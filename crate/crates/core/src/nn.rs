//! Small numeric building blocks shared by the encoder and the task heads.

use ndarray::{Array1, Array2, ArrayView1, Axis};

pub const LN_EPS: f64 = 1e-12;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

/// Numerically stable softmax of a slice.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// `ln(sum(exp(z)))` without overflow.
pub fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln()
}

/// Cached intermediate values of a row-wise layer normalization.
#[derive(Debug, Clone)]
pub struct LnCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

/// Row-wise layer norm: `gain * (x - mean) / sqrt(var + eps) + bias`.
pub fn layer_norm(x: &Array2<f64>, gain: &Array2<f64>, bias: &Array2<f64>) -> (Array2<f64>, LnCache) {
    let h = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut r, s) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mean = r.sum() / h;
        r.mapv_inplace(|v| v - mean);
        let var = r.iter().map(|v| v * v).sum::<f64>() / h;
        *s = 1.0 / (var + LN_EPS).sqrt();
        let is = *s;
        r.mapv_inplace(|v| v * is);
    }
    let y = &xhat * gain + bias;
    (y, LnCache { xhat, inv_std })
}

/// Backward of [`layer_norm`]; accumulates into `d_gain`/`d_bias` and returns
/// the input gradient.
pub fn layer_norm_backward(
    dy: &Array2<f64>,
    cache: &LnCache,
    gain: &Array2<f64>,
    d_gain: &mut Array2<f64>,
    d_bias: &mut Array2<f64>,
) -> Array2<f64> {
    *d_gain += &(dy * &cache.xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
    *d_bias += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
    let h = dy.ncols() as f64;
    let dxhat = dy * gain;
    let mut dx = Array2::zeros(dy.raw_dim());
    for i in 0..dy.nrows() {
        let dxh = dxhat.row(i);
        let xh = cache.xhat.row(i);
        let mean_d = dxh.sum() / h;
        let mean_dx = dxh.dot(&xh) / h;
        let s = cache.inv_std[i];
        for j in 0..dy.ncols() {
            dx[[i, j]] = s * (dxh[j] - mean_d - xh[j] * mean_dx);
        }
    }
    dx
}

pub fn sum_rows(x: &Array2<f64>) -> Array2<f64> {
    x.sum_axis(Axis(0)).insert_axis(Axis(0))
}

pub fn dot(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.dot(&b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn gelu_derivative_matches_differences() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn softmax_is_stable() {
        let p = softmax(&[1000.0, 1000.0, 1000.0]);
        assert!(p.iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
        assert!((log_sum_exp(&[0.0, 0.0]) - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn layer_norm_backward_matches_differences() {
        let x = array![[0.3, -1.2, 2.0, 0.5], [1.0, 1.5, -0.5, 0.1]];
        let g = array![[1.1, 0.9, -0.3, 0.7]];
        let b = array![[0.1, 0.0, -0.2, 0.3]];
        let w = array![[0.5, -1.0, 0.25, 2.0], [1.5, 0.3, -0.7, 0.2]];
        let loss = |x: &Array2<f64>| (&layer_norm(x, &g, &b).0 * &w).sum();
        let (_, cache) = layer_norm(&x, &g, &b);
        let mut dg = Array2::zeros(g.raw_dim());
        let mut db = Array2::zeros(b.raw_dim());
        let dx = layer_norm_backward(&w, &cache, &g, &mut dg, &mut db);
        let h = 1e-6;
        for i in 0..2 {
            for j in 0..4 {
                let mut xp = x.clone();
                xp[[i, j]] += h;
                let mut xm = x.clone();
                xm[[i, j]] -= h;
                let fd = (loss(&xp) - loss(&xm)) / (2.0 * h);
                assert!((fd - dx[[i, j]]).abs() < 1e-7, "{fd} vs {}", dx[[i, j]]);
            }
        }
    }
}
