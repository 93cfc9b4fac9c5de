//! Multinomial logistic regression over pooled span features.
//!
//! Objective: summed cross-entropy plus `‖W‖² / (2C)`, bias unpenalized.
//! Solved by damped Newton iterations with a backtracking line search.

use nalgebra::{DMatrix, DVector};

use super::PooledFeatures;
use crate::data::Label;
use crate::error::ModelError;
use crate::metrics::ProbTriple;

pub const DEFAULT_C: f64 = 0.1;
pub const GRAD_TOL: f64 = 1e-6;
pub const MAX_ITER: usize = 1000;

const N_FEAT: usize = 6;
const N_CLASS: usize = 3;
const N_PARAM: usize = N_CLASS * (N_FEAT + 1);

#[derive(Debug, Clone, PartialEq)]
pub struct LrModel {
    /// One row per class (A, B, N).
    pub weight: [[f64; N_FEAT]; N_CLASS],
    pub bias: [f64; N_CLASS],
    pub c: f64,
}

impl LrModel {
    pub fn zeros(c: f64) -> LrModel {
        LrModel { weight: [[0.0; N_FEAT]; N_CLASS], bias: [0.0; N_CLASS], c }
    }

    pub fn logits(&self, f: &PooledFeatures) -> [f64; 3] {
        let mut z = self.bias;
        for (k, zk) in z.iter_mut().enumerate() {
            *zk += self.weight[k].iter().zip(&f.0).map(|(w, x)| w * x).sum::<f64>();
        }
        z
    }

    /// Flattened parameters: class-major, six weights then the bias.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(N_PARAM);
        for k in 0..N_CLASS {
            v.extend_from_slice(&self.weight[k]);
            v.push(self.bias[k]);
        }
        v
    }

    pub fn from_vec(v: &[f64], c: f64) -> LrModel {
        assert_eq!(v.len(), N_PARAM);
        let mut m = LrModel::zeros(c);
        for k in 0..N_CLASS {
            let row = &v[k * (N_FEAT + 1)..(k + 1) * (N_FEAT + 1)];
            m.weight[k].copy_from_slice(&row[..N_FEAT]);
            m.bias[k] = row[N_FEAT];
        }
        m
    }
}

pub fn qa_probabilities(model: &LrModel, f: &PooledFeatures) -> ProbTriple {
    ProbTriple::softmax(model.logits(f))
}

pub fn lr_objective(model: &LrModel, features: &[PooledFeatures], labels: &[Label]) -> f64 {
    let mut loss = 0.0;
    for (f, y) in features.iter().zip(labels) {
        let z = model.logits(f);
        loss += crate::nn::log_sum_exp(&z) - z[y.index()];
    }
    let sq: f64 = model.weight.iter().flatten().map(|w| w * w).sum();
    loss + sq / (2.0 * model.c)
}

/// Gradient of [`lr_objective`] in the layout of [`LrModel::to_vec`].
pub fn lr_gradient(model: &LrModel, features: &[PooledFeatures], labels: &[Label]) -> Vec<f64> {
    let mut g = vec![0.0; N_PARAM];
    for (f, y) in features.iter().zip(labels) {
        let mut p = crate::nn::softmax(&model.logits(f));
        p[y.index()] -= 1.0;
        for (k, pk) in p.iter().enumerate() {
            let base = k * (N_FEAT + 1);
            for (gj, x) in g[base..base + N_FEAT].iter_mut().zip(&f.0) {
                *gj += pk * x;
            }
            g[base + N_FEAT] += pk;
        }
    }
    for k in 0..N_CLASS {
        for j in 0..N_FEAT {
            g[k * (N_FEAT + 1) + j] += model.weight[k][j] / model.c;
        }
    }
    g
}

fn hessian(model: &LrModel, features: &[PooledFeatures]) -> DMatrix<f64> {
    let mut h = DMatrix::zeros(N_PARAM, N_PARAM);
    for f in features {
        let p = crate::nn::softmax(&model.logits(f));
        let mut x = [1.0; N_FEAT + 1];
        x[..N_FEAT].copy_from_slice(&f.0);
        for k in 0..N_CLASS {
            for l in 0..N_CLASS {
                let s = if k == l { p[k] * (1.0 - p[k]) } else { -p[k] * p[l] };
                for i in 0..=N_FEAT {
                    for j in 0..=N_FEAT {
                        h[(k * (N_FEAT + 1) + i, l * (N_FEAT + 1) + j)] += s * x[i] * x[j];
                    }
                }
            }
        }
    }
    for k in 0..N_CLASS {
        for j in 0..N_FEAT {
            let i = k * (N_FEAT + 1) + j;
            h[(i, i)] += 1.0 / model.c;
        }
    }
    h
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Fit from zero initialization until the gradient ∞-norm drops below
/// [`GRAD_TOL`] or [`MAX_ITER`] iterations pass.
pub fn fit_span_lr(features: &[PooledFeatures], labels: &[Label], c: f64) -> Result<LrModel, ModelError> {
    if features.len() != labels.len() {
        return Err(ModelError::LengthMismatch { features: features.len(), labels: labels.len() });
    }
    if !(c > 0.0 && c.is_finite()) {
        return Err(ModelError::NonFinite("regularization C"));
    }
    if features.iter().any(|f| f.0.iter().any(|v| !v.is_finite())) {
        return Err(ModelError::NonFinite("pooled features"));
    }
    let first = labels.first().ok_or(ModelError::DegenerateLabels)?;
    if labels.iter().all(|l| l == first) {
        return Err(ModelError::DegenerateLabels);
    }

    let mut model = LrModel::zeros(c);
    let mut obj = lr_objective(&model, features, labels);
    for _ in 0..MAX_ITER {
        let g = lr_gradient(&model, features, labels);
        if inf_norm(&g) < GRAD_TOL {
            break;
        }
        // Shifting all biases together leaves the objective unchanged, so the
        // Hessian is singular along that direction; a small ridge fixes it.
        let mut h = hessian(&model, features);
        let damping = 1e-9 * (1.0 + h.diagonal().max());
        for i in 0..N_PARAM {
            h[(i, i)] += damping;
        }
        let gv = DVector::from_vec(g.clone());
        let dir = match h.cholesky() {
            Some(ch) => -ch.solve(&gv),
            None => -gv.clone(),
        };
        let slope = dir.dot(&gv);
        let theta = DVector::from_vec(model.to_vec());
        let mut t = 1.0;
        let mut accepted = false;
        while t > 1e-12 {
            let cand = LrModel::from_vec((&theta + &dir * t).as_slice(), c);
            let cand_obj = lr_objective(&cand, features, labels);
            if cand_obj <= obj + 1e-4 * t * slope {
                model = cand;
                obj = cand_obj;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    if !obj.is_finite() {
        return Err(ModelError::NonFinite("logistic regression objective"));
    }
    Ok(model)
}
