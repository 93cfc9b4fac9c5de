//! Central finite-difference gradient checking for any [`Parameters`] type.

use crate::params::Parameters;

/// Gradients whose norm falls below this are compared in absolute terms;
/// central differences carry roughly 1e-10 of rounding noise.
pub const NORM_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct TensorCheck {
    pub name: String,
    /// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖, NORM_FLOOR)`.
    pub rel_error: f64,
    pub analytic_norm: f64,
}

#[derive(Debug, Clone)]
pub struct GradReport {
    pub tensors: Vec<TensorCheck>,
}

impl GradReport {
    pub fn max_rel_error(&self) -> f64 {
        self.tensors.iter().map(|t| t.rel_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&TensorCheck> {
        self.tensors.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

/// Numerical gradient of `loss` at `params` by central differences.
pub fn numeric_gradient<P: Parameters>(params: &P, loss: impl Fn(&P) -> f64, step: f64) -> P {
    let mut grad = params.zeros_like();
    let mut probe = params.clone();
    let n_tensors = params.tensors().len();
    for t in 0..n_tensors {
        let len = params.tensors()[t].len();
        for i in 0..len {
            let orig = flat(&mut probe, t, i);
            set(&mut probe, t, i, orig + step);
            let up = loss(&probe);
            set(&mut probe, t, i, orig - step);
            let down = loss(&probe);
            set(&mut probe, t, i, orig);
            set(&mut grad, t, i, (up - down) / (2.0 * step));
        }
    }
    grad
}

fn flat<P: Parameters>(p: &mut P, t: usize, i: usize) -> f64 {
    let mut ts = p.tensors_mut();
    let tensor = &mut ts[t];
    let cols = tensor.ncols();
    tensor[[i / cols, i % cols]]
}

fn set<P: Parameters>(p: &mut P, t: usize, i: usize, v: f64) {
    let mut ts = p.tensors_mut();
    let tensor = &mut ts[t];
    let cols = tensor.ncols();
    tensor[[i / cols, i % cols]] = v;
}

/// Compare `analytic` with a central-difference estimate, tensor by tensor.
pub fn check<P: Parameters>(params: &P, loss: impl Fn(&P) -> f64, analytic: &P, step: f64) -> GradReport {
    let numeric = numeric_gradient(params, loss, step);
    let infos = params.infos();
    let tensors = analytic
        .tensors()
        .into_iter()
        .zip(numeric.tensors())
        .zip(infos)
        .map(|((a, n), info)| {
            let diff = (a - n).iter().map(|v| v * v).sum::<f64>().sqrt();
            let an = a.iter().map(|v| v * v).sum::<f64>().sqrt();
            let nn = n.iter().map(|v| v * v).sum::<f64>().sqrt();
            let rel_error = diff / an.max(nn).max(NORM_FLOOR);
            TensorCheck { name: info.name, rel_error, analytic_norm: an }
        })
        .collect();
    GradReport { tensors }
}
