//! Adam with decoupled weight decay, learning-rate schedules and gradient
//! clipping.

use crate::error::TrainError;
use crate::params::Parameters;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

#[derive(Debug, Clone)]
pub struct AdamState<P> {
    pub m: P,
    pub v: P,
    pub step: u64,
}

impl<P: Parameters> AdamState<P> {
    pub fn new(params: &P) -> AdamState<P> {
        AdamState { m: params.zeros_like(), v: params.zeros_like(), step: 0 }
    }
}

fn check_shapes<P: Parameters>(params: &P, other: &P) -> Result<(), TrainError> {
    for ((info, a), b) in params.infos().into_iter().zip(params.tensors()).zip(other.tensors()) {
        if a.dim() != b.dim() {
            return Err(TrainError::ShapeMismatch { name: info.name, expected: a.dim(), found: b.dim() });
        }
    }
    Ok(())
}

/// One Adam update with bias correction. Decay is applied as a separate
/// `lr * weight_decay * param` term, skipped for tensors marked no-decay.
/// Frozen tensors are left untouched, moments included.
pub fn adam_step<P: Parameters>(
    params: &mut P,
    grads: &P,
    state: &mut AdamState<P>,
    config: &AdamConfig,
    lr: f64,
) -> Result<(), TrainError> {
    check_shapes(params, grads)?;
    check_shapes(params, &state.m)?;
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - config.beta1.powi(t);
    let c2 = 1.0 - config.beta2.powi(t);
    let infos = params.infos();
    let frozen = params.frozen();
    let g_all = grads.tensors();
    let m_all = state.m.tensors_mut();
    let v_all = state.v.tensors_mut();
    for ((((p, g), m), v), (info, frozen)) in
        params.tensors_mut().into_iter().zip(g_all).zip(m_all).zip(v_all).zip(infos.iter().zip(frozen))
    {
        if frozen {
            continue;
        }
        let decay = if info.decay { config.weight_decay } else { 0.0 };
        ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
            *m = config.beta1 * *m + (1.0 - config.beta1) * g;
            *v = config.beta2 * *v + (1.0 - config.beta2) * g * g;
            let update = (*m / c1) / ((*v / c2).sqrt() + config.eps);
            *p -= lr * (update + decay * *p);
        });
    }
    Ok(())
}

/// Scale `grads` so its global L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm<P: Parameters>(grads: &mut P, max_norm: f64) -> f64 {
    let norm = grads.sq_norm().sqrt();
    if norm > max_norm && norm > 0.0 {
        grads.scale(max_norm / norm);
    }
    norm
}

/// Linear warmup from 0 to `base_lr` over the first `warmup_fraction` of
/// steps, then linear decay to 0 at `total_steps`.
pub fn warmup_linear_lr(step: usize, total_steps: usize, base_lr: f64, warmup_fraction: f64) -> f64 {
    if total_steps == 0 {
        return 0.0;
    }
    let step = step.min(total_steps) as f64;
    let total = total_steps as f64;
    let warm = warmup_fraction * total;
    if step < warm {
        base_lr * step / warm
    } else if total > warm {
        base_lr * (total - step) / (total - warm)
    } else {
        base_lr
    }
}

/// Triangle wave: 0 at cycle start, `base_lr` at half cycle, 0 at cycle end.
pub fn triangular_lr(step: usize, base_lr: f64, steps_per_cycle: usize) -> f64 {
    if steps_per_cycle == 0 {
        return base_lr;
    }
    let pos = (step % steps_per_cycle) as f64;
    let half = steps_per_cycle as f64 / 2.0;
    if pos <= half {
        base_lr * pos / half
    } else {
        base_lr * (steps_per_cycle as f64 - pos) / half
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Schedule {
    WarmupLinear { warmup_fraction: f64 },
    Triangular { steps_per_cycle: usize },
    Constant,
}

impl Schedule {
    pub fn lr(&self, step: usize, total_steps: usize, base_lr: f64) -> f64 {
        match *self {
            Schedule::WarmupLinear { warmup_fraction } => warmup_linear_lr(step, total_steps, base_lr, warmup_fraction),
            Schedule::Triangular { steps_per_cycle } => triangular_lr(step, base_lr, steps_per_cycle),
            Schedule::Constant => base_lr,
        }
    }
}
