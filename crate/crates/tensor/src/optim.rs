use crate::params::{Gradients, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Adam hyperparameters with an inverse-square-root schedule and linear
/// warmup.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamConfig {
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Rescale gradients whose global norm exceeds this value.
    pub max_grad_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            peak_lr: 1e-3,
            warmup_steps: 400,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            max_grad_norm: Some(5.0),
        }
    }
}

impl AdamConfig {
    /// Rate for 1-based `step`: linear ramp to `peak_lr` at `warmup_steps`,
    /// then `peak_lr * sqrt(warmup_steps / step)`.
    pub fn learning_rate(&self, step: u64) -> f64 {
        let step = step.max(1) as f64;
        let w = self.warmup_steps.max(1) as f64;
        self.peak_lr * (step / w).min((w / step).sqrt())
    }
}

/// Per-parameter moment buffers.
#[derive(Clone, Debug)]
pub struct AdamState<S = f32> {
    first: Vec<Tensor<S>>,
    second: Vec<Tensor<S>>,
    step: u64,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(params: &ParamStore<S>) -> Self {
        let zeros = |t: &Tensor<S>| Tensor::zeros(t.shape());
        Self {
            first: params.iter().map(|(_, _, t)| zeros(t)).collect(),
            second: params.iter().map(|(_, _, t)| zeros(t)).collect(),
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, i: usize) -> &Tensor<S> {
        &self.first[i]
    }
}

/// One bias-corrected Adam update. Parameters without a gradient entry are
/// treated as having a zero gradient. Returns the learning rate used.
pub fn adam_step<S: Scalar>(
    params: &mut ParamStore<S>,
    grads: &Gradients<S>,
    state: &mut AdamState<S>,
    cfg: &AdamConfig,
) -> f64 {
    state.step += 1;
    let t = state.step as i32;
    let lr = cfg.learning_rate(state.step);
    let clip = match cfg.max_grad_norm {
        Some(max) => {
            let norm = grads.global_norm().as_f64();
            if norm > max {
                max / norm
            } else {
                1.0
            }
        }
        None => 1.0,
    };
    let (b1, b2) = (S::from_f64_lossy(cfg.beta1), S::from_f64_lossy(cfg.beta2));
    let c1 = S::from_f64_lossy(1.0 - cfg.beta1.powi(t));
    let c2 = S::from_f64_lossy(1.0 - cfg.beta2.powi(t));
    let (lr_s, eps, clip) = (
        S::from_f64_lossy(lr),
        S::from_f64_lossy(cfg.eps),
        S::from_f64_lossy(clip),
    );
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        let i = id.0;
        let grad = grads.param(id);
        let m = state.first[i].data_mut();
        let v = state.second[i].data_mut();
        let p = params.get_mut(id).data_mut();
        for j in 0..p.len() {
            let gj = grad.map_or(S::zero(), |g| g.data()[j] * clip);
            m[j] = b1 * m[j] + (S::one() - b1) * gj;
            v[j] = b2 * v[j] + (S::one() - b2) * gj * gj;
            let mhat = m[j] / c1;
            let vhat = v[j] / c2;
            p[j] -= lr_s * mhat / (vhat.sqrt() + eps);
        }
    }
    lr
}
