use crate::error::{Error, Result};
use crate::numerics::layers::ParamStore;
use crate::numerics::tensor::Tensor;

/// Adam moment estimates for every parameter in a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        Self::with_hyper(params, 0.9, 0.999, 1e-8)
    }

    pub fn with_hyper(params: &ParamStore, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Self { m: zeros.clone(), v: zeros, step: 0, beta1, beta2, epsilon }
    }
}

/// One bias-corrected Adam update. Nothing is modified if any gradient is non-finite.
pub fn adam_step(params: &mut ParamStore, grads: &[Tensor], state: &mut AdamState, lr: f64) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::Shape("adam: parameter, gradient and moment counts differ".into()));
    }
    for ((id, name, p), g) in params.iter().zip(grads) {
        if p.shape() != g.shape() || state.m[id.index()].shape() != p.shape() {
            return Err(Error::Shape(format!("adam: gradient shape for {name}")));
        }
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("gradient of {name}")));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.epsilon);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let ids: Vec<_> = params.ids().collect();
    for (k, id) in ids.into_iter().enumerate() {
        let g = grads[k].data();
        let m = state.m[k].data_mut();
        let v = state.v[k].data_mut();
        let p = params.get_mut(id).data_mut();
        for j in 0..p.len() {
            m[j] = b1 * m[j] + (1.0 - b1) * g[j];
            v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
            let mh = m[j] / c1;
            let vh = v[j] / c2;
            p[j] -= lr * mh / (vh.sqrt() + eps);
        }
    }
    Ok(())
}

/// Scales gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().flat_map(|g| g.data().iter()).map(|v| v * v).sum::<f64>().sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| g.data_mut().iter_mut().for_each(|v| *v *= s));
    }
    norm
}

/// `init_lr * decay_rate^(step / decay_interval)` with a real-valued exponent.
pub fn exp_decay_lr(step: u64, init_lr: f64, decay_rate: f64, decay_interval: u64) -> f64 {
    init_lr * decay_rate.powf(step as f64 / decay_interval as f64)
}
