use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamParams {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, one pair per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<S> {
    pub m: Vec<Tensor<S>>,
    pub v: Vec<Tensor<S>>,
    pub step: u64,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(params: &ParamStore<S>) -> Self {
        let zeros: Vec<Tensor<S>> = params.iter().map(|(_, t)| Tensor::zeros(t.shape().to_vec())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// One Adam update with bias correction. Weight decay is decoupled and
/// applied first: `p ← p − lr·wd·p`, then `p ← p − lr·m̂/(√v̂ + eps)`.
///
/// Non-finite gradients abort the step before anything is modified.
pub fn adam_step<S: Scalar>(
    params: &mut ParamStore<S>,
    grads: &[Tensor<S>],
    state: &mut AdamState<S>,
    hp: &AdamParams,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::dim(format!(
            "{} gradients and {} moment slots for {} parameters",
            grads.len(),
            state.m.len(),
            params.len()
        )));
    }
    for (id, g) in params.ids().zip(grads) {
        if g.shape() != params.get(id).shape() {
            return Err(Error::dim(format!("gradient shape for `{}`", params.name(id))));
        }
        if !g.is_finite() {
            return Err(Error::Numeric(format!("non-finite gradient for `{}`", params.name(id))));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (lit::<S>(hp.beta1), lit::<S>(hp.beta2));
    let bc1 = S::one() - b1.powi(t);
    let bc2 = S::one() - b2.powi(t);
    let (lr, decay, eps) = (lit::<S>(hp.lr), lit::<S>(hp.lr * hp.weight_decay), lit::<S>(hp.eps));
    let ids: Vec<_> = params.ids().collect();
    for (i, id) in ids.into_iter().enumerate() {
        let p = params.get_mut(id).data_mut();
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        for (j, &g) in grads[i].data().iter().enumerate() {
            m[j] = b1 * m[j] + (S::one() - b1) * g;
            v[j] = b2 * v[j] + (S::one() - b2) * g * g;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            p[j] = p[j] - decay * p[j];
            p[j] = p[j] - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
