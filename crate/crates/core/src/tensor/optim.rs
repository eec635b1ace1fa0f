use super::{ParamStore, Real, Tensor};
use crate::error::{Error, Result};

/// AdamW hyperparameters (decoupled weight decay).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub lr: Real,
    pub beta1: Real,
    pub beta2: Real,
    pub eps: Real,
    pub weight_decay: Real,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

/// First/second moments and step count for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Real>,
    pub v: Vec<Real>,
    pub step: u64,
}

impl AdamState {
    pub fn zeros(len: usize) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }
}

/// One AdamW update of `params` in place.
///
/// The decay `p <- p - lr * wd * p` is applied before, and independently of,
/// the bias-corrected adaptive step.
pub fn adamw_step(
    params: &mut [Real],
    grads: &[Real],
    state: &mut AdamState,
    hp: &AdamW,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() || state.v.len() != params.len()
    {
        return Err(Error::Contract(format!(
            "adamw_step: params {}, grads {}, m {}, v {} must all match",
            params.len(),
            grads.len(),
            state.m.len(),
            state.v.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - hp.beta1.powi(t);
    let bc2 = 1.0 - hp.beta2.powi(t);
    let decay = 1.0 - hp.lr * hp.weight_decay;
    for i in 0..params.len() {
        let g = grads[i];
        params[i] *= decay;
        state.m[i] = hp.beta1 * state.m[i] + (1.0 - hp.beta1) * g;
        state.v[i] = hp.beta2 * state.v[i] + (1.0 - hp.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= hp.lr * m_hat / (v_hat.sqrt() + hp.eps);
    }
    Ok(())
}

impl AdamW {
    pub fn init_state(&self, store: &ParamStore) -> Vec<AdamState> {
        store
            .iter()
            .map(|(_, _, t)| AdamState::zeros(t.numel()))
            .collect()
    }

    /// Updates every trainable parameter that currently holds a gradient.
    /// Parameters that are frozen or received no gradient are left untouched.
    pub fn step(&self, store: &mut ParamStore, states: &mut [AdamState]) -> Result<()> {
        if states.len() != store.len() {
            return Err(Error::Contract(format!(
                "optimizer has {} states for {} parameters",
                states.len(),
                store.len()
            )));
        }
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let tensor: &mut Tensor = store.get_mut(id);
            if !tensor.requires_grad() {
                continue;
            }
            let Some(grad) = tensor.grad().map(<[Real]>::to_vec) else {
                continue;
            };
            adamw_step(tensor.data_mut(), &grad, &mut states[id.index()], self)?;
        }
        Ok(())
    }
}
