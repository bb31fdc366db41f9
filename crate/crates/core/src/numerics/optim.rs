use alloc::vec::Vec;

use super::{Scalar, Tensor};
use crate::params::ParamStore;
use crate::{Error, Result};

/// AdamW hyper-parameters and per-parameter moments.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState<T> {
    pub step_count: u64,
    pub first_moment: Vec<Tensor<T>>,
    pub second_moment: Vec<Tensor<T>>,
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    pub weight_decay: T,
}

impl<T: Scalar> AdamWState<T> {
    pub fn new(store: &ParamStore<T>, lr: T, weight_decay: T) -> Self {
        let zeros: Vec<Tensor<T>> = store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        Self {
            step_count: 0,
            second_moment: zeros.clone(),
            first_moment: zeros,
            lr,
            beta1: T::c(0.9),
            beta2: T::c(0.999),
            eps: T::c(1e-8),
            weight_decay,
        }
    }
}

/// One decoupled-weight-decay Adam update of every parameter in `store`.
pub fn adamw_step<T: Scalar>(store: &mut ParamStore<T>, grads: &[Tensor<T>], state: &mut AdamWState<T>) -> Result<()> {
    if grads.len() != store.len() || state.first_moment.len() != store.len() || state.second_moment.len() != store.len() {
        return Err(Error::dim(
            "adamw_step",
            &[store.len(), state.first_moment.len()],
            &[grads.len()],
        ));
    }
    for ((id, p), g) in store.iter().zip(grads) {
        if p.value.shape() != g.shape() || state.first_moment[id.0].shape() != g.shape() {
            return Err(Error::dim("adamw_step", p.value.shape(), g.shape()));
        }
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let bc1 = T::one() - b1.powi(t);
    let bc2 = T::one() - b2.powi(t);
    let decay = T::one() - state.lr * state.weight_decay;
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for id in ids {
        let g = grads[id.0].data();
        let m = state.first_moment[id.0].data_mut();
        for (mi, &gi) in m.iter_mut().zip(g) {
            *mi = b1 * *mi + (T::one() - b1) * gi;
        }
        let v = state.second_moment[id.0].data_mut();
        for (vi, &gi) in v.iter_mut().zip(g) {
            *vi = b2 * *vi + (T::one() - b2) * gi * gi;
        }
        let m = state.first_moment[id.0].data();
        let v = state.second_moment[id.0].data();
        let p = store.get_mut(id).data_mut();
        for ((pi, &mi), &vi) in p.iter_mut().zip(m).zip(v) {
            let mhat = mi / bc1;
            let vhat = vi / bc2;
            *pi = *pi * decay - state.lr * mhat / (vhat.sqrt() + state.eps);
        }
    }
    Ok(())
}
