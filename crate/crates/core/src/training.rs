//! One optimisation step of the full network on a batch of frames.

use alloc::vec::Vec;

use crate::model::{predict_two_round, Model};
use crate::numerics::{adamw_step, AdamWState, Graph, Scalar, Tensor};
use crate::objective::{combined_loss, LossBreakdown};
use crate::{Error, Result};

/// Images and flow renderings `[B,3,H,W]` with binary masks `[B,1,H,W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch<T> {
    pub images: Tensor<T>,
    pub flows: Tensor<T>,
    pub masks: Tensor<T>,
}

impl<T: Scalar> Batch<T> {
    pub fn new(images: Tensor<T>, flows: Tensor<T>, masks: Tensor<T>) -> Result<Self> {
        let s = images.shape();
        if s.len() != 4 || s[1] != 3 {
            return Err(Error::dim("batch images", s, &[0, 3, 0, 0]));
        }
        if flows.shape() != s {
            return Err(Error::dim("batch flows", s, flows.shape()));
        }
        let want = [s[0], 1, s[2], s[3]];
        if masks.shape() != want {
            return Err(Error::dim("batch masks", &want, masks.shape()));
        }
        Ok(Self { images, flows, masks })
    }

    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Loss terms and both probability maps of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput<T> {
    pub loss: LossBreakdown,
    pub round1: Tensor<T>,
    pub round2: Tensor<T>,
}

/// Forward pass, loss and gradients in store order.
pub fn loss_and_gradients<T: Scalar>(model: &Model<T>, batch: &Batch<T>) -> Result<(StepOutput<T>, Vec<Tensor<T>>)> {
    let mut g = Graph::new();
    let image = g.input(batch.images.clone());
    let flow = g.input(batch.flows.clone());
    let target = g.input(batch.masks.clone());
    let out = predict_two_round(&mut g, &model.store, &model.net, image, flow)?;
    let loss = combined_loss(&mut g, out.round2.logits, out.round1.logits, target, &model.config.loss)?;
    let breakdown = loss.breakdown(&g);
    if !breakdown.total.is_finite() {
        return Err(Error::contract("loss is not finite"));
    }
    let grads = g.backward(loss.total)?.for_store(&model.store);
    Ok((
        StepOutput {
            loss: breakdown,
            round1: g.value(out.round1.prob).clone(),
            round2: g.value(out.round2.prob).clone(),
        },
        grads,
    ))
}

/// Forward, backward and one AdamW update.
pub fn train_step<T: Scalar>(model: &mut Model<T>, opt: &mut AdamWState<T>, batch: &Batch<T>) -> Result<StepOutput<T>> {
    let (out, grads) = loss_and_gradients(model, batch)?;
    adamw_step(&mut model.store, &grads, opt)?;
    Ok(out)
}

/// Both probability maps without building gradients.
pub fn predict<T: Scalar>(model: &Model<T>, images: &Tensor<T>, flows: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let mut g = Graph::new();
    let image = g.input(images.clone());
    let flow = g.input(flows.clone());
    let out = predict_two_round(&mut g, &model.store, &model.net, image, flow)?;
    Ok((g.value(out.round1.prob).clone(), g.value(out.round2.prob).clone()))
}
