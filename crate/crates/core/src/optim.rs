//! Shared pieces of the training loops: the supervised loss, plain gradient
//! descent over named leaves and the non-finite guard.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::data::TaskKind;
use crate::error::{Error, Result};
use crate::model::{Affine, GraphBatch, ParamSet};
use crate::tensor::{Tape, Tensor, Var};

/// Masked BCE-with-logits (classification) or masked MSE (regression).
pub fn task_loss(tape: &mut Tape, pred: Var, batch: &GraphBatch, kind: TaskKind) -> Result<Var> {
    let targets = Arc::new(batch.dense_targets());
    let mask = batch.label_mask.clone();
    match kind {
        TaskKind::Classification => tape.bce_with_logits(pred, targets, mask),
        TaskKind::Regression => tape.mse(pred, targets, mask),
    }
}

/// `theta <- theta - lr * grad` for every leaf that has a gradient entry.
pub fn sgd_step(params: &mut ParamSet, grads: &BTreeMap<String, Tensor>, lr: f64) {
    for (name, leaf) in params.leaves_mut() {
        if let Some(g) = grads.get(&name) {
            leaf.add_assign_scaled(g, -lr);
        }
    }
}

pub(crate) fn sgd_affine(a: &mut Affine, prefix: &str, grads: &BTreeMap<String, Tensor>, lr: f64) {
    if let Some(g) = grads.get(&format!("{prefix}.weight")) {
        a.weight.add_assign_scaled(g, -lr);
    }
    if let Some(g) = grads.get(&format!("{prefix}.bias")) {
        a.bias.add_assign_scaled(g, -lr);
    }
}

pub(crate) fn bind_affine(tape: &mut Tape, prefix: &str, a: &Affine) -> crate::model::BoundAffine {
    crate::model::BoundAffine {
        weight: tape.param(format!("{prefix}.weight"), a.weight.clone(), true),
        bias: tape.param(format!("{prefix}.bias"), a.bias.clone(), true),
    }
}

pub fn ensure_finite(value: f64, phase: &str, epoch: usize, batch: usize) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFiniteLoss {
            phase: phase.to_string(),
            epoch,
            batch,
        })
    }
}
