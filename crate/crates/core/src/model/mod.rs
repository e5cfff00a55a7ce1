//! GIN encoder, prediction head, mean-pool readout and weight interpolation.

mod batch;
mod checkpoint;
mod params;

pub use batch::GraphBatch;
pub use checkpoint::{Checkpoint, Manifest, TensorEntry};
pub use params::{interpolate, layer_param_names, Affine, Architecture, GinLayer, ParamGroup, ParamSet};

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{DropoutKey, Tape, Tensor, Var};

/// Forward-pass mode. Dropout is only applied in `Train`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Mode {
    Eval,
    Train {
        dropout_rate: f64,
        seed: u64,
        epoch: u64,
        batch: u64,
    },
}

#[derive(Clone, Copy, Debug)]
pub struct BoundAffine {
    pub weight: Var,
    pub bias: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct BoundLayer {
    pub eps: Var,
    pub lin1: BoundAffine,
    pub lin2: BoundAffine,
}

/// A [`ParamSet`] registered on a tape.
#[derive(Clone, Debug)]
pub struct BoundParams {
    pub embed: BoundAffine,
    pub layers: Vec<BoundLayer>,
    pub head: Option<BoundAffine>,
    pub in_dim: usize,
}

impl ParamSet {
    /// Registers every leaf on `tape` under its name; `trainable(name)` decides `requires_grad`.
    pub fn bind(&self, tape: &mut Tape, trainable: impl Fn(&str) -> bool) -> BoundParams {
        let bind_affine = |tape: &mut Tape, prefix: &str, a: &Affine| {
            let wn = format!("{prefix}.weight");
            let bn = format!("{prefix}.bias");
            let weight = tape.param(&wn, a.weight.clone(), trainable(&wn));
            let bias = tape.param(&bn, a.bias.clone(), trainable(&bn));
            BoundAffine { weight, bias }
        };
        let embed = bind_affine(tape, "embed", &self.embed);
        let layers = self
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let en = format!("layer.{i}.eps");
                let eps = tape.param(&en, l.eps.clone(), trainable(&en));
                BoundLayer {
                    eps,
                    lin1: bind_affine(tape, &format!("layer.{i}.mlp.0"), &l.lin1),
                    lin2: bind_affine(tape, &format!("layer.{i}.mlp.1"), &l.lin2),
                }
            })
            .collect();
        let head = self.head.as_ref().map(|h| bind_affine(tape, "head", h));
        BoundParams {
            embed,
            layers,
            head,
            in_dim: self.arch.in_dim,
        }
    }
}

pub fn affine(tape: &mut Tape, a: &BoundAffine, x: Var) -> Result<Var> {
    let xw = tape.matmul(x, a.weight)?;
    tape.add_row(xw, a.bias)
}

/// Node-level encoder output: input projection, then per layer
/// `h <- MLP((1 + eps) h_v + sum_{u in N(v)} h_u)`, ReLU between layers, dropout
/// after every layer in train mode.
pub fn encode_nodes(
    tape: &mut Tape,
    params: &BoundParams,
    x: Var,
    edges: &Arc<[(usize, usize)]>,
    mode: Mode,
) -> Result<Var> {
    let width = tape.value(x).cols();
    if width != params.in_dim {
        return Err(Error::contract(format!(
            "node features have {width} columns, encoder expects {}",
            params.in_dim
        )));
    }
    let mut h = affine(tape, &params.embed, x)?;
    let last = params.layers.len().saturating_sub(1);
    for (i, layer) in params.layers.iter().enumerate() {
        let agg = tape.gin_combine(h, layer.eps, edges.clone())?;
        let z = affine(tape, &layer.lin1, agg)?;
        let z = tape.relu(z);
        h = affine(tape, &layer.lin2, z)?;
        if i != last {
            h = tape.relu(h);
        }
        if let Mode::Train {
            dropout_rate,
            seed,
            epoch,
            batch,
        } = mode
        {
            let key = DropoutKey {
                seed,
                epoch,
                batch,
                op_id: i as u64,
            };
            h = tape.dropout(h, dropout_rate, key)?;
        }
    }
    Ok(h)
}

/// Graph embeddings (`graph_count x hidden`) by mean pooling the node states.
pub fn encode(tape: &mut Tape, params: &BoundParams, batch: &GraphBatch, mode: Mode) -> Result<Var> {
    let x = tape.constant(batch.node_feats.clone());
    let h = encode_nodes(tape, params, x, &batch.edges, mode)?;
    tape.segment_mean(h, batch.segment.clone(), batch.graph_count)
}

/// Head output: raw logits for classification, raw values for regression.
pub fn predict(tape: &mut Tape, head: &BoundAffine, embeddings: Var) -> Result<Var> {
    let w = tape.value(head.weight).rows();
    let e = tape.value(embeddings).cols();
    if w != e {
        return Err(Error::contract(format!(
            "embedding width {e} does not match head input width {w}"
        )));
    }
    affine(tape, head, embeddings)
}

/// Eval-mode graph embeddings without recording gradients.
pub fn embed_graphs(params: &ParamSet, batch: &GraphBatch) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, |_| false);
    let e = encode(&mut tape, &bound, batch, Mode::Eval)?;
    Ok(tape.value(e).clone())
}

/// Eval-mode head outputs (`graph_count x tasks`).
pub fn predict_scores(params: &ParamSet, batch: &GraphBatch) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, |_| false);
    let head = bound
        .head
        .ok_or_else(|| Error::contract("parameter set has no prediction head"))?;
    let e = encode(&mut tape, &bound, batch, Mode::Eval)?;
    let p = predict(&mut tape, &head, e)?;
    Ok(tape.value(p).clone())
}
