//! Encoder pretraining: masked node-feature reconstruction scored by scaled
//! cosine error (`ssl`), and supervised multi-task training whose head is
//! discarded afterwards (`supervised`).

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bench::{metric, MetricKind};
use crate::data::{batches, Dataset};
use crate::error::{Error, Result};
use crate::model::{self, affine, Affine, Architecture, Checkpoint, GraphBatch, Mode, ParamSet};
use crate::optim::{bind_affine, ensure_finite, sgd_affine, sgd_step, task_loss};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Paradigm {
    Ssl,
    Supervised,
}

impl Paradigm {
    pub fn tag(self) -> &'static str {
        match self {
            Paradigm::Ssl => "ssl",
            Paradigm::Supervised => "supervised",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub paradigm: Paradigm,
    pub mask_rate: f64,
    pub gamma: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub dropout_rate: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            paradigm: Paradigm::Ssl,
            mask_rate: 0.25,
            gamma: 2.0,
            epochs: 50,
            learning_rate: 0.01,
            batch_size: 32,
            dropout_rate: 0.0,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mask_rate > 0.0 && self.mask_rate < 1.0) {
            return Err(Error::config("mask_rate", "must lie strictly between 0 and 1"));
        }
        if !(self.gamma >= 1.0) {
            return Err(Error::config("gamma", "must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::config("dropout_rate", "must lie in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean batch loss.
    pub loss: f64,
    /// Reconstruction rows skipped for a zero-norm target (ssl).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub skipped_rows: Option<usize>,
    /// Training AUC or RMSE after the epoch (supervised).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_metric: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct PretrainOutput {
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochLog>,
}

/// Scaled cosine error on a tape.
pub struct Sce {
    pub loss: Var,
    /// Rows whose target had zero norm and were left out.
    pub skipped: usize,
}

/// Mean over rows of `(1 - cos(x, x_hat))^gamma`, skipping zero-norm target rows.
/// With every row skipped the loss is a constant zero.
pub fn sce_loss(tape: &mut Tape, x: Var, x_hat: Var, gamma: f64) -> Result<Sce> {
    if tape.value(x).shape() != tape.value(x_hat).shape() {
        return Err(Error::contract(format!(
            "sce_loss shapes differ: {:?} vs {:?}",
            tape.value(x).shape(),
            tape.value(x_hat).shape()
        )));
    }
    if !(gamma >= 1.0) {
        return Err(Error::contract(format!("gamma must be at least 1, got {gamma}")));
    }
    let xv = tape.value(x);
    let keep: Vec<usize> = (0..xv.rows())
        .filter(|&i| xv.row(i).iter().any(|&v| v != 0.0))
        .collect();
    let skipped = xv.rows() - keep.len();
    if keep.is_empty() {
        return Ok(Sce {
            loss: tape.constant(Tensor::scalar(0.0)),
            skipped,
        });
    }
    let (x, x_hat) = if skipped == 0 {
        (x, x_hat)
    } else {
        let idx: Arc<[usize]> = keep.into();
        (tape.gather_rows(x, idx.clone())?, tape.gather_rows(x_hat, idx)?)
    };
    let cos = tape.row_cosine(x, x_hat)?;
    let neg = tape.scale(cos, -1.0);
    let err = tape.add_const(neg, 1.0);
    // cos may overshoot 1 by rounding
    let err = tape.relu(err);
    let err = tape.powf(err, gamma);
    Ok(Sce {
        loss: tape.mean(err),
        skipped,
    })
}

/// Number of rows masked out of `n` at `rate`: `ceil(rate * n)`, at least one.
pub fn masked_count(n: usize, rate: f64) -> usize {
    ((rate * n as f64 - 1e-9).ceil() as usize).clamp(1, n)
}

/// Sorted node indices to mask, drawn without replacement.
pub fn masked_indices(n: usize, rate: f64, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, n, masked_count(n, rate)).into_vec();
    idx.sort_unstable();
    idx
}

/// Copy of `batch` with the chosen node rows overwritten by `token`, plus the
/// chosen indices. The original batch keeps the reconstruction targets.
pub fn mask_nodes(batch: &GraphBatch, mask_rate: f64, seed: u64, token: &[f64]) -> Result<(GraphBatch, Vec<usize>)> {
    if !(mask_rate > 0.0 && mask_rate < 1.0) {
        return Err(Error::contract("mask_rate must lie strictly between 0 and 1"));
    }
    let d = batch.node_feats.cols();
    if token.len() != d {
        return Err(Error::contract(format!("mask token has {} entries, features have {d}", token.len())));
    }
    let idx = masked_indices(batch.node_count(), mask_rate, seed);
    let mut out = batch.clone();
    for &i in &idx {
        out.node_feats.data_mut()[i * d..(i + 1) * d].copy_from_slice(token);
    }
    Ok((out, idx))
}

fn step_seed(seed: u64, epoch: usize, batch: usize) -> u64 {
    seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (batch as u64).wrapping_mul(0xc2b2_ae3d_27d4_eb4f)
}

fn check_arch(ds: &Dataset, arch: &Architecture) -> Result<()> {
    arch.validate()?;
    if arch.in_dim != ds.feature_dim {
        return Err(Error::config(
            "architecture.in_dim",
            format!("is {}, dataset features have width {}", arch.in_dim, ds.feature_dim),
        ));
    }
    Ok(())
}

/// Masked-feature reconstruction through a linear decoder.
pub fn pretrain_ssl(ds: &Dataset, arch: Architecture, cfg: &PretrainConfig) -> Result<PretrainOutput> {
    cfg.validate()?;
    check_arch(ds, &arch)?;
    let mut params = ParamSet::init(arch, cfg.seed)?;
    let mut token = Tensor::zeros(&[1, arch.in_dim]);
    let mut decoder = Affine::init(arch.hidden, arch.in_dim, &mut ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xdec0));
    let all: Vec<usize> = (0..ds.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let mut total = 0.0;
        let mut skipped = 0;
        let epoch_batches = batches(ds, &all, cfg.batch_size, cfg.seed, epoch as u64)?;
        for (b, batch) in epoch_batches.iter().enumerate() {
            let idx: Arc<[usize]> =
                masked_indices(batch.node_count(), cfg.mask_rate, step_seed(cfg.seed, epoch, b)).into();
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape, |_| true);
            let tok = tape.param("mask_token", token.clone(), true);
            let dec = bind_affine(&mut tape, "decoder", &decoder);
            let x = tape.constant(batch.node_feats.clone());
            let xm = tape.replace_rows(x, tok, idx.clone())?;
            let mode = Mode::Train {
                dropout_rate: cfg.dropout_rate,
                seed: cfg.seed,
                epoch: epoch as u64,
                batch: b as u64,
            };
            let h = model::encode_nodes(&mut tape, &bound, xm, &batch.edges, mode)?;
            let rec = affine(&mut tape, &dec, h)?;
            let rec = tape.gather_rows(rec, idx.clone())?;
            let target = tape.gather_rows(x, idx)?;
            let sce = sce_loss(&mut tape, target, rec, cfg.gamma)?;
            total += ensure_finite(tape.value(sce.loss).item(), "pretrain_ssl", epoch, b)?;
            skipped += sce.skipped;
            let grads = tape.grad(sce.loss)?;
            sgd_step(&mut params, &grads, cfg.learning_rate);
            sgd_affine(&mut decoder, "decoder", &grads, cfg.learning_rate);
            if let Some(g) = grads.get("mask_token") {
                token.add_assign_scaled(g, -cfg.learning_rate);
            }
        }
        log.push(EpochLog {
            epoch,
            loss: total / epoch_batches.len() as f64,
            skipped_rows: Some(skipped),
            train_metric: None,
        });
    }
    Ok(PretrainOutput {
        checkpoint: Checkpoint::new(params, Paradigm::Ssl.tag()),
        log,
    })
}

/// Multi-task training on the dataset's own labels; the head is dropped from
/// the returned checkpoint.
pub fn pretrain_supervised(ds: &Dataset, arch: Architecture, cfg: &PretrainConfig) -> Result<PretrainOutput> {
    cfg.validate()?;
    check_arch(ds, &arch)?;
    let mut params = ParamSet::init(arch, cfg.seed)?.with_fresh_head(ds.task_count, cfg.seed);
    let all: Vec<usize> = (0..ds.len()).collect();
    let full = ds.batch(&all)?;
    let kind = MetricKind::for_task(ds.task_kind);
    let mut log = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let mut total = 0.0;
        let epoch_batches = batches(ds, &all, cfg.batch_size, cfg.seed, epoch as u64)?;
        for (b, batch) in epoch_batches.iter().enumerate() {
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape, |_| true);
            let mode = Mode::Train {
                dropout_rate: cfg.dropout_rate,
                seed: cfg.seed,
                epoch: epoch as u64,
                batch: b as u64,
            };
            let emb = model::encode(&mut tape, &bound, batch, mode)?;
            let head = bound.head.expect("head was just attached");
            let pred = model::predict(&mut tape, &head, emb)?;
            let loss = task_loss(&mut tape, pred, batch, ds.task_kind)?;
            total += ensure_finite(tape.value(loss).item(), "pretrain_supervised", epoch, b)?;
            let grads = tape.grad(loss)?;
            sgd_step(&mut params, &grads, cfg.learning_rate);
        }
        let scores = model::predict_scores(&params, &full)?;
        let train_metric = metric(kind, &scores, &full.dense_targets(), &full.label_mask).ok();
        log.push(EpochLog {
            epoch,
            loss: total / epoch_batches.len() as f64,
            skipped_rows: None,
            train_metric,
        });
    }
    Ok(PretrainOutput {
        checkpoint: Checkpoint::new(params.without_head(), Paradigm::Supervised.tag()),
        log,
    })
}

/// Runs the paradigm named in `cfg`.
pub fn pretrain(ds: &Dataset, arch: Architecture, cfg: &PretrainConfig) -> Result<PretrainOutput> {
    match cfg.paradigm {
        Paradigm::Ssl => pretrain_ssl(ds, arch, cfg),
        Paradigm::Supervised => pretrain_supervised(ds, arch, cfg),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{generate, GenConfig, PlantedRule};

    fn sce_value(x: Tensor, y: Tensor, gamma: f64) -> (f64, usize) {
        let mut tape = Tape::new();
        let a = tape.constant(x);
        let b = tape.constant(y);
        let s = sce_loss(&mut tape, a, b, gamma).unwrap();
        (tape.value(s.loss).item(), s.skipped)
    }

    #[test]
    fn sce_reference_values() {
        let x = Tensor::matrix(2, 2, vec![1.0, 2.0, -3.0, 0.5]);
        assert!(sce_value(x.clone(), x.clone(), 3.0).0 < 1e-40);
        let (v, _) = sce_value(Tensor::matrix(1, 2, vec![1.0, 0.0]), Tensor::matrix(1, 2, vec![0.0, 5.0]), 1.0);
        assert!((v - 1.0).abs() < 1e-15);
        let (v, _) = sce_value(Tensor::matrix(1, 2, vec![1.0, 1.0]), Tensor::matrix(1, 2, vec![-2.0, -2.0]), 2.0);
        assert!((v - 4.0).abs() < 1e-12);
    }

    #[test]
    fn sce_skips_zero_targets() {
        let x = Tensor::matrix(2, 2, vec![0.0, 0.0, 1.0, 0.0]);
        let y = Tensor::matrix(2, 2, vec![1.0, 1.0, 0.0, 1.0]);
        let (v, skipped) = sce_value(x, y, 1.0);
        assert_eq!(skipped, 1);
        assert!((v - 1.0).abs() < 1e-15);
        let (v, skipped) = sce_value(Tensor::zeros(&[3, 2]), Tensor::full(&[3, 2], 1.0), 2.0);
        assert_eq!((v, skipped), (0.0, 3));
    }

    #[test]
    fn mask_counts() {
        for n in 1..40 {
            assert_eq!(masked_count(n, 1.0 / n as f64), 1);
            for rate in [0.1, 0.25, 0.5, 0.9] {
                let c = masked_count(n, rate) as f64 / n as f64;
                assert!(c >= rate - 1e-12 && c <= rate + 1.0 / n as f64 + 1e-12, "n={n} rate={rate}");
            }
        }
        assert_eq!(masked_indices(30, 0.3, 4), masked_indices(30, 0.3, 4));
    }

    #[test]
    fn mask_nodes_replaces_rows_with_the_token() {
        let ds = generate(&GenConfig { size: 3, feature_dim: 2, ..Default::default() }).unwrap();
        let batch = ds.batch(&[0, 1, 2]).unwrap();
        let (masked, idx) = mask_nodes(&batch, 0.25, 9, &[7.0, 7.0]).unwrap();
        assert_eq!(idx.len(), masked_count(batch.node_count(), 0.25));
        for i in 0..batch.node_count() {
            if idx.contains(&i) {
                assert_eq!(masked.node_feats.row(i), &[7.0, 7.0]);
            } else {
                assert_eq!(masked.node_feats.row(i), batch.node_feats.row(i));
            }
        }
        assert!(mask_nodes(&batch, 1.0, 0, &[0.0, 0.0]).is_err());
    }

    fn small_arch(in_dim: usize) -> Architecture {
        Architecture { in_dim, hidden: 16, layers: 2 }
    }

    #[test]
    fn ssl_smoke_and_determinism() {
        let ds = generate(&GenConfig { size: 10, ..Default::default() }).unwrap();
        let cfg = PretrainConfig { epochs: 1, ..Default::default() };
        let a = pretrain_ssl(&ds, small_arch(8), &cfg).unwrap();
        let b = pretrain_ssl(&ds, small_arch(8), &cfg).unwrap();
        assert_eq!(a.checkpoint.to_bytes().unwrap(), b.checkpoint.to_bytes().unwrap());
        assert_eq!(a.checkpoint.pretraining, "ssl");
        assert!(a.checkpoint.params.head.is_none());
        let back = Checkpoint::from_bytes(&a.checkpoint.to_bytes().unwrap()).unwrap();
        assert_eq!(back.params, a.checkpoint.params);
    }

    #[test]
    fn ssl_loss_descends() {
        let ds = generate(&GenConfig { size: 200, seed: 1, ..Default::default() }).unwrap();
        let cfg = PretrainConfig { epochs: 50, ..Default::default() };
        let out = pretrain_ssl(&ds, small_arch(8), &cfg).unwrap();
        let (first, last) = (out.log[0].loss, out.log[49].loss);
        assert!(last < first, "loss {first} -> {last}");
    }

    #[test]
    fn supervised_learns_mean_sign_and_drops_head() {
        let ds = generate(&GenConfig {
            size: 200,
            rule: PlantedRule::MeanSign,
            seed: 2,
            ..Default::default()
        })
        .unwrap();
        let cfg = PretrainConfig {
            paradigm: Paradigm::Supervised,
            epochs: 50,
            ..Default::default()
        };
        let out = pretrain(&ds, small_arch(8), &cfg).unwrap();
        let auc = out.log.last().unwrap().train_metric.unwrap();
        assert!(auc > 0.9, "train AUC {auc}");
        assert_eq!(out.checkpoint.pretraining, "supervised");
        assert!(out.checkpoint.manifest().tensors.iter().all(|t| !t.name.starts_with("head.")));
        let ssl = pretrain_ssl(&ds, small_arch(8), &PretrainConfig { epochs: 1, ..Default::default() }).unwrap();
        assert_eq!(ssl.checkpoint.params.names(), out.checkpoint.params.names());
    }

    #[test]
    fn rejects_bad_configs() {
        let ds = generate(&GenConfig { size: 5, ..Default::default() }).unwrap();
        let bad = PretrainConfig { mask_rate: 1.0, ..Default::default() };
        assert!(matches!(pretrain_ssl(&ds, small_arch(8), &bad), Err(Error::Config { .. })));
        let bad = PretrainConfig { gamma: 0.5, ..Default::default() };
        assert!(matches!(pretrain_ssl(&ds, small_arch(8), &bad), Err(Error::Config { .. })));
        assert!(matches!(
            pretrain_ssl(&ds, small_arch(3), &PretrainConfig::default()),
            Err(Error::Config { .. })
        ));
    }
}
