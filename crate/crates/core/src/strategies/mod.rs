//! The fine-tuning strategies: full, linear probing, surgical, LP then full,
//! global and per-layer weight interpolation, and the three regularized loops
//! (starting-point, feature-map, batch spectral shrinkage).

mod dwise;
mod penalty;

pub use dwise::{alpha_gradient, dwise_optimize_alphas, AlphaObjective, AlphaSearch, AlphaStep, ValidationObjective};
pub use penalty::{bss_penalty, bss_value, feature_map_penalty, l2sp_penalty, l2sp_value};

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::bench::{metric, select_best, MetricKind};
use crate::data::{batches, Dataset};
use crate::error::{Error, Result};
use crate::model::{self, embed_graphs, interpolate, layer_param_names, GraphBatch, Mode, ParamSet};
use crate::optim::{ensure_finite, sgd_step, task_loss};
use crate::tensor::{Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    Full,
    Lp,
    Surgical,
    LpFt,
    Wise,
    L2sp,
    FeatureMap,
    Bss,
    Dwise,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 9] = [
        StrategyKind::Full,
        StrategyKind::Lp,
        StrategyKind::Surgical,
        StrategyKind::LpFt,
        StrategyKind::Wise,
        StrategyKind::L2sp,
        StrategyKind::FeatureMap,
        StrategyKind::Bss,
        StrategyKind::Dwise,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StrategyKind::Full => "full",
            StrategyKind::Lp => "lp",
            StrategyKind::Surgical => "surgical",
            StrategyKind::LpFt => "lp_ft",
            StrategyKind::Wise => "wise",
            StrategyKind::L2sp => "l2sp",
            StrategyKind::FeatureMap => "feature_map",
            StrategyKind::Bss => "bss",
            StrategyKind::Dwise => "dwise",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| {
                let known: Vec<&str> = Self::ALL.iter().map(|k| k.as_str()).collect();
                Error::config("kind", format!("unknown strategy `{s}` (expected one of {})", known.join(", ")))
            })
    }

    /// Kinds that post-process a full fine-tuning run.
    pub fn builds_on_full(self) -> bool {
        matches!(self, StrategyKind::Wise | StrategyKind::Dwise)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StrategyConfig {
    pub kind: StrategyKind,
    /// Global mixing coefficient (wise).
    pub alpha: f64,
    pub alpha_init: f64,
    pub alpha_lr: f64,
    pub alpha_epochs: usize,
    /// Regularization strength (l2sp, feature_map, bss).
    pub delta: f64,
    /// Layer index (surgical) or number of penalized singular values (bss).
    pub k: Option<usize>,
    pub epochs: usize,
    /// Probing epochs before the full phase (lp_ft); defaults to `epochs`.
    pub lp_epochs: Option<usize>,
    pub learning_rate: f64,
    pub dropout_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for StrategyConfig {
    fn default() -> Self {
        Self {
            kind: StrategyKind::Full,
            alpha: 0.5,
            alpha_init: 0.7,
            alpha_lr: 0.005,
            alpha_epochs: 200,
            delta: 0.01,
            k: None,
            epochs: 100,
            lp_epochs: None,
            learning_rate: 0.001,
            dropout_rate: 0.5,
            batch_size: 32,
            seed: 0,
        }
    }
}

impl StrategyConfig {
    pub fn new(kind: StrategyKind) -> Self {
        Self {
            kind,
            ..Default::default()
        }
    }

    /// Parses a JSON document. `kind` is required and checked by name first so
    /// that a typo is reported against that field.
    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        match value.get("kind") {
            Some(serde_json::Value::String(s)) => {
                StrategyKind::parse(s)?;
            }
            Some(_) => return Err(Error::config("kind", "must be a string")),
            None => return Err(Error::config("kind", "missing")),
        }
        let cfg: StrategyConfig = serde_json::from_value(value).map_err(|e| Error::config("strategy", e.to_string()))?;
        Ok(cfg)
    }

    /// The bss `k`, defaulting to one.
    pub fn bss_k(&self) -> usize {
        self.k.unwrap_or(1)
    }

    pub fn validate(&self, layers: usize) -> Result<()> {
        let unit = |field: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::config(field, format!("{v} outside [0, 1]")))
            }
        };
        unit("alpha", self.alpha)?;
        unit("alpha_init", self.alpha_init)?;
        if !(self.alpha_lr >= 0.0 && self.alpha_lr.is_finite()) {
            return Err(Error::config("alpha_lr", "must be non-negative"));
        }
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return Err(Error::config("delta", "must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::config("dropout_rate", "must lie in [0, 1)"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be positive"));
        }
        match self.kind {
            StrategyKind::Surgical => match self.k {
                Some(k) if k < layers => {}
                Some(k) => return Err(Error::config("k", format!("layer {k} out of range for {layers} layers"))),
                None => return Err(Error::config("k", "surgical fine-tuning needs a layer index")),
            },
            StrategyKind::Bss if self.bss_k() == 0 => return Err(Error::config("k", "must be at least 1")),
            _ => {}
        }
        Ok(())
    }
}

/// Index sets of one task, all into `ds`.
#[derive(Clone, Copy, Debug)]
pub struct RunData<'a> {
    pub ds: &'a Dataset,
    pub train: &'a [usize],
    pub val: &'a [usize],
    pub test: &'a [usize],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub phase: String,
    pub epoch: usize,
    pub loss: f64,
    pub penalty: f64,
    pub val_metric: f64,
    pub test_metric: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunArtifacts {
    pub kind: StrategyKind,
    /// Parameters of the selected model (best epoch, interpolated for wise/dwise).
    pub final_params: ParamSet,
    pub epoch_val_metric: Vec<f64>,
    pub epoch_test_metric: Vec<f64>,
    pub best_epoch: usize,
    pub metric_kind: MetricKind,
    pub val_metric: f64,
    pub test_metric: f64,
    /// Per-layer mixing coefficients (wise and dwise).
    pub alphas: Option<Vec<f64>>,
    pub alpha_trace: Vec<AlphaStep>,
    pub train_log: Vec<EpochRecord>,
}

#[derive(Clone, Copy, Debug)]
enum Penalty {
    None,
    L2sp(f64),
    FeatureMap(f64),
    Bss { k: usize, delta: f64 },
}

struct Evaluator {
    val: GraphBatch,
    test: GraphBatch,
    kind: MetricKind,
}

impl Evaluator {
    fn new(data: &RunData) -> Result<Self> {
        if data.val.is_empty() {
            return Err(Error::config("val", "validation set is empty"));
        }
        if data.test.is_empty() {
            return Err(Error::config("test", "test set is empty"));
        }
        Ok(Self {
            val: data.ds.batch(data.val)?,
            test: data.ds.batch(data.test)?,
            kind: MetricKind::for_task(data.ds.task_kind),
        })
    }

    fn score(&self, params: &ParamSet, batch: &GraphBatch) -> Result<f64> {
        let scores = model::predict_scores(params, batch)?;
        metric(self.kind, &scores, &batch.dense_targets(), &batch.label_mask)
    }

    fn val_test(&self, params: &ParamSet) -> Result<(f64, f64)> {
        Ok((self.score(params, &self.val)?, self.score(params, &self.test)?))
    }
}

struct Phase {
    best: ParamSet,
    val: Vec<f64>,
    test: Vec<f64>,
    best_epoch: usize,
    last: ParamSet,
}

/// One gradient-descent phase; returns the best-validation parameters and the curves.
#[allow(clippy::too_many_arguments)]
fn train_phase(
    name: &str,
    start: ParamSet,
    pre: &ParamSet,
    data: &RunData,
    cfg: &StrategyConfig,
    epochs: usize,
    trainable: &dyn Fn(&str) -> bool,
    penalty: Penalty,
    eval: &Evaluator,
    log: &mut Vec<EpochRecord>,
) -> Result<Phase> {
    let mut params = start;
    let (mut val, mut test) = (Vec::with_capacity(epochs), Vec::with_capacity(epochs));
    let mut best: Option<(usize, ParamSet)> = None;
    for epoch in 0..epochs {
        let (mut loss_sum, mut pen_sum) = (0.0, 0.0);
        let epoch_batches = batches(data.ds, data.train, cfg.batch_size, cfg.seed, epoch as u64)?;
        for (b, batch) in epoch_batches.iter().enumerate() {
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape, trainable);
            let mode = Mode::Train {
                dropout_rate: cfg.dropout_rate,
                seed: cfg.seed,
                epoch: epoch as u64,
                batch: b as u64,
            };
            let emb = model::encode(&mut tape, &bound, batch, mode)?;
            let head = bound
                .head
                .ok_or_else(|| Error::contract("fine-tuning needs a prediction head"))?;
            let pred = model::predict(&mut tape, &head, emb)?;
            let task = task_loss(&mut tape, pred, batch, data.ds.task_kind)?;
            let pen = penalty_term(&mut tape, penalty, &bound, emb, pre, batch)?;
            let total = match pen {
                Some(p) => tape.add(task, p)?,
                None => task,
            };
            let loss_value = ensure_finite(tape.value(task).item(), name, epoch, b)?;
            let pen_value = pen.map_or(0.0, |p| tape.value(p).item());
            ensure_finite(pen_value, name, epoch, b)?;
            loss_sum += loss_value;
            pen_sum += pen_value;
            let grads = tape.grad(total)?;
            sgd_step(&mut params, &grads, cfg.learning_rate);
        }
        let (v, t) = eval.val_test(&params)?;
        if best.as_ref().is_none_or(|(i, _)| eval.kind.better(v, val[*i])) {
            best = Some((epoch, params.clone()));
        }
        val.push(v);
        test.push(t);
        let n = epoch_batches.len() as f64;
        log.push(EpochRecord {
            phase: name.to_string(),
            epoch,
            loss: loss_sum / n,
            penalty: pen_sum / n,
            val_metric: v,
            test_metric: t,
        });
    }
    let (best_epoch, best) = best.ok_or_else(|| Error::config("epochs", "must be positive"))?;
    Ok(Phase {
        best,
        val,
        test,
        best_epoch,
        last: params,
    })
}

/// Tape handles of the encoder and embedding leaves, by name.
fn bound_encoder(bound: &model::BoundParams) -> Vec<(String, Var)> {
    let mut out = vec![
        ("embed.weight".to_string(), bound.embed.weight),
        ("embed.bias".to_string(), bound.embed.bias),
    ];
    for (i, l) in bound.layers.iter().enumerate() {
        out.push((format!("layer.{i}.eps"), l.eps));
        for (j, a) in [l.lin1, l.lin2].iter().enumerate() {
            out.push((format!("layer.{i}.mlp.{j}.weight"), a.weight));
            out.push((format!("layer.{i}.mlp.{j}.bias"), a.bias));
        }
    }
    out
}

fn penalty_term(tape: &mut Tape, penalty: Penalty, bound: &model::BoundParams, emb: Var, pre: &ParamSet, batch: &GraphBatch) -> Result<Option<Var>> {
    match penalty {
        Penalty::None => Ok(None),
        Penalty::L2sp(delta) => {
            let pairs = bound_encoder(bound)
                .into_iter()
                .map(|(n, v)| {
                    pre.get(&n)
                        .map(|t| (v, t))
                        .ok_or_else(|| Error::contract(format!("pretrained parameters lack `{n}`")))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Some(l2sp_penalty(tape, &pairs, delta)?))
        }
        Penalty::FeatureMap(delta) => {
            let f_pre = embed_graphs(pre, batch)?;
            Ok(Some(feature_map_penalty(tape, emb, &f_pre, delta)?))
        }
        Penalty::Bss { k, delta } => {
            if batch.graph_count < 2 {
                return Ok(None);
            }
            let r = batch.graph_count.min(tape.value(emb).cols());
            Ok(Some(bss_penalty(tape, emb, k.min(r), delta)?))
        }
    }
}

/// Fine-tunes `pre` (an encoder checkpoint) on `data` with a freshly seeded head.
pub fn finetune(pre: &ParamSet, data: &RunData, cfg: &StrategyConfig) -> Result<RunArtifacts> {
    if cfg.kind.builds_on_full() {
        let full = finetune(pre, data, &StrategyConfig { kind: StrategyKind::Full, ..cfg.clone() })?;
        return finetune_from_full(pre, data, cfg, &full);
    }
    cfg.validate(pre.layer_count())?;
    if pre.arch.in_dim != data.ds.feature_dim {
        return Err(Error::config(
            "checkpoint",
            format!(
                "encoder expects {} input features, dataset has {}",
                pre.arch.in_dim, data.ds.feature_dim
            ),
        ));
    }
    let eval = Evaluator::new(data)?;
    let pre = pre.without_head();
    let start = pre.with_fresh_head(data.ds.task_count, cfg.seed);
    let mut log = Vec::new();
    let all = |_: &str| true;
    let head_only = |n: &str| n.starts_with("head.");

    let phase = match cfg.kind {
        StrategyKind::Full => train_phase("full", start, &pre, data, cfg, cfg.epochs, &all, Penalty::None, &eval, &mut log)?,
        StrategyKind::Lp => train_phase("lp", start, &pre, data, cfg, cfg.epochs, &head_only, Penalty::None, &eval, &mut log)?,
        StrategyKind::Surgical => {
            let k = cfg.k.expect("validated");
            let names: BTreeSet<String> = layer_param_names(&start, k)?;
            let only = move |n: &str| n.starts_with("head.") || names.contains(n);
            train_phase("surgical", start, &pre, data, cfg, cfg.epochs, &only, Penalty::None, &eval, &mut log)?
        }
        StrategyKind::LpFt => {
            let probe_epochs = cfg.lp_epochs.unwrap_or(cfg.epochs);
            let probed = if probe_epochs == 0 {
                start
            } else {
                train_phase("lp", start, &pre, data, cfg, probe_epochs, &head_only, Penalty::None, &eval, &mut log)?.last
            };
            train_phase("full", probed, &pre, data, cfg, cfg.epochs, &all, Penalty::None, &eval, &mut log)?
        }
        StrategyKind::L2sp => {
            train_phase("l2sp", start, &pre, data, cfg, cfg.epochs, &all, Penalty::L2sp(cfg.delta), &eval, &mut log)?
        }
        StrategyKind::FeatureMap => train_phase(
            "feature_map",
            start,
            &pre,
            data,
            cfg,
            cfg.epochs,
            &all,
            Penalty::FeatureMap(cfg.delta),
            &eval,
            &mut log,
        )?,
        StrategyKind::Bss => train_phase(
            "bss",
            start,
            &pre,
            data,
            cfg,
            cfg.epochs,
            &all,
            Penalty::Bss { k: cfg.bss_k(), delta: cfg.delta },
            &eval,
            &mut log,
        )?,
        StrategyKind::Wise | StrategyKind::Dwise => unreachable!("dispatched above"),
    };
    let (best_epoch, test_metric) = select_best(&phase.val, &phase.test, eval.kind)?;
    debug_assert_eq!(best_epoch, phase.best_epoch);
    Ok(RunArtifacts {
        kind: cfg.kind,
        final_params: phase.best,
        val_metric: phase.val[best_epoch],
        test_metric,
        epoch_val_metric: phase.val,
        epoch_test_metric: phase.test,
        best_epoch,
        metric_kind: eval.kind,
        alphas: None,
        alpha_trace: Vec::new(),
        train_log: log,
    })
}

/// Builds a wise or dwise result on top of an existing full fine-tuning run,
/// so that a grid over `alpha` (or the alpha search settings) trains once.
pub fn finetune_from_full(pre: &ParamSet, data: &RunData, cfg: &StrategyConfig, full: &RunArtifacts) -> Result<RunArtifacts> {
    cfg.validate(pre.layer_count())?;
    if full.kind != StrategyKind::Full {
        return Err(Error::contract(format!("expected a full run, got {}", full.kind.as_str())));
    }
    let eval = Evaluator::new(data)?;
    let pre = pre.without_head();
    let ft = &full.final_params;
    let (alphas, trace) = match cfg.kind {
        StrategyKind::Full => return Ok(full.clone()),
        StrategyKind::Wise => (vec![cfg.alpha; pre.layer_count()], Vec::new()),
        StrategyKind::Dwise => {
            let objective = ValidationObjective {
                batch: eval.val.clone(),
                kind: data.ds.task_kind,
            };
            let search = dwise_optimize_alphas(&pre, ft, &objective, cfg.alpha_init, cfg.alpha_lr, cfg.alpha_epochs)?;
            (search.alphas, search.trace)
        }
        other => {
            return Err(Error::config(
                "kind",
                format!("`{}` is not built from a full run", other.as_str()),
            ))
        }
    };
    let mixed = interpolate(&pre, ft, &alphas)?;
    let (val_metric, test_metric) = eval.val_test(&mixed)?;
    Ok(RunArtifacts {
        kind: cfg.kind,
        final_params: mixed,
        epoch_val_metric: full.epoch_val_metric.clone(),
        epoch_test_metric: full.epoch_test_metric.clone(),
        best_epoch: full.best_epoch,
        metric_kind: eval.kind,
        val_metric,
        test_metric,
        alphas: Some(alphas),
        alpha_trace: trace,
        train_log: full.train_log.clone(),
    })
}

/// Leaf names a kind is allowed to change, for the given layer count.
pub fn trainable_names(params: &ParamSet, cfg: &StrategyConfig) -> Result<BTreeSet<String>> {
    let names = params.names().into_iter();
    Ok(match cfg.kind {
        StrategyKind::Lp => names.filter(|n| n.starts_with("head.")).collect(),
        StrategyKind::Surgical => {
            let k = cfg
                .k
                .ok_or_else(|| Error::config("k", "surgical fine-tuning needs a layer index"))?;
            let mut set = layer_param_names(params, k)?;
            set.extend(names.filter(|n| n.starts_with("head.")));
            set
        }
        _ => names.collect(),
    })
}
