use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::bench::{metric, MetricKind};
use crate::data::TaskKind;
use crate::error::{Error, Result};
use crate::model::{self, interpolate, GraphBatch, Mode, ParamGroup, ParamSet};
use crate::optim::task_loss;
use crate::tensor::{Tape, Tensor};

/// What the mixing coefficients are tuned against.
pub trait AlphaObjective {
    /// Loss at `params` and its gradient for every leaf.
    fn loss_and_grad(&self, params: &ParamSet) -> Result<(f64, BTreeMap<String, Tensor>)>;
    /// Selection score at `params`.
    fn score(&self, params: &ParamSet) -> Result<f64>;
    fn score_kind(&self) -> MetricKind;
}

/// The whole validation set as one batch: task loss for the gradient, AUC or
/// RMSE for selection.
pub struct ValidationObjective {
    pub batch: GraphBatch,
    pub kind: TaskKind,
}

impl AlphaObjective for ValidationObjective {
    fn loss_and_grad(&self, params: &ParamSet) -> Result<(f64, BTreeMap<String, Tensor>)> {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, |_| true);
        let head = bound
            .head
            .ok_or_else(|| Error::contract("fine-tuned parameters carry no head"))?;
        let emb = model::encode(&mut tape, &bound, &self.batch, Mode::Eval)?;
        let pred = model::predict(&mut tape, &head, emb)?;
        let loss = task_loss(&mut tape, pred, &self.batch, self.kind)?;
        Ok((tape.value(loss).item(), tape.grad(loss)?))
    }

    fn score(&self, params: &ParamSet) -> Result<f64> {
        let scores = model::predict_scores(params, &self.batch)?;
        metric(self.score_kind(), &scores, &self.batch.dense_targets(), &self.batch.label_mask)
    }

    fn score_kind(&self) -> MetricKind {
        MetricKind::for_task(self.kind)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlphaStep {
    pub step: usize,
    pub alphas: Vec<f64>,
    pub loss: f64,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlphaSearch {
    /// Best-scoring iterate.
    pub alphas: Vec<f64>,
    pub score: f64,
    pub trace: Vec<AlphaStep>,
}

/// `dL/d alpha_i = <dL/d theta^[i], ft^[i] - pre^[i]>`, where group `i`
/// is encoder layer `i` plus, for `i = 0`, the input embedding.
pub fn alpha_gradient(pre: &ParamSet, ft: &ParamSet, grads: &BTreeMap<String, Tensor>) -> Vec<f64> {
    let mut out = vec![0.0; pre.layer_count()];
    for ((name, f), (_, p)) in ft.leaves().into_iter().zip(pre.leaves()) {
        let i = match ParamGroup::of(&name) {
            Some(ParamGroup::Embed) => 0,
            Some(ParamGroup::Layer(i)) => i,
            _ => continue,
        };
        if let Some(g) = grads.get(&name) {
            out[i] += g
                .data()
                .iter()
                .zip(f.data().iter().zip(p.data()))
                .map(|(g, (f, p))| g * (f - p))
                .sum::<f64>();
        }
    }
    out
}

/// Projected gradient descent on the per-layer mixing coefficients.
///
/// Starts from `alpha_init` everywhere, takes `steps` updates of size `lr`,
/// clamps into `[0, 1]` after each, and returns the best-scoring iterate seen
/// (earliest on ties), the starting point included.
pub fn dwise_optimize_alphas(
    pre: &ParamSet,
    ft: &ParamSet,
    objective: &dyn AlphaObjective,
    alpha_init: f64,
    lr: f64,
    steps: usize,
) -> Result<AlphaSearch> {
    if !(0.0..=1.0).contains(&alpha_init) {
        return Err(Error::config("alpha_init", "must lie in [0, 1]"));
    }
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::config("alpha_lr", "must be non-negative"));
    }
    pre.check_compatible(ft)?;
    let kind = objective.score_kind();
    let mut alphas = vec![alpha_init; pre.layer_count()];
    let mut trace = Vec::with_capacity(steps + 1);
    let mut best: Option<(Vec<f64>, f64)> = None;
    for step in 0..=steps {
        let mixed = interpolate(pre, ft, &alphas)?;
        let score = objective.score(&mixed)?;
        let (loss, grads) = objective.loss_and_grad(&mixed)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                phase: "alpha search".into(),
                epoch: step,
                batch: 0,
            });
        }
        if best.as_ref().is_none_or(|(_, s)| kind.better(score, *s)) {
            best = Some((alphas.clone(), score));
        }
        trace.push(AlphaStep {
            step,
            alphas: alphas.clone(),
            loss,
            score,
        });
        if step == steps {
            break;
        }
        let g = alpha_gradient(pre, ft, &grads);
        for (a, g) in alphas.iter_mut().zip(g) {
            *a = (*a - lr * g).clamp(0.0, 1.0);
        }
    }
    let (alphas, score) = best.expect("at least one iterate is scored");
    Ok(AlphaSearch { alphas, score, trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Architecture;

    /// `L = (1/2) sum (theta - target)^2` over encoder leaves; score is `L` itself.
    pub(crate) struct Quadratic {
        pub target: ParamSet,
    }

    impl AlphaObjective for Quadratic {
        fn loss_and_grad(&self, params: &ParamSet) -> Result<(f64, BTreeMap<String, Tensor>)> {
            let mut loss = 0.0;
            let mut grads = BTreeMap::new();
            for ((name, t), (_, s)) in params.leaves().into_iter().zip(self.target.leaves()) {
                if !ParamGroup::of(&name).is_some_and(ParamGroup::is_encoder) {
                    continue;
                }
                let d = t.zip_map(s, |a, b| a - b);
                loss += 0.5 * d.dot(&d);
                grads.insert(name, d);
            }
            Ok((loss, grads))
        }

        fn score(&self, params: &ParamSet) -> Result<f64> {
            Ok(self.loss_and_grad(params)?.0)
        }

        fn score_kind(&self) -> MetricKind {
            MetricKind::Rmse
        }
    }

    fn pair() -> (ParamSet, ParamSet) {
        let arch = Architecture { in_dim: 2, hidden: 3, layers: 2 };
        let pre = ParamSet::init(arch, 1).unwrap();
        let ft = ParamSet::init(arch, 2).unwrap().with_fresh_head(1, 0);
        (pre, ft)
    }

    #[test]
    fn equal_endpoints_keep_alpha_fixed() {
        let (pre, _) = pair();
        let ft = pre.with_fresh_head(1, 0);
        let obj = Quadratic { target: ParamSet::init(pre.arch, 9).unwrap() };
        let out = dwise_optimize_alphas(&pre, &ft, &obj, 0.7, 0.5, 20).unwrap();
        assert!(out.trace.iter().all(|s| s.alphas == vec![0.7, 0.7]));
    }

    #[test]
    fn zero_rate_returns_the_initial_point() {
        let (pre, ft) = pair();
        let obj = Quadratic { target: pre.clone() };
        let out = dwise_optimize_alphas(&pre, &ft, &obj, 0.9, 0.0, 10).unwrap();
        assert_eq!(out.alphas, vec![0.9, 0.9]);
    }

    #[test]
    fn recovers_per_layer_optimum() {
        let (pre, ft) = pair();
        let target = interpolate(&pre, &ft, &[0.3, 0.8]).unwrap();
        let obj = Quadratic { target };
        let out = dwise_optimize_alphas(&pre, &ft, &obj, 0.5, 0.05, 2000).unwrap();
        assert!((out.alphas[0] - 0.3).abs() < 1e-6 && (out.alphas[1] - 0.8).abs() < 1e-6, "{:?}", out.alphas);
    }

    #[test]
    fn clamps_into_the_unit_interval() {
        let (pre, ft) = pair();
        // optimum beyond ft: alpha runs into 1 and stays
        let mut target = ft.clone();
        for ((_, t), (_, p)) in target.leaves_mut().into_iter().zip(pre.leaves()) {
            let d = t.zip_map(p, |f, p| f - p);
            t.add_assign_scaled(&d, 1.0);
        }
        let out = dwise_optimize_alphas(&pre, &ft, &Quadratic { target }, 0.5, 0.1, 200).unwrap();
        assert_eq!(out.alphas, vec![1.0, 1.0]);
    }

    #[test]
    fn rejects_bad_settings() {
        let (pre, ft) = pair();
        let obj = Quadratic { target: pre.clone() };
        assert!(matches!(dwise_optimize_alphas(&pre, &ft, &obj, 1.5, 0.1, 1), Err(Error::Config { .. })));
        assert!(matches!(dwise_optimize_alphas(&pre, &ft, &obj, 0.5, -1.0, 1), Err(Error::Config { .. })));
    }

    #[test]
    fn alpha_gradient_matches_finite_differences() {
        let (pre, ft) = pair();
        let obj = Quadratic { target: ParamSet::init(pre.arch, 5).unwrap() };
        let a = [0.4, 0.6];
        let (_, grads) = obj.loss_and_grad(&interpolate(&pre, &ft, &a).unwrap()).unwrap();
        let g = alpha_gradient(&pre, &ft, &grads);
        let f = |x: &[f64]| obj.score(&interpolate(&pre, &ft, x).unwrap()).unwrap();
        let fd = crate::tensor::finite_diff_grad(f, &a, 1e-5);
        assert!(crate::tensor::max_relative_error(&g, &fd) < 1e-6);
    }
}
