//! Finite-difference audits of the differentiable losses and penalties.
//!
//! Each [`Check`] builds a random instance from a seed, runs the tape backward
//! and compares with central differences at `h = 1e-5`.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::synth::{generate, GenConfig};
use crate::data::TaskKind;
use crate::error::{Error, Result};
use crate::model::{self, Architecture, Mode, ParamSet};
use crate::optim::task_loss;
use crate::pretrain::sce_loss;
use crate::strategies::{bss_penalty, feature_map_penalty, l2sp_penalty};
use crate::tensor::{finite_diff_grad, max_relative_error, Tape, Tensor, Var};

pub const STEP: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Check {
    Bce,
    Mse,
    Sce,
    L2sp,
    FeatureMap,
    Bss,
    /// One-layer GIN with head and BCE, over every parameter leaf.
    Gin,
}

impl Check {
    pub const ALL: [Check; 7] = [
        Check::Bce,
        Check::Mse,
        Check::Sce,
        Check::L2sp,
        Check::FeatureMap,
        Check::Bss,
        Check::Gin,
    ];
    pub const PENALTIES: [Check; 3] = [Check::L2sp, Check::FeatureMap, Check::Bss];

    pub fn as_str(self) -> &'static str {
        match self {
            Check::Bce => "bce",
            Check::Mse => "mse",
            Check::Sce => "sce",
            Check::L2sp => "l2sp",
            Check::FeatureMap => "feature_map",
            Check::Bss => "bss",
            Check::Gin => "gin",
        }
    }
}

/// Tape gradient and finite-difference estimate at the same point.
#[derive(Clone, Debug, PartialEq)]
pub struct GradPair {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

impl GradPair {
    pub fn error(&self) -> f64 {
        max_relative_error(&self.analytic, &self.numeric)
    }
}

/// Gradient of `f` at `x` both ways; `f` maps a leaf to a scalar on a tape.
pub fn tape_gradients(x: &Tensor, f: impl Fn(&mut Tape, Var) -> Result<Var>) -> Result<GradPair> {
    let mut tape = Tape::new();
    let v = tape.param("x", x.clone(), true);
    let loss = f(&mut tape, v)?;
    let analytic = tape.grad(loss)?.remove("x").expect("leaf is named").into_data();
    let shape = x.shape().to_vec();
    let numeric = finite_diff_grad(
        |p| {
            let mut tape = Tape::new();
            let v = tape.constant(Tensor::new(shape.clone(), p.to_vec()).expect("shape kept"));
            f(&mut tape, v).map_or(f64::NAN, |l| tape.value(l).item())
        },
        x.data(),
        STEP,
    );
    Ok(GradPair { analytic, numeric })
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
}

fn bernoulli_targets(rng: &mut ChaCha8Rng, len: usize) -> (Arc<Tensor>, Arc<[bool]>) {
    let t: Vec<f64> = (0..len).map(|_| rng.random_bool(0.5) as u8 as f64).collect();
    let mut mask: Vec<bool> = (0..len).map(|_| rng.random_bool(0.8)).collect();
    mask[0] = true;
    (Arc::new(Tensor::vector(t)), mask.into())
}

/// Runs one check on the instance drawn from `seed`.
pub fn run(check: Check, seed: u64) -> Result<GradPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6772_6164);
    let rows = rng.random_range(2..=8);
    let cols = rng.random_range(2..=6);
    match check {
        Check::Bce | Check::Mse => {
            let x = gaussian(&mut rng, rows, cols).map(|v| 3.0 * v);
            let (t, mask) = bernoulli_targets(&mut rng, rows * cols);
            let t = Arc::new(Tensor::matrix(rows, cols, t.data().to_vec()));
            tape_gradients(&x, |tape, v| {
                if check == Check::Bce {
                    tape.bce_with_logits(v, t.clone(), mask.clone())
                } else {
                    tape.mse(v, t.clone(), mask.clone())
                }
            })
        }
        Check::Sce => {
            let target = gaussian(&mut rng, rows, cols);
            let x = gaussian(&mut rng, rows, cols);
            let gamma = rng.random_range(1.0..3.0);
            tape_gradients(&x, |tape, v| {
                let t = tape.constant(target.clone());
                Ok(sce_loss(tape, t, v, gamma)?.loss)
            })
        }
        Check::L2sp => {
            let pre = gaussian(&mut rng, rows, cols);
            let x = gaussian(&mut rng, rows, cols);
            let delta = rng.random_range(0.001..1.0);
            tape_gradients(&x, |tape, v| l2sp_penalty(tape, &[(v, &pre)], delta))
        }
        Check::FeatureMap => {
            let pre = gaussian(&mut rng, rows, cols);
            let x = gaussian(&mut rng, rows, cols);
            let delta = rng.random_range(0.001..1.0);
            tape_gradients(&x, |tape, v| feature_map_penalty(tape, v, &pre, delta))
        }
        Check::Bss => {
            let x = gaussian(&mut rng, rows, cols);
            let k = rng.random_range(1..=rows.min(cols));
            let delta = rng.random_range(0.001..1.0);
            tape_gradients(&x, |tape, v| bss_penalty(tape, v, k, delta))
        }
        Check::Gin => gin(seed),
    }
}

fn gin(seed: u64) -> Result<GradPair> {
    let ds = generate(&GenConfig {
        size: 3,
        tasks: 2,
        kind: TaskKind::Classification,
        feature_dim: 3,
        min_nodes: 3,
        max_nodes: 6,
        seed,
        ..GenConfig::default()
    })?;
    let batch = ds.batch(&[0, 1, 2])?;
    let arch = Architecture { in_dim: 3, hidden: 4, layers: 1 };
    let params = ParamSet::init(arch, seed)?.with_fresh_head(2, seed + 1);
    let loss_of = |p: &ParamSet, tape: &mut Tape| -> Result<Var> {
        let bound = p.bind(tape, |_| true);
        let head = bound.head.ok_or_else(|| Error::Contract("no head".into()))?;
        let emb = model::encode(tape, &bound, &batch, Mode::Eval)?;
        let pred = model::predict(tape, &head, emb)?;
        task_loss(tape, pred, &batch, TaskKind::Classification)
    };
    let mut tape = Tape::new();
    let loss = loss_of(&params, &mut tape)?;
    let grads = tape.grad(loss)?;
    let names = params.names();
    let analytic: Vec<f64> = names.iter().flat_map(|n| grads[n].data().to_vec()).collect();
    let flat: Vec<f64> = params.leaves().into_iter().flat_map(|(_, t)| t.data().to_vec()).collect();
    let numeric = finite_diff_grad(
        |x| {
            let mut p = params.clone();
            let mut at = 0;
            for (_, t) in p.leaves_mut() {
                let n = t.len();
                t.data_mut().copy_from_slice(&x[at..at + n]);
                at += n;
            }
            let mut tape = Tape::new();
            loss_of(&p, &mut tape).map_or(f64::NAN, |l| tape.value(l).item())
        },
        &flat,
        STEP,
    );
    Ok(GradPair { analytic, numeric })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_check_passes_on_a_few_seeds() {
        for check in Check::ALL {
            for seed in 0..3 {
                let e = run(check, seed).unwrap().error();
                assert!(e < 1e-4, "{} seed {seed}: {e:e}", check.as_str());
            }
        }
    }

    #[test]
    fn a_flipped_sign_is_caught() {
        let mut pair = run(Check::L2sp, 0).unwrap();
        pair.analytic.iter_mut().for_each(|g| *g = -*g);
        assert!(pair.error() > 1.0);
    }
}
