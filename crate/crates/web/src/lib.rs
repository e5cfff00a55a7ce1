//! Three interactive views over `roft-core`, exported to JavaScript.
//!
//! Everything returns JSON strings so the page needs no glue beyond
//! `JSON.parse`. The plain-Rust functions are what the tests exercise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use roft_core::bench::roc_auc;
use roft_core::data::synth::{generate, GenConfig};
use roft_core::data::{split, Dataset, SplitScheme, DEFAULT_FRACTIONS};
use roft_core::model::{interpolate, predict_scores, Architecture, GraphBatch, ParamSet};
use roft_core::pretrain::{pretrain_ssl, PretrainConfig};
use roft_core::quadlab::{closed_form, QuadProblem};
use roft_core::strategies::{bss_penalty, finetune, RunData, StrategyConfig, StrategyKind};
use roft_core::tensor::{svd, Tape, Tensor};
use roft_core::Result;
use serde::Serialize;
use wasm_bindgen::prelude::*;

fn to_js<T: Serialize>(r: Result<T>) -> std::result::Result<String, JsError> {
    let v = r.map_err(|e| JsError::new(&e.to_string()))?;
    serde_json::to_string(&v).map_err(|e| JsError::new(&e.to_string()))
}

#[derive(Serialize)]
pub struct RegPath {
    pub deltas: Vec<f64>,
    /// `|theta(delta) - theta_pre|`
    pub to_pre: Vec<f64>,
    /// `|theta(delta) - theta_star|`
    pub to_star: Vec<f64>,
    /// First two coordinates of the minimizer, for the trajectory plot.
    pub path: Vec<[f64; 2]>,
    pub theta_pre: [f64; 2],
    pub theta_star: [f64; 2],
}

/// Minimizer of the regularized quadratic for `points` log-spaced deltas in `[1e-4, 1e2]`.
pub fn regularization_path(dim: usize, seed: u64, points: usize) -> Result<RegPath> {
    let dim = dim.max(2);
    let points = points.max(2);
    let base = QuadProblem::random(dim, seed, 1.0)?;
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let mut out = RegPath {
        deltas: vec![],
        to_pre: vec![],
        to_star: vec![],
        path: vec![],
        theta_pre: [base.theta_pre[0], base.theta_pre[1]],
        theta_star: [base.theta_star[0], base.theta_star[1]],
    };
    for i in 0..points {
        let delta = 10f64.powf(-4.0 + 6.0 * i as f64 / (points - 1) as f64);
        let th = closed_form(&base.with_delta(delta))?;
        out.deltas.push(delta);
        out.to_pre.push(dist(&th, &base.theta_pre));
        out.to_star.push(dist(&th, &base.theta_star));
        out.path.push([th[0], th[1]]);
    }
    Ok(out)
}

#[wasm_bindgen(js_name = regularizationPath)]
pub fn regularization_path_js(dim: usize, seed: u32, points: usize) -> std::result::Result<String, JsError> {
    to_js(regularization_path(dim, seed.into(), points))
}

#[derive(Serialize)]
pub struct Spectrum {
    /// Singular values at the start and after each step, descending.
    pub steps: Vec<Vec<f64>>,
    pub penalty: Vec<f64>,
}

/// Gradient descent on the spectral penalty alone, starting from a random
/// `rows x cols` matrix: only the `k` smallest singular values move.
pub fn bss_spectrum(rows: usize, cols: usize, k: usize, delta: f64, steps: usize, seed: u64) -> Result<Spectrum> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (rows, cols) = (rows.clamp(2, 64), cols.clamp(2, 64));
    let mut f = Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect());
    let mut out = Spectrum { steps: vec![], penalty: vec![] };
    for i in 0..=steps {
        let mut tape = Tape::new();
        let v = tape.param("f", f.clone(), true);
        let loss = bss_penalty(&mut tape, v, k, delta)?;
        out.steps.push(svd(&f)?.s);
        out.penalty.push(tape.value(loss).item());
        if i == steps {
            break;
        }
        let g = tape.grad(loss)?.remove("f").expect("named leaf");
        f.add_assign_scaled(&g, -0.5);
    }
    Ok(out)
}

#[wasm_bindgen(js_name = bssSpectrum)]
pub fn bss_spectrum_js(
    rows: usize,
    cols: usize,
    k: usize,
    delta: f64,
    steps: usize,
    seed: u32,
) -> std::result::Result<String, JsError> {
    to_js(bss_spectrum(rows, cols, k, delta, steps, seed.into()))
}

/// A small pretrained and fine-tuned pair on synthetic data, kept between calls.
#[wasm_bindgen]
pub struct Landscape {
    pre: ParamSet,
    ft: ParamSet,
    val: GraphBatch,
    test: GraphBatch,
}

#[derive(Serialize)]
pub struct WiseCurve {
    pub alphas: Vec<f64>,
    pub val_auc: Vec<f64>,
    pub test_auc: Vec<f64>,
}

#[derive(Serialize)]
pub struct LayerGrid {
    pub alphas: Vec<f64>,
    /// `auc[i][j]` with `alpha_0 = alphas[i]` and the remaining layers at `alphas[j]`.
    pub auc: Vec<Vec<f64>>,
}

impl Landscape {
    pub fn build(seed: u64) -> Result<Landscape> {
        let ds: Dataset = generate(&GenConfig {
            size: 160,
            seed,
            ..GenConfig::default()
        })?;
        let arch = Architecture { in_dim: ds.feature_dim, hidden: 16, layers: 2 };
        let pre = pretrain_ssl(
            &ds,
            arch,
            &PretrainConfig {
                epochs: 10,
                seed,
                ..PretrainConfig::default()
            },
        )?
        .checkpoint
        .params;
        let sp = split(&ds, SplitScheme::Random, DEFAULT_FRACTIONS, seed)?;
        let cfg = StrategyConfig {
            epochs: 15,
            learning_rate: 0.01,
            dropout_rate: 0.0,
            seed,
            ..StrategyConfig::new(StrategyKind::Full)
        };
        let data = RunData { ds: &ds, train: &sp.train, val: &sp.val, test: &sp.test };
        let ft = finetune(&pre, &data, &cfg)?.final_params;
        Ok(Landscape { pre, ft, val: ds.batch(&sp.val)?, test: ds.batch(&sp.test)? })
    }

    fn auc(&self, alphas: &[f64], batch: &GraphBatch) -> Result<f64> {
        let p = interpolate(&self.pre, &self.ft, alphas)?;
        roc_auc(&predict_scores(&p, batch)?, &batch.dense_targets(), &batch.label_mask)
    }

    pub fn wise(&self, points: usize) -> Result<WiseCurve> {
        let alphas = grid(points);
        let layers = self.pre.layer_count();
        let mut c = WiseCurve { alphas: alphas.clone(), val_auc: vec![], test_auc: vec![] };
        for &a in &alphas {
            c.val_auc.push(self.auc(&vec![a; layers], &self.val)?);
            c.test_auc.push(self.auc(&vec![a; layers], &self.test)?);
        }
        Ok(c)
    }

    pub fn layers(&self, points: usize) -> Result<LayerGrid> {
        let alphas = grid(points);
        let layers = self.pre.layer_count();
        let auc = alphas
            .iter()
            .map(|&a0| {
                alphas
                    .iter()
                    .map(|&a| {
                        let mut v = vec![a; layers];
                        v[0] = a0;
                        self.auc(&v, &self.val)
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(LayerGrid { alphas, auc })
    }
}

fn grid(points: usize) -> Vec<f64> {
    let n = points.clamp(2, 41);
    (0..n).map(|i| i as f64 / (n - 1) as f64).collect()
}

#[wasm_bindgen]
impl Landscape {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32) -> std::result::Result<Landscape, JsError> {
        Landscape::build(seed.into()).map_err(|e| JsError::new(&e.to_string()))
    }

    #[wasm_bindgen(js_name = wiseCurve)]
    pub fn wise_curve(&self, points: usize) -> std::result::Result<String, JsError> {
        to_js(self.wise(points))
    }

    #[wasm_bindgen(js_name = layerGrid)]
    pub fn layer_grid(&self, points: usize) -> std::result::Result<String, JsError> {
        to_js(self.layers(points))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn path_runs_from_star_to_pre() {
        let p = regularization_path(4, 1, 30).unwrap();
        assert!(p.to_pre.windows(2).all(|w| w[1] <= w[0] + 1e-12));
        assert!(p.to_star.windows(2).all(|w| w[1] >= w[0] - 1e-12));
        assert!(p.to_pre[29] < p.to_pre[0]);
    }

    #[test]
    fn spectrum_shrinks_only_the_tail() {
        let s = bss_spectrum(8, 4, 1, 1.0, 10, 0).unwrap();
        let (first, last) = (&s.steps[0], &s.steps[10]);
        assert!(last[3] < first[3]);
        assert!((last[0] - first[0]).abs() < 1e-9);
        assert!(s.penalty[10] < s.penalty[0]);
    }

    #[test]
    fn landscape_endpoints() {
        let l = Landscape::build(0).unwrap();
        let c = l.wise(3).unwrap();
        assert_eq!(c.alphas, vec![0.0, 0.5, 1.0]);
        assert!(c.val_auc.iter().chain(&c.test_auc).all(|v| (0.0..=1.0).contains(v)));
        let g = l.layers(3).unwrap();
        assert_eq!(g.auc[2][2], c.val_auc[2]);
        assert_eq!(g.auc[0][0], c.val_auc[0]);
        assert!(serde_json::from_str::<serde_json::Value>(&l.wise_curve(5).unwrap()).is_ok());
    }
}
