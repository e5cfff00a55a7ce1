//! The starting-point regularizer on a quadratic loss: closed-form minimizer in
//! the Hessian eigenbasis against plain gradient descent.
//!
//! `L(theta) = base + (1/2)(theta - theta*)^T H (theta - theta*) + (delta/2)||theta - theta_pre||^2`
//! has minimizer `Q [(L + dI)^-1 L Q^T theta* + d (L + dI)^-1 Q^T theta_pre]`
//! for `H = Q L Q^T`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{sym_eig, Tensor};

pub const DELTA_GRID: [f64; 5] = [1.0, 0.1, 0.01, 0.001, 0.0001];

const MAX_ITERATIONS: usize = 1_000_000;
const GRAD_TOL: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct QuadProblem {
    pub h: Tensor,
    pub theta_star: Vec<f64>,
    pub theta_pre: Vec<f64>,
    pub delta: f64,
    pub base: f64,
}

impl QuadProblem {
    pub fn new(h: Tensor, theta_star: Vec<f64>, theta_pre: Vec<f64>, delta: f64) -> Result<Self> {
        let n = h.rows();
        if h.cols() != n || theta_star.len() != n || theta_pre.len() != n {
            return Err(Error::contract(format!(
                "dimension mismatch: H {:?}, theta* {}, theta_pre {}",
                h.shape(),
                theta_star.len(),
                theta_pre.len()
            )));
        }
        Ok(Self {
            h,
            theta_star,
            theta_pre,
            delta,
            base: 0.0,
        })
    }

    /// `H = Q diag(lambda) Q^T` with `Q` orthonormalized from a Gaussian matrix
    /// and `lambda` log-uniform in `[1e-2, 1e1]`; `theta*`, `theta_pre` Gaussian.
    pub fn random(dim: usize, seed: u64, delta: f64) -> Result<Self> {
        if dim == 0 || dim > 32 {
            return Err(Error::contract(format!("dimension {dim} outside 1..=32")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gauss = |rng: &mut ChaCha8Rng, n: usize| -> Vec<f64> { (0..n).map(|_| StandardNormal.sample(rng)).collect() };
        let q = orthonormal(&gauss(&mut rng, dim * dim), dim);
        let lambda: Vec<f64> = (0..dim).map(|_| 10f64.powf(rng.random_range(-2.0..1.0))).collect();
        let mut h = vec![0.0; dim * dim];
        for i in 0..dim {
            for j in 0..dim {
                h[i * dim + j] = (0..dim).map(|k| q[i * dim + k] * lambda[k] * q[j * dim + k]).sum();
            }
        }
        // exact symmetry
        for i in 0..dim {
            for j in 0..i {
                let m = 0.5 * (h[i * dim + j] + h[j * dim + i]);
                h[i * dim + j] = m;
                h[j * dim + i] = m;
            }
        }
        let theta_star = gauss(&mut rng, dim);
        let theta_pre = gauss(&mut rng, dim);
        Self::new(Tensor::matrix(dim, dim, h), theta_star, theta_pre, delta)
    }

    pub fn dim(&self) -> usize {
        self.theta_star.len()
    }

    pub fn with_delta(&self, delta: f64) -> Self {
        Self {
            delta,
            ..self.clone()
        }
    }

    pub fn loss(&self, theta: &[f64]) -> f64 {
        let d: Vec<f64> = theta.iter().zip(&self.theta_star).map(|(a, b)| a - b).collect();
        let hd = matvec(&self.h, &d);
        let quad: f64 = d.iter().zip(&hd).map(|(a, b)| a * b).sum();
        let reg: f64 = theta.iter().zip(&self.theta_pre).map(|(a, b)| (a - b) * (a - b)).sum();
        self.base + 0.5 * quad + 0.5 * self.delta * reg
    }

    pub fn gradient(&self, theta: &[f64]) -> Vec<f64> {
        let d: Vec<f64> = theta.iter().zip(&self.theta_star).map(|(a, b)| a - b).collect();
        matvec(&self.h, &d)
            .into_iter()
            .zip(theta.iter().zip(&self.theta_pre))
            .map(|(hd, (t, p))| hd + self.delta * (t - p))
            .collect()
    }
}

fn matvec(a: &Tensor, x: &[f64]) -> Vec<f64> {
    (0..a.rows()).map(|i| a.row(i).iter().zip(x).map(|(p, q)| p * q).sum()).collect()
}

/// Columns of `m` (row-major `n x n`) orthonormalized by modified Gram-Schmidt.
fn orthonormal(m: &[f64], n: usize) -> Vec<f64> {
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| (0..n).map(|i| m[i * n + j]).collect()).collect();
    for j in 0..n {
        for _ in 0..2 {
            for k in 0..j {
                let proj: f64 = cols[j].iter().zip(&cols[k]).map(|(a, b)| a * b).sum();
                let ck = cols[k].clone();
                for (a, b) in cols[j].iter_mut().zip(ck) {
                    *a -= proj * b;
                }
            }
        }
        let norm = cols[j].iter().map(|a| a * a).sum::<f64>().sqrt();
        for a in cols[j].iter_mut() {
            *a /= norm;
        }
    }
    let mut out = vec![0.0; n * n];
    for (j, c) in cols.iter().enumerate() {
        for (i, v) in c.iter().enumerate() {
            out[i * n + j] = *v;
        }
    }
    out
}

/// Minimizer through the eigendecomposition of `H`.
pub fn closed_form(p: &QuadProblem) -> Result<Vec<f64>> {
    let eig = sym_eig(&p.h)?;
    let n = p.dim();
    let q = &eig.vectors;
    let mut theta = vec![0.0; n];
    for k in 0..n {
        let lam = eig.values[k];
        let denom = lam + p.delta;
        if denom == 0.0 || !denom.is_finite() {
            return Err(Error::Domain(format!(
                "eigenvalue {lam} plus delta {} is singular",
                p.delta
            )));
        }
        let (mut star, mut pre) = (0.0, 0.0);
        for i in 0..n {
            star += q.at(i, k) * p.theta_star[i];
            pre += q.at(i, k) * p.theta_pre[i];
        }
        let coord = (lam * star + p.delta * pre) / denom;
        for i in 0..n {
            theta[i] += q.at(i, k) * coord;
        }
    }
    Ok(theta)
}

/// Gradient descent from `theta_pre` with step `1 / (lambda_max + delta)`,
/// stopping once the gradient norm drops below `1e-10`.
pub fn numeric(p: &QuadProblem) -> Result<Vec<f64>> {
    let eig = sym_eig(&p.h)?;
    let lmax = eig.values.first().copied().unwrap_or(0.0).max(0.0);
    if lmax + p.delta <= 0.0 {
        return Err(Error::Domain(format!("step 1/({lmax} + {}) is undefined", p.delta)));
    }
    let step = 1.0 / (lmax + p.delta);
    let mut theta = p.theta_pre.clone();
    let mut norm = f64::INFINITY;
    for _ in 0..MAX_ITERATIONS {
        let g = p.gradient(&theta);
        norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < GRAD_TOL {
            return Ok(theta);
        }
        for (t, g) in theta.iter_mut().zip(&g) {
            *t -= step * g;
        }
    }
    Err(Error::Convergence {
        iterations: MAX_ITERATIONS,
        grad_norm: norm,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Discrepancy {
    pub dim: usize,
    pub seed: u64,
    pub delta: f64,
    pub error: f64,
}

/// `max_inf |closed_form - numeric|` for one random instance per delta.
pub fn verify(dim: usize, seed: u64, delta_grid: &[f64]) -> Result<Vec<Discrepancy>> {
    let base = QuadProblem::random(dim, seed, 1.0)?;
    delta_grid
        .iter()
        .map(|&delta| {
            let p = base.with_delta(delta);
            let a = closed_form(&p)?;
            let b = numeric(&p)?;
            let error = a.iter().zip(&b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
            Ok(Discrepancy { dim, seed, delta, error })
        })
        .collect()
}

pub fn max_error(rows: &[Discrepancy]) -> f64 {
    rows.iter().fold(0.0f64, |m, r| m.max(r.error))
}

/// Distance of the regularized minimizer to `theta_pre`.
pub fn pull_distance(p: &QuadProblem) -> Result<f64> {
    let t = closed_form(p)?;
    Ok(t.iter().zip(&p.theta_pre).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(h: f64, star: f64, pre: f64, delta: f64) -> QuadProblem {
        QuadProblem::new(Tensor::matrix(1, 1, vec![h]), vec![star], vec![pre], delta).unwrap()
    }

    #[test]
    fn scalar_instance() {
        let p = scalar(2.0, 1.0, 0.0, 2.0);
        assert!((closed_form(&p).unwrap()[0] - 0.5).abs() < 1e-15);
        assert!((numeric(&p).unwrap()[0] - 0.5).abs() < 1e-9);
    }

    #[test]
    fn limits() {
        let p = QuadProblem::random(6, 3, 1e-12).unwrap();
        let t = closed_form(&p).unwrap();
        assert!(t.iter().zip(&p.theta_star).all(|(a, b)| (a - b).abs() < 1e-8));
        let flat = QuadProblem::new(Tensor::zeros(&[3, 3]), vec![1.0, 2.0, 3.0], vec![0.5, 0.0, -1.0], 0.3).unwrap();
        assert_eq!(closed_form(&flat).unwrap(), flat.theta_pre);
        let big = p.with_delta(1e6);
        for sol in [closed_form(&big).unwrap(), numeric(&big).unwrap()] {
            assert!(sol.iter().zip(&p.theta_pre).all(|(a, b)| (a - b).abs() < 1e-4));
        }
    }

    #[test]
    fn shared_endpoint_is_fixed() {
        let mut p = QuadProblem::random(5, 1, 0.1).unwrap();
        p.theta_pre = p.theta_star.clone();
        for sol in [closed_form(&p).unwrap(), numeric(&p).unwrap()] {
            assert!(sol.iter().zip(&p.theta_star).all(|(a, b)| (a - b).abs() < 1e-12));
        }
    }

    #[test]
    fn singular_system_is_a_domain_error() {
        let p = scalar(0.0, 1.0, 0.0, 0.0);
        assert!(matches!(closed_form(&p), Err(Error::Domain(_))));
    }

    #[test]
    fn random_instances_agree() {
        let rows = verify(8, 0, &[0.01]).unwrap();
        assert!(max_error(&rows) < 1e-6, "{rows:?}");
        let rows = verify(1, 17, &DELTA_GRID).unwrap();
        assert!(max_error(&rows) < 1e-9);
    }

    #[test]
    fn random_hessian_is_psd_with_planted_range() {
        let p = QuadProblem::random(8, 4, 0.1).unwrap();
        let eig = sym_eig(&p.h).unwrap();
        assert!(eig.values.iter().all(|&l| (1e-2 - 1e-9..=10.0 + 1e-9).contains(&l)));
    }

    #[test]
    fn coordinates_interpolate_in_the_eigenbasis() {
        let p = QuadProblem::random(6, 9, 0.05).unwrap();
        let eig = sym_eig(&p.h).unwrap();
        let t = closed_form(&p).unwrap();
        let proj = |v: &[f64], k: usize| (0..6).map(|i| eig.vectors.at(i, k) * v[i]).sum::<f64>();
        for k in 0..6 {
            let (a, b, c) = (proj(&p.theta_star, k), proj(&p.theta_pre, k), proj(&t, k));
            assert!(c >= a.min(b) - 1e-12 && c <= a.max(b) + 1e-12);
        }
    }

    #[test]
    fn stronger_delta_pulls_closer() {
        for seed in 0..5 {
            let p = QuadProblem::random(8, seed, 1.0).unwrap();
            let mut grid = DELTA_GRID.to_vec();
            grid.sort_by(f64::total_cmp);
            let dist: Vec<f64> = grid.iter().map(|&d| pull_distance(&p.with_delta(d)).unwrap()).collect();
            assert!(dist.windows(2).all(|w| w[1] <= w[0] + 1e-12), "{dist:?}");
        }
    }
}
