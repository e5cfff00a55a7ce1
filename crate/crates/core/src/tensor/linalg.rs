use super::{matmul_tn, Tensor};
use crate::error::{Error, Result};

const MAX_SWEEPS: usize = 100;

/// Eigendecomposition `A = Q diag(values) Q^T` of a symmetric matrix.
#[derive(Clone, Debug)]
pub struct EigenPair {
    /// Sorted descending.
    pub values: Vec<f64>,
    /// Orthonormal eigenvectors stored as columns; column `k` pairs with `values[k]`.
    pub vectors: Tensor,
}

/// Thin SVD `A = U diag(s) V^T` with `r = min(rows, cols)` components.
#[derive(Clone, Debug)]
pub struct SvdResult {
    /// `rows x r`
    pub u: Tensor,
    /// Non-negative, sorted descending. The `i`-th smallest is `s[r - i]`.
    pub s: Vec<f64>,
    /// `cols x r`
    pub v: Tensor,
}

/// Cyclic Jacobi eigensolver for small dense symmetric matrices.
pub fn sym_eig(a: &Tensor) -> Result<EigenPair> {
    let n = a.rows();
    if a.shape().len() != 2 || a.cols() != n {
        return Err(Error::contract(format!(
            "sym_eig needs a square matrix, got {:?}",
            a.shape()
        )));
    }
    let mut asym = 0.0f64;
    for i in 0..n {
        for j in 0..i {
            asym = asym.max((a.at(i, j) - a.at(j, i)).abs());
        }
    }
    if asym >= 1e-10 {
        return Err(Error::contract(format!(
            "sym_eig input is not symmetric (max |A - A^T| = {asym:e})"
        )));
    }
    if a.data().iter().any(|x| !x.is_finite()) {
        return Err(Error::Domain("sym_eig input has non-finite entries".into()));
    }

    let mut m = a.data().to_vec();
    // symmetrize exactly so rotations see a consistent matrix
    for i in 0..n {
        for j in 0..i {
            let avg = 0.5 * (m[i * n + j] + m[j * n + i]);
            m[i * n + j] = avg;
            m[j * n + i] = avg;
        }
    }
    let mut v = Tensor::identity(n).into_data();
    let frob2: f64 = m.iter().map(|x| x * x).sum();

    for _ in 0..MAX_SWEEPS {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i * n + j] * m[i * n + j])
            .sum();
        if off <= 1e-32 * frob2 || off == 0.0 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (m[q * n + q] - m[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (m[k * n + p], m[k * n + q]);
                    m[k * n + p] = c * akp - s * akq;
                    m[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (m[p * n + k], m[q * n + k]);
                    m[p * n + k] = c * apk - s * aqk;
                    m[q * n + k] = s * apk + c * aqk;
                }
                m[p * n + q] = 0.0;
                m[q * n + p] = 0.0;
                for k in 0..n {
                    let (vkp, vkq) = (v[k * n + p], v[k * n + q]);
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[j * n + j].total_cmp(&m[i * n + i]).then(i.cmp(&j)));
    let values = order.iter().map(|&i| m[i * n + i]).collect();
    let mut vectors = vec![0.0; n * n];
    for (dst, &src) in order.iter().enumerate() {
        for k in 0..n {
            vectors[k * n + dst] = v[k * n + src];
        }
    }
    Ok(EigenPair {
        values,
        vectors: Tensor::matrix(n, n, vectors),
    })
}

/// Thin SVD through the eigendecomposition of the smaller Gram matrix.
pub fn svd(a: &Tensor) -> Result<SvdResult> {
    if a.data().iter().any(|x| !x.is_finite()) {
        return Err(Error::Domain("svd input has non-finite entries".into()));
    }
    let (m, n) = (a.rows(), a.cols());
    if m < n {
        let t = svd_tall(&a.transpose())?;
        return Ok(SvdResult {
            u: t.v,
            s: t.s,
            v: t.u,
        });
    }
    svd_tall(&Tensor::matrix(m, n, a.data().to_vec()))
}

/// `rows >= cols` case.
fn svd_tall(a: &Tensor) -> Result<SvdResult> {
    let (m, n) = (a.rows(), a.cols());
    let gram = Tensor::matrix(n, n, matmul_tn(a.data(), a.data(), m, n, n));
    let eig = sym_eig(&gram)?;
    let s: Vec<f64> = eig.values.iter().map(|&l| l.max(0.0).sqrt()).collect();
    let v = eig.vectors;
    let av = a.matmul(&v)?;
    let smax = s.first().copied().unwrap_or(0.0);
    let tol = smax * 1e-13 * m.max(n) as f64;

    let mut u = vec![0.0; m * n];
    let mut basis_probe = 0usize;
    for k in 0..n {
        let mut col: Vec<f64> = (0..m).map(|i| av.at(i, k)).collect();
        orthogonalize(&mut col, &u, m, n, k);
        let mut nrm = col.iter().map(|x| x * x).sum::<f64>().sqrt();
        if s[k] <= tol || nrm <= tol {
            // null direction: complete the basis with a unit vector orthogonal to the previous columns
            loop {
                col = vec![0.0; m];
                col[basis_probe % m] = 1.0;
                basis_probe += 1;
                orthogonalize(&mut col, &u, m, n, k);
                nrm = col.iter().map(|x| x * x).sum::<f64>().sqrt();
                if nrm > 1e-6 || basis_probe > 2 * m {
                    break;
                }
            }
        }
        for i in 0..m {
            u[i * n + k] = col[i] / nrm;
        }
    }
    Ok(SvdResult {
        u: Tensor::matrix(m, n, u),
        s,
        v,
    })
}

/// Two passes of modified Gram-Schmidt against the first `k` columns of `basis` (`m x cols`).
fn orthogonalize(col: &mut [f64], basis: &[f64], m: usize, cols: usize, k: usize) {
    for _ in 0..2 {
        for j in 0..k {
            let proj: f64 = (0..m).map(|i| basis[i * cols + j] * col[i]).sum();
            for i in 0..m {
                col[i] -= proj * basis[i * cols + j];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::matrix(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    fn reconstruct_eig(e: &EigenPair) -> Tensor {
        let n = e.values.len();
        let mut d = Tensor::zeros(&[n, n]);
        for i in 0..n {
            d.set(i, i, e.values[i]);
        }
        e.vectors.matmul(&d).unwrap().matmul(&e.vectors.transpose()).unwrap()
    }

    fn reconstruct_svd(r: &SvdResult) -> Tensor {
        let k = r.s.len();
        let mut d = Tensor::zeros(&[k, k]);
        for i in 0..k {
            d.set(i, i, r.s[i]);
        }
        r.u.matmul(&d).unwrap().matmul(&r.v.transpose()).unwrap()
    }

    fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
        a.data().iter().zip(b.data()).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
    }

    #[test]
    fn diagonal_input() {
        let e = sym_eig(&Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 2.0])).unwrap();
        assert_eq!(e.values, vec![2.0, 1.0]);
        assert_eq!(e.vectors.at(1, 0).abs(), 1.0);
        assert_eq!(e.vectors.at(0, 1).abs(), 1.0);
    }

    #[test]
    fn zero_matrix() {
        let e = sym_eig(&Tensor::zeros(&[3, 3])).unwrap();
        assert_eq!(e.values, vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn asymmetric_input_is_rejected() {
        let a = Tensor::matrix(2, 2, vec![1.0, 2.0, 0.0, 1.0]);
        assert!(matches!(sym_eig(&a), Err(Error::Contract(_))));
    }

    #[test]
    fn recovers_planted_spectrum() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        // random rotation from Gram-Schmidt on a random matrix
        let g = random_matrix(&mut rng, 3, 3);
        let mut q = vec![0.0; 9];
        for k in 0..3 {
            let mut col: Vec<f64> = (0..3).map(|i| g.at(i, k)).collect();
            orthogonalize(&mut col, &q, 3, 3, k);
            let n = col.iter().map(|x| x * x).sum::<f64>().sqrt();
            for i in 0..3 {
                q[i * 3 + k] = col[i] / n;
            }
        }
        let q = Tensor::matrix(3, 3, q);
        let lam = Tensor::matrix(3, 3, vec![5.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 1.0]);
        let mut a = q.matmul(&lam).unwrap().matmul(&q.transpose()).unwrap();
        // exact symmetry
        for i in 0..3 {
            for j in 0..i {
                let v = a.at(i, j);
                a.set(j, i, v);
            }
        }
        let e = sym_eig(&a).unwrap();
        for (got, want) in e.values.iter().zip([5.0, 2.0, 1.0]) {
            assert!((got - want).abs() < 1e-9, "{got} vs {want}");
        }
    }

    #[test]
    fn eig_reconstruction_on_random_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for trial in 0..100 {
            let n = 1 + trial % 12;
            let b = random_matrix(&mut rng, n, n);
            let a = Tensor::matrix(n, n, {
                let bt = b.transpose();
                b.data().iter().zip(bt.data()).map(|(x, y)| x + y).collect()
            });
            let e = sym_eig(&a).unwrap();
            assert!(e.values.windows(2).all(|w| w[0] >= w[1]));
            let scale = a.norm_inf().max(1e-300);
            assert!(max_diff(&reconstruct_eig(&e), &a) < 1e-9 * scale);
            let vtv = e.vectors.transpose().matmul(&e.vectors).unwrap();
            assert!(max_diff(&vtv, &Tensor::identity(n)) < 1e-10);
        }
    }

    #[test]
    fn svd_of_diagonal() {
        let r = svd(&Tensor::matrix(2, 2, vec![3.0, 0.0, 0.0, 4.0])).unwrap();
        assert_eq!(r.s, vec![4.0, 3.0]);
    }

    #[test]
    fn svd_of_rank_one() {
        let u = [2.0, 0.0, 0.0];
        let v = [0.0, 3.0, 0.0, 0.0];
        let a = Tensor::matrix(3, 4, (0..12).map(|i| u[i / 4] * v[i % 4]).collect());
        let r = svd(&a).unwrap();
        assert!((r.s[0] - 6.0).abs() < 1e-12);
        assert!(r.s[1..].iter().all(|&x| x.abs() < 1e-7));
        assert!(max_diff(&reconstruct_svd(&r), &a) < 1e-8 * a.norm_inf());
    }

    #[test]
    fn svd_matches_gram_eigenvalues_and_reconstructs() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for trial in 0..100 {
            let (r, c) = if trial % 2 == 0 { (8, 6) } else { (1 + trial % 7, 2 + trial % 9) };
            let a = random_matrix(&mut rng, r, c);
            let dec = svd(&a).unwrap();
            assert_eq!(dec.s.len(), r.min(c));
            assert!(dec.s.windows(2).all(|w| w[0] >= w[1]));
            assert!(dec.s.iter().all(|&x| x >= 0.0));
            assert!(max_diff(&reconstruct_svd(&dec), &a) < 1e-8 * a.norm_inf());
            if (r, c) == (8, 6) {
                let g = a.transpose().matmul(&a).unwrap();
                let e = sym_eig(&g).unwrap();
                for (s, l) in dec.s.iter().zip(&e.values) {
                    assert!((s - l.max(0.0).sqrt()).abs() < 1e-8);
                }
            }
        }
    }

    #[test]
    fn svd_rejects_non_finite() {
        let a = Tensor::matrix(1, 2, vec![f64::NAN, 1.0]);
        assert!(matches!(svd(&a), Err(Error::Domain(_))));
    }
}
