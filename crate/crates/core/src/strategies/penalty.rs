use crate::error::{Error, Result};
use crate::model::{ParamGroup, ParamSet};
use crate::tensor::{svd, Tape, Tensor, Var};

/// `(delta / 2) * sum_j ||theta_j - pre_j||^2` over the given `(leaf, reference)` pairs.
pub fn l2sp_penalty(tape: &mut Tape, pairs: &[(Var, &Tensor)], delta: f64) -> Result<Var> {
    let mut total: Option<Var> = None;
    for &(theta, pre) in pairs {
        if tape.value(theta).shape() != pre.shape() {
            return Err(Error::contract(format!(
                "l2sp shapes differ: {:?} vs {:?}",
                tape.value(theta).shape(),
                pre.shape()
            )));
        }
        let p = tape.constant(pre.clone());
        let d = tape.sub(theta, p)?;
        let sq = tape.mul(d, d)?;
        let s = tape.sum(sq);
        total = Some(match total {
            Some(t) => tape.add(t, s)?,
            None => s,
        });
    }
    let total = match total {
        Some(t) => t,
        None => tape.constant(Tensor::scalar(0.0)),
    };
    Ok(tape.scale(total, delta / 2.0))
}

/// Value of the starting-point penalty over the encoder and input-embedding leaves.
pub fn l2sp_value(theta: &ParamSet, pre: &ParamSet, delta: f64) -> Result<f64> {
    theta.check_compatible(pre)?;
    let pre_leaves = pre.leaves();
    let mut sum = 0.0;
    for ((name, t), (_, p)) in theta.leaves().into_iter().zip(pre_leaves) {
        if ParamGroup::of(&name).is_some_and(ParamGroup::is_encoder) {
            sum += t.data().iter().zip(p.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        }
    }
    Ok(delta / 2.0 * sum)
}

/// `delta * sum_rows (1/2) ||f_row - f_pre_row||^2`; `f_pre` is a constant.
pub fn feature_map_penalty(tape: &mut Tape, f: Var, f_pre: &Tensor, delta: f64) -> Result<Var> {
    if tape.value(f).shape() != f_pre.shape() {
        return Err(Error::contract(format!(
            "feature-map shapes differ: {:?} vs {:?}",
            tape.value(f).shape(),
            f_pre.shape()
        )));
    }
    let p = tape.constant(f_pre.clone());
    let d = tape.sub(f, p)?;
    let sq = tape.mul(d, d)?;
    let s = tape.sum(sq);
    Ok(tape.scale(s, delta / 2.0))
}

/// `delta * sum of the k smallest squared singular values of F`.
pub fn bss_penalty(tape: &mut Tape, f: Var, k: usize, delta: f64) -> Result<Var> {
    let r = tape.value(f).rows().min(tape.value(f).cols());
    if k == 0 || k > r {
        return Err(Error::contract(format!(
            "k = {k} singular values requested from a matrix with {r}"
        )));
    }
    let s = tape.singular_values(f)?;
    let tail = tape.take(s, (r - k..r).collect::<Vec<_>>().into())?;
    let sq = tape.mul(tail, tail)?;
    let total = tape.sum(sq);
    Ok(tape.scale(total, delta))
}

/// Value-only version of [`bss_penalty`].
pub fn bss_value(f: &Tensor, k: usize, delta: f64) -> Result<f64> {
    let s = svd(f)?.s;
    if k == 0 || k > s.len() {
        return Err(Error::contract(format!(
            "k = {k} singular values requested from a matrix with {}",
            s.len()
        )));
    }
    Ok(delta * s[s.len() - k..].iter().map(|x| x * x).sum::<f64>())
}
