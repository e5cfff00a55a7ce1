use serde::{Deserialize, Serialize};

use crate::data::TaskKind;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Auc,
    Rmse,
}

impl MetricKind {
    pub fn for_task(kind: TaskKind) -> Self {
        match kind {
            TaskKind::Classification => MetricKind::Auc,
            TaskKind::Regression => MetricKind::Rmse,
        }
    }

    pub fn higher_is_better(self) -> bool {
        matches!(self, MetricKind::Auc)
    }

    /// Whether `a` is strictly better than `b`. NaN is never better.
    pub fn better(self, a: f64, b: f64) -> bool {
        if a.is_nan() {
            return false;
        }
        if b.is_nan() {
            return true;
        }
        if self.higher_is_better() {
            a > b
        } else {
            a < b
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            MetricKind::Auc => "auc",
            MetricKind::Rmse => "rmse",
        }
    }
}

/// ROC-AUC per task (column), averaged over tasks that have both classes
/// among their observed cells. Ties count one half.
pub fn roc_auc(scores: &Tensor, labels: &Tensor, mask: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() || scores.len() != mask.len() {
        return Err(Error::contract("roc_auc operands differ in size"));
    }
    let (rows, tasks) = (scores.rows(), scores.cols());
    let mut total = 0.0;
    let mut valid = 0usize;
    for t in 0..tasks {
        let mut cells: Vec<(f64, bool)> = Vec::new();
        for r in 0..rows {
            let i = r * tasks + t;
            if mask[i] {
                let y = labels.data()[i];
                if y != 0.0 && y != 1.0 {
                    return Err(Error::contract(format!("label {y} is not binary")));
                }
                cells.push((scores.data()[i], y == 1.0));
            }
        }
        if let Some(auc) = task_auc(&mut cells) {
            total += auc;
            valid += 1;
        }
    }
    if valid == 0 {
        return Err(Error::UndefinedMetric(
            "no task has both positive and negative observed labels".into(),
        ));
    }
    Ok(total / valid as f64)
}

/// Mann-Whitney form with midranks; `None` when a class is absent.
fn task_auc(cells: &mut [(f64, bool)]) -> Option<f64> {
    let pos = cells.iter().filter(|c| c.1).count();
    let neg = cells.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    cells.sort_by(|a, b| a.0.total_cmp(&b.0));
    // twice the rank sum keeps midranks integral
    let mut rank2_sum_pos: u128 = 0;
    let mut i = 0;
    while i < cells.len() {
        let mut j = i;
        while j + 1 < cells.len() && cells[j + 1].0 == cells[i].0 {
            j += 1;
        }
        // ranks i+1 ..= j+1, midrank * 2 = i + j + 2
        let mid2 = (i + j + 2) as u128;
        let p = cells[i..=j].iter().filter(|c| c.1).count() as u128;
        rank2_sum_pos += mid2 * p;
        i = j + 1;
    }
    let (p, n) = (pos as u128, neg as u128);
    // numerator*2 = 2*ranksum - P(P+1)
    let twice_u = rank2_sum_pos - p * (p + 1);
    Some(twice_u as f64 / 2.0 / (p * n) as f64)
}

/// Root mean squared error over observed cells.
pub fn rmse(preds: &Tensor, targets: &Tensor, mask: &[bool]) -> Result<f64> {
    if preds.len() != targets.len() || preds.len() != mask.len() {
        return Err(Error::contract("rmse operands differ in size"));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for ((&p, &y), &m) in preds.data().iter().zip(targets.data()).zip(mask) {
        if m {
            sum += (p - y) * (p - y);
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::UndefinedMetric("rmse over zero observed cells".into()));
    }
    Ok((sum / count as f64).sqrt())
}

pub fn metric(kind: MetricKind, scores: &Tensor, labels: &Tensor, mask: &[bool]) -> Result<f64> {
    match kind {
        MetricKind::Auc => roc_auc(scores, labels, mask),
        MetricKind::Rmse => rmse(scores, labels, mask),
    }
}

/// Index of the best validation value (earliest on ties) and the paired test value.
pub fn select_best(val: &[f64], test: &[f64], kind: MetricKind) -> Result<(usize, f64)> {
    if val.is_empty() || val.len() != test.len() {
        return Err(Error::contract(
            "select_best needs a non-empty validation curve paired with test values",
        ));
    }
    let mut best = 0;
    for (i, &v) in val.iter().enumerate().skip(1) {
        if kind.better(v, val[best]) {
            best = i;
        }
    }
    Ok((best, test[best]))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn col(v: &[f64]) -> Tensor {
        Tensor::matrix(v.len(), 1, v.to_vec())
    }

    #[test]
    fn perfect_and_tied_rankings() {
        let y = col(&[1.0, 0.0]);
        assert_eq!(roc_auc(&col(&[0.9, 0.1]), &y, &[true, true]).unwrap(), 1.0);
        assert_eq!(roc_auc(&col(&[0.5, 0.5]), &y, &[true, true]).unwrap(), 0.5);
        assert_eq!(roc_auc(&col(&[0.1, 0.9]), &y, &[true, true]).unwrap(), 0.0);
    }

    #[test]
    fn single_class_tasks_are_skipped() {
        // task 0 has both classes, task 1 only positives
        let s = Tensor::matrix(3, 2, vec![0.9, 0.1, 0.2, 0.5, 0.4, 0.3]);
        let y = Tensor::matrix(3, 2, vec![1.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        let m = vec![true; 6];
        assert_eq!(roc_auc(&s, &y, &m).unwrap(), 1.0);
        let only_pos = vec![false, true, false, true, false, true];
        assert!(matches!(roc_auc(&s, &y, &only_pos), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn rmse_cases() {
        let t = col(&[0.0, 0.0]);
        assert_eq!(rmse(&t, &t, &[true, true]).unwrap(), 0.0);
        let p = col(&[3.0, 4.0]);
        assert!((rmse(&p, &t, &[true, true]).unwrap() - (12.5f64).sqrt()).abs() < 1e-15);
        assert_eq!(rmse(&p, &t, &[true, false]).unwrap(), 3.0);
        assert!(matches!(rmse(&p, &t, &[false, false]), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn best_epoch_rules() {
        let test = [10.0, 11.0, 12.0];
        assert_eq!(select_best(&[0.6, 0.8, 0.7], &test, MetricKind::Auc).unwrap(), (1, 11.0));
        assert_eq!(select_best(&[1.0, 0.9, 0.9], &test, MetricKind::Rmse).unwrap(), (1, 11.0));
        assert_eq!(select_best(&[0.1, 0.2, 0.3], &test, MetricKind::Auc).unwrap(), (2, 12.0));
        assert_eq!(select_best(&[f64::NAN, 0.2, 0.3], &test, MetricKind::Rmse).unwrap(), (1, 11.0));
        assert!(select_best(&[], &[], MetricKind::Auc).is_err());
    }
}
