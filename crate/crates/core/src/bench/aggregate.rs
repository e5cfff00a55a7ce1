use serde::{Deserialize, Serialize};

use super::MetricKind;
use crate::error::{Error, Result};

/// Strategy x dataset matrix of scores, one metric kind per dataset column.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreTable {
    pub strategies: Vec<String>,
    pub datasets: Vec<(String, MetricKind)>,
    /// `values[s][d]`; `None` marks a hole.
    pub values: Vec<Vec<Option<f64>>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub strategy: String,
    pub avg: f64,
    /// Mean with one maximum and one minimum removed; needs three datasets.
    pub avg_f: Option<f64>,
    pub avg_r: f64,
    /// Rank of the mean min-max-normalized score.
    pub avg_r_star: f64,
}

/// Mean after dropping exactly one largest and one smallest value.
pub fn trimmed_mean(values: &[f64]) -> Option<f64> {
    if values.len() < 3 {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Some(v[1..v.len() - 1].iter().sum::<f64>() / (v.len() - 2) as f64)
}

/// Midranks (1 = best) of `scores`, where `higher` says which direction wins.
pub fn midranks(scores: &[f64], higher: bool) -> Vec<f64> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        let c = scores[a].total_cmp(&scores[b]);
        if higher {
            c.reverse()
        } else {
            c
        }
    });
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let r = (i + j + 2) as f64 / 2.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// AVG, AVG-F, AVG-R and AVG-R* per strategy.
///
/// AVG-R* normalizes each dataset column to `[0, 1]` across strategies
/// (RMSE negated first; a constant column maps to 0), averages per strategy,
/// then ranks those averages.
pub fn aggregate(table: &ScoreTable) -> Result<Vec<Aggregate>> {
    let (ns, nd) = (table.strategies.len(), table.datasets.len());
    if ns == 0 || nd == 0 {
        return Err(Error::validation("aggregation needs at least one strategy and one dataset"));
    }
    let mut full = vec![vec![0.0; nd]; ns];
    for (s, row) in table.values.iter().enumerate() {
        if row.len() != nd {
            return Err(Error::validation(format!("row `{}` has {} columns", table.strategies[s], row.len())));
        }
        for (d, v) in row.iter().enumerate() {
            full[s][d] = v.ok_or_else(|| {
                Error::validation(format!(
                    "missing value for strategy `{}` on dataset `{}`",
                    table.strategies[s], table.datasets[d].0
                ))
            })?;
        }
    }
    if table.values.len() != ns {
        return Err(Error::validation("score table rows do not match the strategy list"));
    }

    let mut rank_sum = vec![0.0; ns];
    let mut norm_sum = vec![0.0; ns];
    for (d, (_, kind)) in table.datasets.iter().enumerate() {
        let column: Vec<f64> = full.iter().map(|r| r[d]).collect();
        for (s, r) in midranks(&column, kind.higher_is_better()).into_iter().enumerate() {
            rank_sum[s] += r;
        }
        let oriented: Vec<f64> = column
            .iter()
            .map(|&v| if kind.higher_is_better() { v } else { -v })
            .collect();
        let lo = oriented.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = oriented.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for (s, v) in oriented.into_iter().enumerate() {
            norm_sum[s] += if hi > lo { (v - lo) / (hi - lo) } else { 0.0 };
        }
    }
    let norm_mean: Vec<f64> = norm_sum.iter().map(|v| v / nd as f64).collect();
    let star = midranks(&norm_mean, true);
    Ok((0..ns)
        .map(|s| Aggregate {
            strategy: table.strategies[s].clone(),
            avg: full[s].iter().sum::<f64>() / nd as f64,
            avg_f: trimmed_mean(&full[s]),
            avg_r: rank_sum[s] / nd as f64,
            avg_r_star: star[s],
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(rows: &[(&str, &[f64])], kinds: &[MetricKind]) -> ScoreTable {
        ScoreTable {
            strategies: rows.iter().map(|r| r.0.to_string()).collect(),
            datasets: kinds.iter().enumerate().map(|(i, k)| (format!("d{i}"), *k)).collect(),
            values: rows.iter().map(|r| r.1.iter().map(|&v| Some(v)).collect()).collect(),
        }
    }

    #[test]
    fn trimmed_mean_drops_one_of_each_extreme() {
        assert_eq!(trimmed_mean(&[1.0, 2.0, 3.0, 4.0, 5.0]), Some(3.0));
        assert_eq!(trimmed_mean(&[1.0, 1.0, 5.0, 5.0]), Some(3.0));
        assert_eq!(trimmed_mean(&[1.0, 2.0]), None);
    }

    #[test]
    fn symmetric_ranks() {
        let t = table(&[("a", &[0.9, 0.8]), ("b", &[0.8, 0.9])], &[MetricKind::Auc; 2]);
        let agg = aggregate(&t).unwrap();
        assert_eq!(agg[0].avg_r, 1.5);
        assert_eq!(agg[1].avg_r, 1.5);
        assert_eq!(agg[0].avg_r_star, agg[1].avg_r_star);
    }

    #[test]
    fn rmse_columns_rank_low_first() {
        let t = table(&[("a", &[1.0]), ("b", &[2.0])], &[MetricKind::Rmse]);
        let agg = aggregate(&t).unwrap();
        assert_eq!((agg[0].avg_r, agg[1].avg_r), (1.0, 2.0));
        assert_eq!((agg[0].avg_r_star, agg[1].avg_r_star), (1.0, 2.0));
    }

    #[test]
    fn midrank_ties() {
        assert_eq!(midranks(&[0.5, 0.9, 0.5, 0.1], true), vec![2.5, 1.0, 2.5, 4.0]);
        assert_eq!(midranks(&[3.0, 1.0], false), vec![2.0, 1.0]);
    }

    #[test]
    fn holes_are_named() {
        let mut t = table(&[("a", &[1.0, 2.0]), ("b", &[2.0, 1.0])], &[MetricKind::Auc; 2]);
        t.values[1][0] = None;
        match aggregate(&t) {
            Err(Error::Validation(msg)) => assert!(msg.contains("`b`") && msg.contains("`d0`")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn equal_values_make_avg_and_avg_f_agree() {
        let t = table(&[("a", &[0.7; 4])], &[MetricKind::Auc; 4]);
        let agg = aggregate(&t).unwrap();
        assert_eq!(Some(agg[0].avg), agg[0].avg_f);
    }
}
