//! Metrics, best-epoch selection, aggregation columns and the run-matrix driver.

mod aggregate;
mod matrix;
mod metrics;

pub use aggregate::{aggregate, midranks, trimmed_mean, Aggregate, ScoreTable};
pub use matrix::{
    run_matrix, run_plan, worker_count, AggregateGroup, BenchConfig, BenchPlan, BenchReport, CellFailure,
    DatasetSpec, ResultCell, Shot, StrategySpec, Summary,
};
pub use metrics::{metric, rmse, roc_auc, select_best, MetricKind};
