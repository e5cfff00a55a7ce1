use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{aggregate, Aggregate, MetricKind, ScoreTable};
use crate::data::{fewshot, load_dataset_as, split, Dataset, SplitScheme, TaskKind, DEFAULT_FRACTIONS};
use crate::error::{Error, Result};
use crate::model::{Checkpoint, ParamSet};
use crate::strategies::{finetune, finetune_from_full, RunArtifacts, RunData, StrategyConfig, StrategyKind};

/// Few-shot size, or the whole training split.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Shot {
    Full,
    Few(usize),
}

impl Shot {
    pub fn label(self) -> String {
        match self {
            Shot::Full => "non".into(),
            Shot::Few(n) => n.to_string(),
        }
    }
}

impl Serialize for Shot {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Shot::Full => s.serialize_str("non"),
            Shot::Few(n) => s.serialize_u64(*n as u64),
        }
    }
}

impl<'de> Deserialize<'de> for Shot {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        match Value::deserialize(d)? {
            Value::String(s) if s == "non" => Ok(Shot::Full),
            Value::Number(n) if n.as_u64().is_some_and(|v| v > 0) => Ok(Shot::Few(n.as_u64().unwrap() as usize)),
            other => Err(serde::de::Error::custom(format!(
                "shot must be \"non\" or a positive integer, got {other}"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub name: String,
    pub path: PathBuf,
    #[serde(default)]
    pub task_kind: Option<TaskKind>,
}

/// A strategy row of the report: a base configuration and a grid of overrides
/// whose points are selected on validation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrategySpec {
    pub label: String,
    pub config: Value,
    #[serde(default)]
    pub grid: BTreeMap<String, Vec<Value>>,
}

impl StrategySpec {
    /// Every grid point, in lexicographic order of the (sorted) grid keys.
    pub fn configs(&self) -> Result<Vec<StrategyConfig>> {
        let Value::Object(base) = &self.config else {
            return Err(Error::config("config", format!("strategy `{}` needs a JSON object", self.label)));
        };
        let mut points = vec![base.clone()];
        for (key, values) in &self.grid {
            if values.is_empty() {
                return Err(Error::config(key.clone(), format!("empty grid in strategy `{}`", self.label)));
            }
            points = points
                .into_iter()
                .flat_map(|p| {
                    values.iter().map(move |v| {
                        let mut q = p.clone();
                        q.insert(key.clone(), v.clone());
                        q
                    })
                })
                .collect();
        }
        points
            .into_iter()
            .map(|p| StrategyConfig::from_json(&Value::Object(p).to_string()))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    /// Name -> checkpoint file.
    pub checkpoints: BTreeMap<String, PathBuf>,
    pub datasets: Vec<DatasetSpec>,
    pub strategies: Vec<StrategySpec>,
    #[serde(default = "default_splits")]
    pub splits: Vec<SplitScheme>,
    #[serde(default = "default_fractions")]
    pub fractions: [f64; 3],
    /// Seed of the random split; the run seed drives everything else.
    #[serde(default)]
    pub split_seed: u64,
    #[serde(default = "default_shots")]
    pub shots: Vec<Shot>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
}

fn default_splits() -> Vec<SplitScheme> {
    vec![SplitScheme::Scaffold]
}
fn default_fractions() -> [f64; 3] {
    DEFAULT_FRACTIONS
}
fn default_shots() -> Vec<Shot> {
    vec![Shot::Full]
}
fn default_seeds() -> Vec<u64> {
    (0..5).collect()
}

/// A [`BenchConfig`] with every file loaded and every grid expanded.
pub struct BenchPlan {
    pub checkpoints: Vec<(String, ParamSet)>,
    pub datasets: Vec<(String, Dataset)>,
    pub strategies: Vec<(String, Vec<StrategyConfig>)>,
    pub splits: Vec<SplitScheme>,
    pub fractions: [f64; 3],
    pub split_seed: u64,
    pub shots: Vec<Shot>,
    pub seeds: Vec<u64>,
}

impl BenchConfig {
    /// Resolves paths against `base` and loads everything up front.
    pub fn load_plan(&self, base: &Path) -> Result<BenchPlan> {
        if self.strategies.is_empty() || self.datasets.is_empty() || self.checkpoints.is_empty() {
            return Err(Error::config("strategies/datasets/checkpoints", "must all be non-empty"));
        }
        if self.seeds.is_empty() || self.shots.is_empty() || self.splits.is_empty() {
            return Err(Error::config("seeds/shots/splits", "must all be non-empty"));
        }
        let mut labels = std::collections::BTreeSet::new();
        for s in &self.strategies {
            if !labels.insert(&s.label) {
                return Err(Error::config("strategies", format!("duplicate label `{}`", s.label)));
            }
        }
        let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
        let checkpoints = self
            .checkpoints
            .iter()
            .map(|(name, p)| Ok((name.clone(), Checkpoint::load(resolve(p))?.params)))
            .collect::<Result<Vec<_>>>()?;
        let datasets = self
            .datasets
            .iter()
            .map(|d| Ok((d.name.clone(), load_dataset_as(resolve(&d.path), d.task_kind)?)))
            .collect::<Result<Vec<_>>>()?;
        let strategies = self
            .strategies
            .iter()
            .map(|s| Ok((s.label.clone(), s.configs()?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(BenchPlan {
            checkpoints,
            datasets,
            strategies,
            splits: self.splits.clone(),
            fractions: self.fractions,
            split_seed: self.split_seed,
            shots: self.shots.clone(),
            seeds: self.seeds.clone(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultCell {
    pub checkpoint: String,
    pub strategy: String,
    pub dataset: String,
    pub split: SplitScheme,
    pub shot: Shot,
    pub seed: u64,
    pub metric: MetricKind,
    pub value: f64,
    pub val_metric: f64,
    /// Index into the strategy's grid of the selected point.
    pub selected: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellFailure {
    pub checkpoint: String,
    pub strategy: String,
    pub dataset: String,
    pub split: SplitScheme,
    pub shot: Shot,
    pub seed: u64,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub checkpoint: String,
    pub strategy: String,
    pub dataset: String,
    pub split: SplitScheme,
    pub shot: Shot,
    pub metric: MetricKind,
    pub mean: f64,
    /// Sample standard deviation over seeds (0 for a single seed).
    pub std: f64,
    pub seeds: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateGroup {
    pub checkpoint: String,
    pub split: SplitScheme,
    pub shot: Shot,
    pub rows: Vec<Aggregate>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub cells: Vec<ResultCell>,
    pub failures: Vec<CellFailure>,
    pub summaries: Vec<Summary>,
    pub aggregates: Vec<AggregateGroup>,
    /// Groups without aggregates and why.
    pub notes: Vec<String>,
}

struct Job<'a> {
    checkpoint: (&'a str, &'a ParamSet),
    strategy: (&'a str, &'a [StrategyConfig]),
    dataset: (&'a str, &'a Dataset),
    split: SplitScheme,
    shot: Shot,
    seed: u64,
}

/// Worker count from `ROFT_WORKERS`, else the machine's parallelism.
pub fn worker_count() -> usize {
    std::env::var("ROFT_WORKERS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

pub fn run_matrix(cfg: &BenchConfig, base: &Path) -> Result<BenchReport> {
    run_plan(&cfg.load_plan(base)?, worker_count())
}

/// Runs every cell on a pool of `workers` threads. Results keep the job order,
/// so the report does not depend on scheduling.
pub fn run_plan(plan: &BenchPlan, workers: usize) -> Result<BenchReport> {
    let mut splits = HashMap::new();
    for (name, ds) in &plan.datasets {
        for &scheme in &plan.splits {
            splits.insert((name.as_str(), scheme), split(ds, scheme, plan.fractions, plan.split_seed));
        }
    }
    let mut jobs = Vec::new();
    for (cname, ck) in &plan.checkpoints {
        for &scheme in &plan.splits {
            for &shot in &plan.shots {
                for (sname, grid) in &plan.strategies {
                    for (dname, ds) in &plan.datasets {
                        for &seed in &plan.seeds {
                            jobs.push(Job {
                                checkpoint: (cname, ck),
                                strategy: (sname, grid),
                                dataset: (dname, ds),
                                split: scheme,
                                shot,
                                seed,
                            });
                        }
                    }
                }
            }
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::config("ROFT_WORKERS", e.to_string()))?;
    let outcomes: Vec<std::result::Result<ResultCell, CellFailure>> = pool.install(|| {
        jobs.par_iter()
            .map(|job| {
                let sp = splits[&(job.dataset.0, job.split)].as_ref().map_err(|e| e.to_string());
                run_cell(job, sp).map_err(|error| CellFailure {
                    checkpoint: job.checkpoint.0.to_string(),
                    strategy: job.strategy.0.to_string(),
                    dataset: job.dataset.0.to_string(),
                    split: job.split,
                    shot: job.shot,
                    seed: job.seed,
                    error,
                })
            })
            .collect()
    });
    let mut cells = Vec::new();
    let mut failures = Vec::new();
    for o in outcomes {
        match o {
            Ok(c) => cells.push(c),
            Err(f) => failures.push(f),
        }
    }
    Ok(summarize(plan, cells, failures))
}

fn run_cell(job: &Job, sp: std::result::Result<&crate::data::Split, String>) -> std::result::Result<ResultCell, String> {
    let sp = sp?;
    let ds = job.dataset.1;
    let train = match job.shot {
        Shot::Full => sp.train.clone(),
        Shot::Few(n) => fewshot(&sp.train, n, job.seed).map_err(|e| e.to_string())?,
    };
    let data = RunData {
        ds,
        train: &train,
        val: &sp.val,
        test: &sp.test,
    };
    let pre = job.checkpoint.1;
    let kind = crate::bench::MetricKind::for_task(ds.task_kind);
    let mut full_runs: HashMap<String, RunArtifacts> = HashMap::new();
    let mut best: Option<(usize, RunArtifacts)> = None;
    for (i, base) in job.strategy.1.iter().enumerate() {
        let cfg = StrategyConfig {
            seed: job.seed,
            ..base.clone()
        };
        let run = if cfg.kind.builds_on_full() {
            let full_cfg = full_run_key(&cfg);
            let key = serde_json::to_string(&full_cfg).map_err(|e| e.to_string())?;
            if !full_runs.contains_key(&key) {
                let full = finetune(pre, &data, &full_cfg).map_err(|e| e.to_string())?;
                full_runs.insert(key.clone(), full);
            }
            finetune_from_full(pre, &data, &cfg, &full_runs[&key])
        } else {
            finetune(pre, &data, &cfg)
        }
        .map_err(|e| e.to_string())?;
        if best.as_ref().is_none_or(|(_, b)| kind.better(run.val_metric, b.val_metric)) {
            best = Some((i, run));
        }
    }
    let (selected, run) = best.ok_or_else(|| "strategy has an empty grid".to_string())?;
    Ok(ResultCell {
        checkpoint: job.checkpoint.0.to_string(),
        strategy: job.strategy.0.to_string(),
        dataset: job.dataset.0.to_string(),
        split: job.split,
        shot: job.shot,
        seed: job.seed,
        metric: kind,
        value: run.test_metric,
        val_metric: run.val_metric,
        selected,
    })
}

/// The full fine-tuning configuration underneath a wise or dwise point, with
/// the interpolation settings reset so that points differing only there share it.
fn full_run_key(cfg: &StrategyConfig) -> StrategyConfig {
    let d = StrategyConfig::default();
    StrategyConfig {
        kind: StrategyKind::Full,
        alpha: d.alpha,
        alpha_init: d.alpha_init,
        alpha_lr: d.alpha_lr,
        alpha_epochs: d.alpha_epochs,
        ..cfg.clone()
    }
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn summarize(plan: &BenchPlan, cells: Vec<ResultCell>, failures: Vec<CellFailure>) -> BenchReport {
    let mut summaries = Vec::new();
    let mut aggregates = Vec::new();
    let mut notes = Vec::new();
    for (cname, _) in &plan.checkpoints {
        for &scheme in &plan.splits {
            for &shot in &plan.shots {
                let mut values = Vec::new();
                for (sname, _) in &plan.strategies {
                    let mut row = Vec::new();
                    for (dname, ds) in &plan.datasets {
                        let vals: Vec<f64> = cells
                            .iter()
                            .filter(|c| {
                                &c.checkpoint == cname
                                    && c.split == scheme
                                    && c.shot == shot
                                    && &c.strategy == sname
                                    && &c.dataset == dname
                            })
                            .map(|c| c.value)
                            .collect();
                        let complete = vals.len() == plan.seeds.len();
                        if !vals.is_empty() {
                            let (mean, std) = mean_std(&vals);
                            summaries.push(Summary {
                                checkpoint: cname.clone(),
                                strategy: sname.clone(),
                                dataset: dname.clone(),
                                split: scheme,
                                shot,
                                metric: MetricKind::for_task(ds.task_kind),
                                mean,
                                std,
                                seeds: vals.len(),
                            });
                            row.push(complete.then_some(mean));
                        } else {
                            row.push(None);
                        }
                    }
                    values.push(row);
                }
                let group = format!("{cname} / {} / shot {}", scheme.as_str(), shot.label());
                if plan.datasets.len() < 3 {
                    notes.push(format!(
                        "{group}: no aggregates, {} dataset(s) (AVG-F needs at least 3)",
                        plan.datasets.len()
                    ));
                    continue;
                }
                let table = ScoreTable {
                    strategies: plan.strategies.iter().map(|s| s.0.clone()).collect(),
                    datasets: plan
                        .datasets
                        .iter()
                        .map(|(n, d)| (n.clone(), MetricKind::for_task(d.task_kind)))
                        .collect(),
                    values,
                };
                match aggregate(&table) {
                    Ok(rows) => aggregates.push(AggregateGroup {
                        checkpoint: cname.clone(),
                        split: scheme,
                        shot,
                        rows,
                    }),
                    Err(e) => notes.push(format!("{group}: aggregates incomplete, {e}")),
                }
            }
        }
    }
    BenchReport {
        cells,
        failures,
        summaries,
        aggregates,
        notes,
    }
}

impl BenchReport {
    /// One row per successful cell.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("checkpoint,strategy,dataset,split,shot,seed,metric,value\n");
        for c in &self.cells {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{:.6}",
                csv_field(&c.checkpoint),
                csv_field(&c.strategy),
                csv_field(&c.dataset),
                c.split.as_str(),
                c.shot.label(),
                c.seed,
                c.metric.as_str(),
                c.value
            );
        }
        out
    }

    /// Mean +- std per strategy and dataset, then the aggregate columns, best in bold.
    pub fn to_markdown(&self) -> String {
        let mut out = String::new();
        let mut groups: Vec<(String, SplitScheme, Shot)> = Vec::new();
        for s in &self.summaries {
            let g = (s.checkpoint.clone(), s.split, s.shot);
            if !groups.contains(&g) {
                groups.push(g);
            }
        }
        for (ck, split, shot) in &groups {
            let rows: Vec<&Summary> = self
                .summaries
                .iter()
                .filter(|s| &s.checkpoint == ck && s.split == *split && s.shot == *shot)
                .collect();
            let mut datasets: Vec<(&str, MetricKind)> = Vec::new();
            let mut strategies: Vec<&str> = Vec::new();
            for s in &rows {
                if !datasets.iter().any(|d| d.0 == s.dataset) {
                    datasets.push((&s.dataset, s.metric));
                }
                if !strategies.contains(&s.strategy.as_str()) {
                    strategies.push(&s.strategy);
                }
            }
            let agg = self
                .aggregates
                .iter()
                .find(|a| &a.checkpoint == ck && a.split == *split && a.shot == *shot);
            let _ = writeln!(out, "## {ck} / {} split / shot {}\n", split.as_str(), shot.label());
            let mut header = String::from("| strategy |");
            let mut rule = String::from("|---|");
            for (d, m) in &datasets {
                let _ = write!(header, " {d} ({}) |", m.as_str());
                rule.push_str("---|");
            }
            if agg.is_some() {
                header.push_str(" AVG | AVG-F | AVG-R | AVG-R* |");
                rule.push_str("---|---|---|---|");
            }
            let _ = writeln!(out, "{header}\n{rule}");

            let best_in = |d: &str, kind: MetricKind| -> Option<f64> {
                rows.iter()
                    .filter(|s| s.dataset == d)
                    .map(|s| s.mean)
                    .reduce(|a, b| if kind.better(b, a) { b } else { a })
            };
            for st in &strategies {
                let mut line = format!("| {st} |");
                for (d, m) in &datasets {
                    match rows.iter().find(|s| s.strategy == *st && s.dataset == *d) {
                        Some(s) => {
                            let cell = format!("{:.4} ± {:.4}", s.mean, s.std);
                            if best_in(d, *m) == Some(s.mean) {
                                let _ = write!(line, " **{cell}** |");
                            } else {
                                let _ = write!(line, " {cell} |");
                            }
                        }
                        None => line.push_str(" n/a |"),
                    }
                }
                if let Some(agg) = agg {
                    if let Some(a) = agg.rows.iter().find(|a| a.strategy == *st) {
                        let col = |f: &dyn Fn(&Aggregate) -> Option<f64>, higher: bool| -> String {
                            let v = f(a);
                            let best = agg
                                .rows
                                .iter()
                                .filter_map(f)
                                .reduce(|x, y| if (y > x) == higher { y } else { x });
                            match v {
                                Some(v) if Some(v) == best => format!(" **{v:.4}** |"),
                                Some(v) => format!(" {v:.4} |"),
                                None => " n/a |".into(),
                            }
                        };
                        line.push_str(&col(&|a| Some(a.avg), true));
                        line.push_str(&col(&|a| a.avg_f, true));
                        line.push_str(&col(&|a| Some(a.avg_r), false));
                        line.push_str(&col(&|a| Some(a.avg_r_star), false));
                    }
                }
                let _ = writeln!(out, "{line}");
            }
            out.push('\n');
        }
        if !self.aggregates.is_empty() {
            out.push_str(
                "AVG-R* ranks strategies by their mean score after per-dataset min-max \
                 normalization across strategies (RMSE negated first).\n\n",
            );
        }
        for n in &self.notes {
            let _ = writeln!(out, "- note: {n}");
        }
        if !self.failures.is_empty() {
            out.push_str("\n### Failed cells\n\n");
            for f in &self.failures {
                let _ = writeln!(
                    out,
                    "- {} / {} / {} / {} / shot {} / seed {}: {}",
                    f.checkpoint,
                    f.strategy,
                    f.dataset,
                    f.split.as_str(),
                    f.shot.label(),
                    f.seed,
                    f.error
                );
            }
        }
        out
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}
