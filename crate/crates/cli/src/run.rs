use std::path::{Path, PathBuf};

use roft_core::bench::{run_plan, worker_count, BenchConfig, Shot};
use roft_core::data::synth::{generate, GenConfig};
use roft_core::data::{fewshot, load_dataset_as, split, write_dataset, TaskKind};
use roft_core::gradcheck::{self, Check};
use roft_core::model::{Architecture, Checkpoint};
use roft_core::pretrain::pretrain;
use roft_core::quadlab::{self, DELTA_GRID};
use roft_core::strategies::{finetune, RunData, StrategyConfig, StrategyKind};
use roft_core::{Error, Result};
use serde::Serialize;
use serde_json::json;

use crate::config::{base_dir, existing, io, read_json, FinetuneRun, PretrainRun};
use crate::{Cli, Command, Failure, GenArgs, Suite};

pub fn dispatch(cli: &Cli) -> std::result::Result<(), Failure> {
    match &cli.command {
        Command::Pretrain => Ok(cmd_pretrain(cli)?),
        Command::Finetune => Ok(cmd_finetune(cli)?),
        Command::Bench => Ok(cmd_bench(cli)?),
        Command::GenData(args) => Ok(cmd_gen_data(cli, args)?),
        Command::Verify { suite } => cmd_verify(cli, suite),
    }
}

fn config_path(cli: &Cli) -> Result<&Path> {
    cli.config
        .as_deref()
        .ok_or_else(|| Error::config("--config", "this subcommand needs a config file"))
}

fn out_file(cli: &Cli, name: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(&cli.out).map_err(|e| io(&cli.out, e))?;
    Ok(cli.out.join(name))
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| io(path, e))
}

fn json_lines<T: Serialize>(items: &[T]) -> Result<String> {
    let mut s = String::new();
    for it in items {
        s.push_str(&serde_json::to_string(it)?);
        s.push('\n');
    }
    Ok(s)
}

fn cmd_pretrain(cli: &Cli) -> Result<()> {
    let path = config_path(cli)?;
    let mut run: PretrainRun = read_json(path)?;
    let data = existing(&base_dir(path), &run.dataset)?;
    if let Some(seed) = cli.seed {
        run.pretrain.seed = seed;
    }
    run.pretrain.validate()?;
    let ds = load_dataset_as(&data, run.task_kind)?;
    let arch = Architecture {
        in_dim: ds.feature_dim,
        hidden: run.encoder.hidden,
        layers: run.encoder.layers,
    };
    arch.validate()?;
    let out = pretrain(&ds, arch, &run.pretrain)?;
    let ckpt = out_file(cli, "checkpoint.ckpt")?;
    out.checkpoint.save(&ckpt)?;
    write(&out_file(cli, "pretrain_log.jsonl")?, json_lines(&out.log)?)?;
    println!(
        "{}",
        json!({
            "checkpoint": ckpt,
            "pretraining": out.checkpoint.pretraining,
            "epochs": out.log.len(),
            "final_loss": out.log.last().map(|l| l.loss),
        })
    );
    Ok(())
}

fn cmd_finetune(cli: &Cli) -> Result<()> {
    let path = config_path(cli)?;
    let run: FinetuneRun = read_json(path)?;
    let base = base_dir(path);
    let ckpt_path = existing(&base, &run.checkpoint)?;
    let data = existing(&base, &run.dataset)?;
    let mut cfg = StrategyConfig::from_json(&run.strategy.to_string())?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let pre = Checkpoint::load(&ckpt_path)?;
    cfg.validate(pre.params.layer_count())?;
    let ds = load_dataset_as(&data, run.task_kind)?;
    let sp = split(&ds, run.split, run.fractions, run.split_seed)?;
    let train = match run.shot {
        Shot::Full => sp.train.clone(),
        Shot::Few(n) => fewshot(&sp.train, n, cfg.seed)?,
    };
    let art = finetune(
        &pre.params,
        &RunData {
            ds: &ds,
            train: &train,
            val: &sp.val,
            test: &sp.test,
        },
        &cfg,
    )?;

    let name = if cfg.kind.builds_on_full() { "interpolated.ckpt" } else { "finetuned.ckpt" };
    Checkpoint::new(art.final_params.clone(), pre.pretraining.clone()).save(out_file(cli, name)?)?;
    write(&out_file(cli, "finetune_log.jsonl")?, json_lines(&art.train_log)?)?;
    if cfg.kind == StrategyKind::Dwise {
        let doc = json!({ "alphas": art.alphas, "trace": art.alpha_trace });
        write(&out_file(cli, "alphas.json")?, serde_json::to_string_pretty(&doc)? + "\n")?;
    }
    let result = json!({
        "kind": cfg.kind,
        "metric": art.metric_kind,
        "best_epoch": art.best_epoch,
        "val_metric": art.val_metric,
        "test_metric": art.test_metric,
        "alphas": art.alphas,
        "train_size": train.len(),
    });
    write(&out_file(cli, "result.json")?, serde_json::to_string_pretty(&result)? + "\n")?;
    println!("{result}");
    Ok(())
}

fn cmd_bench(cli: &Cli) -> Result<()> {
    let path = config_path(cli)?;
    let mut cfg: BenchConfig = read_json(path)?;
    let base = base_dir(path);
    for p in cfg.checkpoints.values().chain(cfg.datasets.iter().map(|d| &d.path)) {
        existing(&base, p)?;
    }
    if let Some(seed) = cli.seed {
        cfg.seeds = vec![seed];
    }
    let plan = cfg.load_plan(&base)?;
    let report = run_plan(&plan, worker_count())?;
    write(&out_file(cli, "bench.csv")?, report.to_csv())?;
    write(&out_file(cli, "bench.md")?, report.to_markdown())?;
    write(&out_file(cli, "bench.json")?, serde_json::to_string_pretty(&report)? + "\n")?;
    for f in &report.failures {
        eprintln!(
            "cell failed: {} / {} / {} / seed {}: {}",
            f.checkpoint, f.strategy, f.dataset, f.seed, f.error
        );
    }
    println!(
        "{}",
        json!({ "cells": report.cells.len(), "failures": report.failures.len(), "notes": report.notes })
    );
    Ok(())
}

fn cmd_gen_data(cli: &Cli, args: &GenArgs) -> Result<()> {
    let mut cfg: GenConfig = match &cli.config {
        Some(p) => read_json(p)?,
        None => GenConfig::default(),
    };
    if let Some(n) = args.size {
        cfg.size = n;
    }
    if let Some(t) = args.tasks {
        cfg.tasks = t;
    }
    if let Some(k) = &args.kind {
        cfg.kind = match k.as_str() {
            "classification" => TaskKind::Classification,
            "regression" => TaskKind::Regression,
            other => return Err(Error::config("kind", format!("`{other}` is not classification or regression"))),
        };
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let ds = generate(&cfg)?;
    let path = out_file(cli, "dataset.jsonl")?;
    write_dataset(&ds, &path)?;
    println!("{}", json!({ "dataset": path, "size": ds.len(), "tasks": ds.task_count, "kind": ds.task_kind }));
    Ok(())
}

fn cmd_verify(cli: &Cli, suite: &Suite) -> std::result::Result<(), Failure> {
    let seed0 = cli.seed.unwrap_or(0);
    match *suite {
        Suite::Prop1 { dim, instances, tolerance } => {
            let mut worst = 0.0f64;
            for seed in seed0..seed0 + instances {
                for row in quadlab::verify(dim, seed, &DELTA_GRID)? {
                    println!("{}", serde_json::to_string(&row).map_err(Error::from)?);
                    worst = worst.max(row.error);
                }
            }
            eprintln!("prop1: max error {worst:e} (tolerance {tolerance:e})");
            if worst.is_nan() || worst >= tolerance {
                return Err(Failure::Verify(format!("prop1 max error {worst:e} >= {tolerance:e}")));
            }
            Ok(())
        }
        Suite::Gradcheck {
            ref checks,
            configs,
            tolerance,
            inject_failure,
        } => {
            let checks = parse_checks(checks)?;
            let mut failed = Vec::new();
            for check in checks {
                let mut worst = 0.0f64;
                for seed in seed0..seed0 + configs {
                    let mut pair = gradcheck::run(check, seed)?;
                    if inject_failure {
                        pair.analytic.iter_mut().for_each(|g| *g = -*g);
                    }
                    let e = pair.error();
                    println!("{}", json!({ "check": check, "seed": seed, "error": e }));
                    worst = if e.is_nan() { f64::NAN } else { worst.max(e) };
                }
                eprintln!("{}: max relative error {worst:e}", check.as_str());
                if !(worst < tolerance) {
                    failed.push(check.as_str());
                }
            }
            if failed.is_empty() {
                Ok(())
            } else {
                Err(Failure::Verify(format!("gradient checks over tolerance: {}", failed.join(", "))))
            }
        }
    }
}

fn parse_checks(s: &str) -> Result<Vec<Check>> {
    match s {
        "all" => Ok(Check::ALL.to_vec()),
        "penalties" => Ok(Check::PENALTIES.to_vec()),
        list => list
            .split(',')
            .map(|name| {
                Check::ALL
                    .into_iter()
                    .find(|c| c.as_str() == name.trim())
                    .ok_or_else(|| Error::config("checks", format!("unknown check `{name}`")))
            })
            .collect(),
    }
}
