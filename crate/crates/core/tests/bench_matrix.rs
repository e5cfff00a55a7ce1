use roft_core::bench::{run_plan, BenchPlan, Shot};
use roft_core::data::synth::{generate, GenConfig};
use roft_core::data::{SplitScheme, DEFAULT_FRACTIONS};
use roft_core::model::{Architecture, ParamSet};
use roft_core::strategies::{StrategyConfig, StrategyKind};

fn quick(kind: StrategyKind) -> StrategyConfig {
    StrategyConfig {
        epochs: 2,
        alpha_epochs: 3,
        learning_rate: 0.01,
        ..StrategyConfig::new(kind)
    }
}

fn plan(strategies: &[StrategyKind], datasets: usize, seeds: &[u64]) -> BenchPlan {
    let arch = Architecture { in_dim: 8, hidden: 8, layers: 2 };
    BenchPlan {
        checkpoints: vec![("init".into(), ParamSet::init(arch, 0).unwrap())],
        datasets: (0..datasets)
            .map(|i| {
                let ds = generate(&GenConfig { size: 50, seed: i as u64, ..GenConfig::default() }).unwrap();
                (format!("d{i}"), ds)
            })
            .collect(),
        strategies: strategies.iter().map(|&k| (k.as_str().to_string(), vec![quick(k)])).collect(),
        splits: vec![SplitScheme::Random],
        fractions: DEFAULT_FRACTIONS,
        split_seed: 0,
        shots: vec![Shot::Full],
        seeds: seeds.to_vec(),
    }
}

#[test]
fn single_cell_has_no_aggregates() {
    let r = run_plan(&plan(&[StrategyKind::Full], 1, &[0]), 1).unwrap();
    assert_eq!(r.cells.len(), 1);
    assert!(r.aggregates.is_empty());
    assert!(!r.notes.is_empty());
    assert_eq!(r.summaries.len(), 1);
}

#[test]
fn two_by_three_rank_bookkeeping() {
    let r = run_plan(&plan(&[StrategyKind::Full, StrategyKind::Lp], 3, &[0]), 2).unwrap();
    assert_eq!(r.cells.len(), 6);
    assert_eq!(r.aggregates.len(), 1);
    let rows = &r.aggregates[0].rows;
    assert_eq!(rows.len(), 2);
    for a in rows {
        assert!((1.0..=2.0).contains(&a.avg_r));
        assert!(a.avg_f.is_some());
    }
    // ranks per dataset sum to 3, so the averages do too
    assert!((rows[0].avg_r + rows[1].avg_r - 3.0).abs() < 1e-12);
    let md = r.to_markdown();
    assert!(md.contains("AVG-R*"));
}

#[test]
fn reports_do_not_depend_on_worker_count() {
    let p = plan(&[StrategyKind::Full, StrategyKind::Wise, StrategyKind::Dwise], 1, &[0, 1]);
    let a = run_plan(&p, 1).unwrap();
    let b = run_plan(&p, 4).unwrap();
    assert_eq!(a.to_csv(), b.to_csv());
    assert_eq!(a.to_markdown(), b.to_markdown());
    assert_eq!(a, b);
}

#[test]
fn failing_cells_are_recorded_and_others_finish() {
    let mut p = plan(&[StrategyKind::Full], 2, &[0]);
    p.datasets[1].1 = generate(&GenConfig { size: 50, feature_dim: 3, ..GenConfig::default() }).unwrap();
    let r = run_plan(&p, 2).unwrap();
    assert_eq!(r.cells.len(), 1);
    assert_eq!(r.failures.len(), 1);
    assert_eq!(r.failures[0].dataset, "d1");
    assert!(r.to_markdown().contains("Failed cells"));
}

#[test]
fn fewshot_cells_follow_the_seeds() {
    let mut p = plan(&[StrategyKind::Full], 1, &[0, 1, 2]);
    p.shots = vec![Shot::Few(10)];
    let r = run_plan(&p, 2).unwrap();
    assert_eq!(r.cells.len(), 3);
    assert!(r.cells.iter().all(|c| c.shot == Shot::Few(10)));
    assert_eq!(r.cells.iter().map(|c| c.seed).collect::<Vec<_>>(), vec![0, 1, 2]);
}
