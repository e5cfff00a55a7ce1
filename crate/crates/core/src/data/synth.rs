//! Synthetic molecular-graph datasets with planted labels.
//!
//! Graphs are random trees plus a few chords. Each graph draws a Gaussian
//! centre and its node features scatter around it. Each task owns a hidden unit vector `w_t`; the score of a molecule
//! is `w_t . mean(node features)`. Classification labels threshold the score at
//! zero, regression labels add Gaussian noise to a scaled score. Scaffold keys
//! hash the sorted degree sequence, so topologically similar graphs share a key.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Dataset, Molecule, TaskKind};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlantedRule {
    /// A random hidden direction per task.
    RandomLinear,
    /// The sign (or value) of the mean over all node features.
    MeanSign,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub size: usize,
    pub tasks: usize,
    pub kind: TaskKind,
    pub feature_dim: usize,
    pub min_nodes: usize,
    pub max_nodes: usize,
    /// Upper bound on extra non-tree edges per graph.
    pub max_chords: usize,
    /// Fraction of label cells blanked out.
    pub missing_rate: f64,
    pub rule: PlantedRule,
    /// Standard deviation of node features around their graph's latent centre
    /// (the centre itself is standard Gaussian).
    pub node_spread: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            size: 100,
            tasks: 1,
            kind: TaskKind::Classification,
            feature_dim: 8,
            min_nodes: 6,
            max_nodes: 16,
            max_chords: 2,
            missing_rate: 0.0,
            rule: PlantedRule::RandomLinear,
            node_spread: 1.0,
            noise: 0.1,
            seed: 0,
        }
    }
}

pub fn generate(cfg: &GenConfig) -> Result<Dataset> {
    if cfg.size == 0 || cfg.tasks == 0 || cfg.feature_dim == 0 {
        return Err(Error::config("size/tasks/feature_dim", "must be positive"));
    }
    if cfg.min_nodes == 0 || cfg.min_nodes > cfg.max_nodes {
        return Err(Error::config("min_nodes", "need 1 <= min_nodes <= max_nodes"));
    }
    if !(0.0..1.0).contains(&cfg.missing_rate) {
        return Err(Error::config("missing_rate", "must lie in [0, 1)"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let directions: Vec<Vec<f64>> = (0..cfg.tasks)
        .map(|_| match cfg.rule {
            PlantedRule::RandomLinear => unit_gaussian(&mut rng, cfg.feature_dim),
            PlantedRule::MeanSign => vec![1.0 / (cfg.feature_dim as f64).sqrt(); cfg.feature_dim],
        })
        .collect();

    let molecules = (0..cfg.size)
        .map(|i| {
            let n = rng.random_range(cfg.min_nodes..=cfg.max_nodes);
            let mut edges: Vec<(usize, usize)> = (1..n).map(|v| (rng.random_range(0..v), v)).collect();
            let chords = rng.random_range(0..=cfg.max_chords);
            for _ in 0..chords {
                let u = rng.random_range(0..n);
                let v = rng.random_range(0..n);
                let (a, b) = (u.min(v), u.max(v));
                if a != b && !edges.iter().any(|&(x, y)| (x.min(y), x.max(y)) == (a, b)) {
                    edges.push((a, b));
                }
            }
            let centre: Vec<f64> = (0..cfg.feature_dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let node_feats: Vec<Vec<f64>> = (0..n)
                .map(|_| {
                    centre
                        .iter()
                        .map(|c| {
                            let e: f64 = StandardNormal.sample(&mut rng);
                            c + cfg.node_spread * e
                        })
                        .collect()
                })
                .collect();
            let mean: Vec<f64> = (0..cfg.feature_dim)
                .map(|j| node_feats.iter().map(|r| r[j]).sum::<f64>() / n as f64)
                .collect();
            let labels = directions
                .iter()
                .map(|w| {
                    let score: f64 = w.iter().zip(&mean).map(|(a, b)| a * b).sum();
                    let noise: f64 = StandardNormal.sample(&mut rng);
                    let missing = rng.random::<f64>() < cfg.missing_rate;
                    let y = match cfg.kind {
                        TaskKind::Classification => (score > 0.0) as u8 as f64,
                        TaskKind::Regression => 4.0 * score + cfg.noise * noise,
                    };
                    (!missing).then_some(y)
                })
                .collect();
            Molecule {
                id: format!("mol{i:05}"),
                scaffold: Some(degree_key(n, &edges)),
                node_feats,
                edges,
                labels,
            }
        })
        .collect();
    Dataset::new(molecules, cfg.kind)
}

fn unit_gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.into_iter().map(|x| x / norm).collect()
}

/// FNV-1a over the sorted degree sequence.
fn degree_key(n: usize, edges: &[(usize, usize)]) -> String {
    let mut deg = vec![0u32; n];
    for &(u, v) in edges {
        deg[u] += 1;
        deg[v] += 1;
    }
    deg.sort_unstable();
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for d in deg {
        for b in d.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    format!("scaf-{:08x}", h >> 32)
}
