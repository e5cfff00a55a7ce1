//! Dataset ingestion (JSON Lines), split protocols, few-shot sampling and batching.

mod split;
pub mod synth;

pub use split::{fewshot, split, Split, SplitScheme, DEFAULT_FRACTIONS};

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::GraphBatch;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Classification,
    Regression,
}

/// One molecule as stored on disk. Edges are undirected and listed once.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Molecule {
    pub id: String,
    pub node_feats: Vec<Vec<f64>>,
    pub edges: Vec<(usize, usize)>,
    /// `None` marks a missing label.
    pub labels: Vec<Option<f64>>,
    #[serde(default)]
    pub scaffold: Option<String>,
}

impl Molecule {
    pub fn node_count(&self) -> usize {
        self.node_feats.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub molecules: Vec<Molecule>,
    pub task_count: usize,
    pub task_kind: TaskKind,
    pub feature_dim: usize,
}

impl Dataset {
    /// Checks the cross-record invariants and builds the dataset.
    pub fn new(molecules: Vec<Molecule>, task_kind: TaskKind) -> Result<Self> {
        let first = molecules
            .first()
            .ok_or_else(|| Error::validation("dataset is empty"))?;
        let task_count = first.labels.len();
        let feature_dim = first.node_feats.first().map_or(0, Vec::len);
        if task_count == 0 || feature_dim == 0 {
            return Err(Error::validation(format!(
                "molecule `{}` needs at least one task and one feature",
                first.id
            )));
        }
        for m in &molecules {
            validate_molecule(m, task_count, feature_dim, task_kind)?;
        }
        Ok(Self {
            molecules,
            task_count,
            task_kind,
            feature_dim,
        })
    }

    pub fn len(&self) -> usize {
        self.molecules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.molecules.is_empty()
    }

    /// Disjoint union of the listed molecules, in the given order.
    pub fn batch(&self, indices: &[usize]) -> Result<GraphBatch> {
        if indices.is_empty() {
            return Err(Error::contract("cannot batch zero molecules"));
        }
        let t = self.task_count;
        let mut feats = Vec::new();
        let mut edges = Vec::new();
        let mut segment = Vec::new();
        let mut labels = Vec::with_capacity(indices.len() * t);
        let mut mask = Vec::with_capacity(indices.len() * t);
        let mut offset = 0;
        for (g, &i) in indices.iter().enumerate() {
            let m = self
                .molecules
                .get(i)
                .ok_or_else(|| Error::contract(format!("molecule index {i} out of range")))?;
            for row in &m.node_feats {
                feats.extend_from_slice(row);
                segment.push(g);
            }
            for &(u, v) in &m.edges {
                edges.push((offset + u, offset + v));
                edges.push((offset + v, offset + u));
            }
            for y in &m.labels {
                labels.push(y.unwrap_or(f64::NAN));
                mask.push(y.is_some());
            }
            offset += m.node_count();
        }
        GraphBatch::new(
            Tensor::matrix(offset, self.feature_dim, feats),
            edges,
            segment,
            Tensor::matrix(indices.len(), t, labels),
            mask,
        )
    }

    /// Every observed label value per task, for inference and summaries.
    fn observed_labels(molecules: &[Molecule]) -> impl Iterator<Item = f64> + '_ {
        molecules.iter().flat_map(|m| m.labels.iter().flatten().copied())
    }
}

fn validate_molecule(m: &Molecule, tasks: usize, dim: usize, kind: TaskKind) -> Result<()> {
    let bad = |msg: String| Err(Error::validation(format!("molecule `{}`: {msg}", m.id)));
    if m.labels.len() != tasks {
        return bad(format!("{} labels, dataset has {tasks} tasks", m.labels.len()));
    }
    if m.node_feats.is_empty() {
        return bad("no nodes".into());
    }
    if let Some(row) = m.node_feats.iter().find(|r| r.len() != dim) {
        return bad(format!("node feature width {} != {dim}", row.len()));
    }
    if m.node_feats.iter().flatten().any(|x| !x.is_finite()) {
        return bad("non-finite node feature".into());
    }
    let n = m.node_count();
    if let Some(&(u, v)) = m.edges.iter().find(|&&(u, v)| u >= n || v >= n) {
        return bad(format!("edge ({u}, {v}) out of range for {n} nodes"));
    }
    for y in m.labels.iter().flatten() {
        match kind {
            TaskKind::Classification if *y != 0.0 && *y != 1.0 => {
                return bad(format!("classification label {y} not in {{0, 1}}"))
            }
            TaskKind::Regression if !y.is_finite() => return bad("non-finite regression label".into()),
            _ => {}
        }
    }
    Ok(())
}

/// Loads a JSON Lines dataset, inferring the task kind: classification when every
/// observed label is 0 or 1, regression otherwise.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    load_dataset_as(path, None)
}

/// Loads a JSON Lines dataset with an explicit (or inferred, when `None`) task kind.
pub fn load_dataset_as(path: impl AsRef<Path>, kind: Option<TaskKind>) -> Result<Dataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut molecules = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let m: Molecule = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        molecules.push(m);
    }
    let kind = kind.unwrap_or_else(|| {
        if Dataset::observed_labels(&molecules).all(|y| y == 0.0 || y == 1.0) {
            TaskKind::Classification
        } else {
            TaskKind::Regression
        }
    });
    Dataset::new(molecules, kind)
}

/// Writes one compact JSON object per molecule.
pub fn write_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for m in &ds.molecules {
        serde_json::to_writer(&mut out, m)?;
        out.push(b'\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

/// Mini-batches for one epoch: a shuffle keyed by `(seed, epoch)`, then
/// contiguous chunks. The final short batch is kept.
pub fn batches(
    ds: &Dataset,
    indices: &[usize],
    batch_size: usize,
    seed: u64,
    epoch: u64,
) -> Result<Vec<GraphBatch>> {
    if batch_size == 0 {
        return Err(Error::contract("batch size must be at least 1"));
    }
    epoch_order(indices, seed, epoch)
        .chunks(batch_size)
        .map(|c| ds.batch(c))
        .collect()
}

/// The permutation of `indices` that [`batches`] visits in a given epoch.
pub fn epoch_order(indices: &[usize], seed: u64, epoch: u64) -> Vec<usize> {
    let mut order = indices.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9).wrapping_add(epoch));
    order.shuffle(&mut rng);
    order
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_lines(lines: &[&str]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f
    }

    #[test]
    fn loads_two_molecules_with_a_missing_label() {
        let f = write_lines(&[
            r#"{"id": "a", "node_feats": [[1.0], [2.0]], "edges": [[0, 1]], "labels": [1], "scaffold": "s"}"#,
            r#"{"id": "b", "node_feats": [[0.5]], "edges": [], "labels": [null], "scaffold": null}"#,
        ]);
        let ds = load_dataset(f.path()).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.task_kind, TaskKind::Classification);
        let b = ds.batch(&[0, 1]).unwrap();
        assert_eq!(&*b.label_mask, &[true, false]);
        assert!(b.labels.data()[1].is_nan());
        // undirected bond expanded in both directions
        assert_eq!(&*b.edges, &[(0, 1), (1, 0)]);
        assert_eq!(&*b.segment, &[0, 0, 1]);
    }

    #[test]
    fn malformed_line_reports_its_number() {
        let f = write_lines(&[
            r#"{"id": "a", "node_feats": [[1.0]], "edges": [], "labels": [1]}"#,
            r#"{"id": "b", "node_feats": oops}"#,
        ]);
        match load_dataset(f.path()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn inconsistent_task_count_is_a_validation_error() {
        let f = write_lines(&[
            r#"{"id": "a", "node_feats": [[1.0]], "edges": [], "labels": [1]}"#,
            r#"{"id": "b", "node_feats": [[1.0]], "edges": [], "labels": [1, 0]}"#,
        ]);
        assert!(matches!(load_dataset(f.path()), Err(Error::Validation(_))));
    }

    #[test]
    fn regression_is_inferred_from_non_binary_labels() {
        let f = write_lines(&[r#"{"id": "a", "node_feats": [[1.0]], "edges": [], "labels": [0.25]}"#]);
        assert_eq!(load_dataset(f.path()).unwrap().task_kind, TaskKind::Regression);
        assert!(load_dataset_as(f.path(), Some(TaskKind::Classification)).is_err());
    }

    #[test]
    fn round_trip_through_disk() {
        let ds = synth::generate(&synth::GenConfig {
            size: 25,
            tasks: 2,
            ..Default::default()
        })
        .unwrap();
        let f = tempfile::NamedTempFile::new().unwrap();
        write_dataset(&ds, f.path()).unwrap();
        let back = load_dataset_as(f.path(), Some(ds.task_kind)).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn batching_covers_every_index_once() {
        let ds = synth::generate(&synth::GenConfig {
            size: 10,
            ..Default::default()
        })
        .unwrap();
        let idx: Vec<usize> = (0..10).collect();
        let one = batches(&ds, &idx, 32, 0, 0).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one[0].graph_count, 10);
        let sizes: Vec<usize> = batches(&ds, &idx, 4, 0, 0).unwrap().iter().map(|b| b.graph_count).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
        assert_ne!(
            batches(&ds, &idx, 4, 0, 0).unwrap(),
            batches(&ds, &idx, 4, 0, 1).unwrap(),
            "epochs should reshuffle"
        );
        assert_eq!(batches(&ds, &idx, 4, 3, 2).unwrap(), batches(&ds, &idx, 4, 3, 2).unwrap());
    }
}
