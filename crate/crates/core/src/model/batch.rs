use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A batch of molecular graphs flattened into one disjoint union.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphBatch {
    /// `nodes x features`
    pub node_feats: Tensor,
    /// Directed `(source, target)` pairs; each undirected bond appears in both directions.
    pub edges: Arc<[(usize, usize)]>,
    /// Graph index of every node.
    pub segment: Arc<[usize]>,
    /// `graph_count x tasks`, `NaN` where missing.
    pub labels: Tensor,
    /// Row-major like `labels`; `true` = observed.
    pub label_mask: Arc<[bool]>,
    pub graph_count: usize,
}

impl GraphBatch {
    pub fn new(
        node_feats: Tensor,
        edges: Vec<(usize, usize)>,
        segment: Vec<usize>,
        labels: Tensor,
        label_mask: Vec<bool>,
    ) -> Result<Self> {
        let n = node_feats.rows();
        let graph_count = labels.rows();
        if segment.len() != n {
            return Err(Error::contract(format!(
                "segment has {} entries for {n} nodes",
                segment.len()
            )));
        }
        if let Some(&(u, v)) = edges.iter().find(|&&(u, v)| u >= n || v >= n) {
            return Err(Error::contract(format!("edge ({u}, {v}) out of range for {n} nodes")));
        }
        if let Some(&g) = segment.iter().find(|&&g| g >= graph_count) {
            return Err(Error::contract(format!("segment index {g} >= graph count {graph_count}")));
        }
        if label_mask.len() != labels.len() {
            return Err(Error::contract("label mask and label matrix differ in size"));
        }
        if labels
            .data()
            .iter()
            .zip(&label_mask)
            .any(|(y, &m)| m && !y.is_finite())
        {
            return Err(Error::contract("an observed label cell carries a missing value"));
        }
        Ok(Self {
            node_feats,
            edges: edges.into(),
            segment: segment.into(),
            labels,
            label_mask: label_mask.into(),
            graph_count,
        })
    }

    pub fn node_count(&self) -> usize {
        self.node_feats.rows()
    }

    pub fn task_count(&self) -> usize {
        self.labels.cols()
    }

    /// Labels with missing cells zeroed, for loss ops that read targets under a mask.
    pub fn dense_targets(&self) -> Tensor {
        self.labels
            .zip_map(&Tensor::vector(self.label_mask.iter().map(|&m| m as u8 as f64).collect()), |y, m| {
                if m > 0.0 {
                    y
                } else {
                    0.0
                }
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_out_of_range_edges_and_segments() {
        let x = Tensor::matrix(2, 1, vec![1.0, 2.0]);
        let y = Tensor::matrix(1, 1, vec![1.0]);
        assert!(GraphBatch::new(x.clone(), vec![(0, 2)], vec![0, 0], y.clone(), vec![true]).is_err());
        assert!(GraphBatch::new(x.clone(), vec![(0, 1)], vec![0, 1], y.clone(), vec![true]).is_err());
        let b = GraphBatch::new(x, vec![(0, 1), (1, 0)], vec![0, 0], y, vec![true]).unwrap();
        assert_eq!(b.graph_count, 1);
        assert_eq!(b.node_count(), 2);
    }

    #[test]
    fn missing_labels_must_be_masked() {
        let x = Tensor::matrix(1, 1, vec![1.0]);
        let y = Tensor::matrix(1, 2, vec![f64::NAN, 1.0]);
        assert!(GraphBatch::new(x.clone(), vec![], vec![0], y.clone(), vec![true, true]).is_err());
        let b = GraphBatch::new(x, vec![], vec![0], y, vec![false, true]).unwrap();
        assert_eq!(b.dense_targets().data(), &[0.0, 1.0]);
    }
}
