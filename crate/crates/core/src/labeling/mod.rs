//! From class probabilities to anatomical labels, plus the evaluation
//! metrics (accuracy, topological distance, weighted kappa, MACs).

mod export;
mod kappa;
mod macs;
mod metrics;

pub use export::{export_features_csv, read_features_csv, FeatureRow};
pub use kappa::{weighted_kappa_linear, Kappa};
pub use macs::{count_macs, Layer, MacReport};
pub use metrics::{
    accuracy_per_class, topological_distance, AccuracyReport, ClassMetrics, MetricsReport, OverallMetrics, TdReport, TdStats,
    TreeTd,
};

use crate::anatomy::{Class, NUM_CLASSES, NUM_NAMED};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// `N × 22` per-branch class probabilities, rows in graph node order.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassProbMatrix {
    n: usize,
    values: Vec<f64>,
}

impl ClassProbMatrix {
    pub fn new(n: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != n * NUM_CLASSES {
            return Err(Error::shape(format!("{} values for {n} x {NUM_CLASSES}", values.len())));
        }
        for (i, row) in values.chunks(NUM_CLASSES).enumerate() {
            if row.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return Err(Error::invalid(format!("row {i} has entries outside [0, 1]")));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-6 {
                return Err(Error::invalid(format!("row {i} sums to {s}")));
            }
        }
        Ok(ClassProbMatrix { n, values })
    }

    pub fn from_tensor<T: Real>(t: &Tensor<T>) -> Result<Self> {
        if t.ndim() != 2 || t.cols() != NUM_CLASSES {
            return Err(Error::shape(format!("expected N x {NUM_CLASSES}, got {:?}", t.shape())));
        }
        Self::new(t.rows(), t.data().iter().map(|v| v.as_f64()).collect())
    }

    pub fn rows(&self) -> usize {
        self.n
    }

    pub fn get(&self, row: usize, class: Class) -> f64 {
        self.values[row * NUM_CLASSES + class.index()]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * NUM_CLASSES..(i + 1) * NUM_CLASSES]
    }

    /// Most probable class per row, ties to the lower class index.
    pub fn argmax_rows(&self) -> Vec<Class> {
        (0..self.n)
            .map(|i| {
                let row = self.row(i);
                let mut best = 0;
                for c in 1..NUM_CLASSES {
                    if row[c] > row[best] {
                        best = c;
                    }
                }
                Class::new(best).unwrap()
            })
            .collect()
    }
}

/// Partial map from class to node index.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelAssignment {
    nodes: [Option<usize>; NUM_CLASSES],
}

impl Default for LabelAssignment {
    fn default() -> Self {
        LabelAssignment { nodes: [None; NUM_CLASSES] }
    }
}

impl LabelAssignment {
    pub fn get(&self, c: Class) -> Option<usize> {
        self.nodes[c.index()]
    }

    pub fn set(&mut self, c: Class, node: Option<usize>) {
        self.nodes[c.index()] = node;
    }

    pub fn as_slice(&self) -> &[Option<usize>] {
        &self.nodes
    }

    pub fn assigned(&self) -> usize {
        self.nodes.iter().filter(|n| n.is_some()).count()
    }

    pub fn is_injective(&self) -> bool {
        let mut seen: Vec<usize> = self.nodes.iter().flatten().copied().collect();
        let n = seen.len();
        seen.sort_unstable();
        seen.dedup();
        seen.len() == n
    }

    /// Per-node label; unassigned nodes read `other`.
    pub fn node_labels(&self, n: usize) -> Vec<Class> {
        let mut out = vec![Class::OTHER; n];
        for c in Class::named() {
            if let Some(i) = self.get(c) {
                out[i] = c;
            }
        }
        out
    }
}

/// Column-wise argmax over the segmental classes; a branch winning several
/// columns keeps the one where it is most confident.
pub fn assign_labels_basic(c: &ClassProbMatrix) -> LabelAssignment {
    let mut winner: Vec<(Class, usize, f64)> = Vec::new();
    if c.rows() > 0 {
        for s in Class::segmental() {
            let mut best = 0;
            for i in 1..c.rows() {
                if c.get(i, s) > c.get(best, s) {
                    best = i;
                }
            }
            winner.push((s, best, c.get(best, s)));
        }
    }
    let mut out = LabelAssignment::default();
    for &(s, row, p) in &winner {
        let keeps = winner.iter().all(|&(s2, r2, p2)| r2 != row || s2 == s || p > p2 || (p == p2 && s.index() < s2.index()));
        if keeps {
            out.set(s, Some(row));
        }
    }
    out
}

/// Global greedy matching over the 21 named classes: repeatedly take the
/// most probable remaining (row, class) pair, then retire both.
pub fn assign_labels_leave_one_out(c: &ClassProbMatrix) -> Result<LabelAssignment> {
    if c.rows() < NUM_NAMED {
        return Err(Error::invalid(format!("leave-one-out needs at least {NUM_NAMED} branches, got {}", c.rows())));
    }
    Ok(greedy_assign(c, &Class::named().collect::<Vec<_>>()))
}

/// Greedy matching restricted to `classes`; stops when rows or classes run out.
pub fn greedy_assign(c: &ClassProbMatrix, classes: &[Class]) -> LabelAssignment {
    let picks = greedy_matching(c.rows(), classes.len(), |i, k| c.get(i, classes[k]));
    let mut out = LabelAssignment::default();
    for (k, row) in picks.into_iter().enumerate() {
        out.set(classes[k], row);
    }
    out
}

/// Column → row matching by descending score; ties go to the smaller
/// column, then the smaller row.
pub(crate) fn greedy_matching(rows: usize, cols: usize, score: impl Fn(usize, usize) -> f64) -> Vec<Option<usize>> {
    let mut pairs: Vec<(f64, usize, usize)> = Vec::with_capacity(rows * cols);
    for k in 0..cols {
        for i in 0..rows {
            pairs.push((score(i, k), k, i));
        }
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut row_used = vec![false; rows];
    let mut out = vec![None; cols];
    let mut left = rows.min(cols);
    for (_, k, i) in pairs {
        if left == 0 {
            break;
        }
        if row_used[i] || out[k].is_some() {
            continue;
        }
        row_used[i] = true;
        out[k] = Some(i);
        left -= 1;
    }
    out
}

#[cfg(test)]
mod tests;
