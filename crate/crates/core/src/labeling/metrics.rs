use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::LabelAssignment;
use crate::anatomy::{Class, NUM_SEGMENTAL};
use crate::error::{Error, Result};
use crate::graphcore::{bfs_shortest_paths, TreeGraph};

/// Per-segmental accuracy over a dataset, in segmental class order.
#[derive(Clone, Debug, PartialEq)]
pub struct AccuracyReport {
    pub correct: Vec<usize>,
    pub total: Vec<usize>,
    /// `None` for classes absent from every reference tree.
    pub per_class: Vec<Option<f64>>,
    /// Unweighted mean over classes that have a reference somewhere.
    pub overall: f64,
}

/// `references[t][c]` is the true node of class `c` in tree `t`.
pub fn accuracy_per_class(assignments: &[LabelAssignment], references: &[Vec<Option<usize>>]) -> Result<AccuracyReport> {
    if assignments.is_empty() {
        return Err(Error::invalid("accuracy over an empty dataset"));
    }
    if assignments.len() != references.len() {
        return Err(Error::shape(format!("{} assignments for {} references", assignments.len(), references.len())));
    }
    let mut correct = vec![0; NUM_SEGMENTAL];
    let mut total = vec![0; NUM_SEGMENTAL];
    for (a, r) in assignments.iter().zip(references) {
        for (k, c) in Class::segmental().enumerate() {
            if let Some(truth) = r[c.index()] {
                total[k] += 1;
                if a.get(c) == Some(truth) {
                    correct[k] += 1;
                }
            }
        }
    }
    let per_class: Vec<Option<f64>> = (0..NUM_SEGMENTAL).map(|k| (total[k] > 0).then(|| correct[k] as f64 / total[k] as f64)).collect();
    let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
    if defined.is_empty() {
        return Err(Error::invalid("no reference segmentals in the dataset"));
    }
    let overall = defined.iter().sum::<f64>() / defined.len() as f64;
    Ok(AccuracyReport { correct, total, per_class, overall })
}

/// Hop distances of one tree's mislabeled segmentals.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TreeTd {
    pub samples: Vec<(Class, u32)>,
    /// Classes with a reference but no prediction.
    pub unpredicted: Vec<Class>,
}

pub fn topological_distance(assignment: &LabelAssignment, reference: &[Option<usize>], g: &TreeGraph) -> Result<TreeTd> {
    g.require_connected()?;
    let mut out = TreeTd::default();
    for c in Class::segmental() {
        let Some(truth) = reference[c.index()] else { continue };
        if truth >= g.len() {
            return Err(Error::invalid(format!("reference node {truth} not in graph")));
        }
        match assignment.get(c) {
            None => out.unpredicted.push(c),
            Some(p) if p >= g.len() => return Err(Error::invalid(format!("predicted node {p} not in graph"))),
            Some(p) if p == truth => {}
            Some(p) => out.samples.push((c, bfs_shortest_paths(g, truth)?[p])),
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct TdStats {
    pub n: usize,
    pub mean: Option<f64>,
    /// Population standard deviation.
    pub std: Option<f64>,
}

impl TdStats {
    fn from_samples(v: &[f64]) -> Self {
        if v.is_empty() {
            return TdStats::default();
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        TdStats { n: v.len(), mean: Some(mean), std: Some(var.sqrt()) }
    }
}

/// Dataset-level TD, per segmental class.
#[derive(Clone, Debug, PartialEq)]
pub struct TdReport {
    pub per_class: Vec<TdStats>,
    pub unpredicted: usize,
    /// Mean of the per-class means over classes with samples.
    pub overall: Option<f64>,
}

impl TdReport {
    pub fn from_trees(trees: &[TreeTd]) -> TdReport {
        let mut by_class: Vec<Vec<f64>> = vec![Vec::new(); NUM_SEGMENTAL];
        let mut unpredicted = 0;
        for t in trees {
            for &(c, d) in &t.samples {
                by_class[c.index() - 3].push(d as f64);
            }
            unpredicted += t.unpredicted.len();
        }
        let per_class: Vec<TdStats> = by_class.iter().map(|v| TdStats::from_samples(v)).collect();
        let means: Vec<f64> = per_class.iter().filter_map(|s| s.mean).collect();
        let overall = (!means.is_empty()).then(|| means.iter().sum::<f64>() / means.len() as f64);
        TdReport { per_class, unpredicted, overall }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub acc: Option<f64>,
    pub td_mean: Option<f64>,
    pub td_std: Option<f64>,
    pub n_td: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverallMetrics {
    pub acc: f64,
    pub td: Option<f64>,
}

/// Metrics document; `per_class` serializes as an object in class order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(serialize_with = "ser_ordered", deserialize_with = "de_ordered")]
    pub per_class: Vec<(String, ClassMetrics)>,
    pub overall: OverallMetrics,
    pub macs: u64,
    pub params: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unpredicted: Option<usize>,
}

impl MetricsReport {
    pub fn new(acc: &AccuracyReport, td: &TdReport, macs: u64, params: u64) -> Self {
        let per_class = Class::segmental()
            .enumerate()
            .map(|(k, c)| {
                let s = &td.per_class[k];
                (c.name().to_owned(), ClassMetrics { acc: acc.per_class[k], td_mean: s.mean, td_std: s.std, n_td: s.n })
            })
            .collect();
        MetricsReport {
            per_class,
            overall: OverallMetrics { acc: acc.overall, td: td.overall },
            macs,
            params,
            unpredicted: (td.unpredicted > 0).then_some(td.unpredicted),
        }
    }
}

fn ser_ordered<S: Serializer>(v: &[(String, ClassMetrics)], s: S) -> std::result::Result<S::Ok, S::Error> {
    s.collect_map(v.iter().map(|(k, m)| (k, m)))
}

fn de_ordered<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Vec<(String, ClassMetrics)>, D::Error> {
    let m = std::collections::BTreeMap::<String, ClassMetrics>::deserialize(d)?;
    let mut v: Vec<(String, ClassMetrics)> = m.into_iter().collect();
    v.sort_by_key(|(k, _)| Class::from_name(k).map_or(usize::MAX, Class::index));
    Ok(v)
}
