use super::anchors::AnchorSet;
use super::paths::{all_pairs_hops, graph_diameter};
use super::TreeGraph;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// `values[b * k + i]` = hops(b, anchor i) / diameter.
#[derive(Clone, Debug, PartialEq)]
pub struct PositionalEncodings {
    n: usize,
    k: usize,
    values: Vec<f64>,
}

impl PositionalEncodings {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn get(&self, node: usize, anchor: usize) -> f64 {
        self.values[node * self.k + anchor]
    }

    pub fn row(&self, node: usize) -> &[f64] {
        &self.values[node * self.k..(node + 1) * self.k]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::new(&[self.n, self.k], self.values.iter().map(|&v| T::from_f64(v)).collect())
            .expect("encoding shape")
    }
}

pub fn compute_positional_encodings(g: &TreeGraph, anchors: &AnchorSet) -> Result<PositionalEncodings> {
    g.require_connected()?;
    let diameter = graph_diameter(g)? as f64;
    if diameter < 1.0 {
        return Err(Error::invalid("positional encodings need diameter >= 1"));
    }
    if let Some(&bad) = anchors.nodes().iter().find(|&&a| a >= g.len()) {
        return Err(Error::invalid(format!("anchor node {bad} not in graph")));
    }
    let hops = all_pairs_hops(g);
    let k = anchors.len();
    let mut values = Vec::with_capacity(g.len() * k);
    for row in &hops {
        values.extend(anchors.nodes().iter().map(|&a| row[a] as f64 / diameter));
    }
    Ok(PositionalEncodings { n: g.len(), k, values })
}
