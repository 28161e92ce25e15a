//! Branch adjacency graphs, hop distances, anchors and positional encodings.

mod anchors;
mod encoding;
mod paths;

pub use anchors::{select_anchors, AnchorSet, NUM_ANCHORS};
pub use encoding::{compute_positional_encodings, PositionalEncodings};
pub use paths::{all_pairs_hops, bfs_shortest_paths, find_leaves, graph_diameter, Hops, UNREACHABLE};

use std::collections::BTreeSet;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::anatomy::Class;
use crate::error::{Error, Result};

/// A branch ID as stored in the label volume.
pub type BranchId = u32;

/// Branches as nodes, shared boundaries as undirected edges.
///
/// Nodes are kept sorted by branch ID; node indices elsewhere in the crate
/// refer to positions in that order.
#[derive(Clone, Debug, PartialEq)]
pub struct TreeGraph {
    node_ids: Vec<BranchId>,
    edges: Vec<(BranchId, BranchId)>,
    centers: Vec<[usize; 3]>,
    voxel_counts: Vec<u64>,
    labels: Vec<Option<Class>>,
    adjacency: Vec<Vec<usize>>,
}

/// Directed edge lists with one self-loop per node, as message-passing
/// layers consume them. Edge `e` carries a message from `src[e]` to `dst[e]`.
#[derive(Clone, Debug)]
pub struct EdgeIndex {
    pub n: usize,
    pub src: Arc<[usize]>,
    pub dst: Arc<[usize]>,
}

impl EdgeIndex {
    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }

    /// In-degree per node, self-loop included.
    pub fn degrees(&self) -> Vec<usize> {
        let mut d = vec![0; self.n];
        for &t in self.dst.iter() {
            d[t] += 1;
        }
        d
    }

    pub fn has_all_self_loops(&self) -> bool {
        let mut seen = vec![false; self.n];
        for (&s, &t) in self.src.iter().zip(self.dst.iter()) {
            if s == t {
                seen[s] = true;
            }
        }
        seen.into_iter().all(|b| b)
    }

    /// Re-indexes nodes: node `i` becomes `perm[i]`. Edge order follows the
    /// new destination order so the result equals building from a permuted graph.
    pub fn permuted(&self, perm: &[usize]) -> EdgeIndex {
        let mut pairs: Vec<(usize, usize)> = self
            .src
            .iter()
            .zip(self.dst.iter())
            .map(|(&s, &t)| (perm[t], perm[s]))
            .collect();
        pairs.sort_unstable();
        EdgeIndex {
            n: self.n,
            src: pairs.iter().map(|p| p.1).collect(),
            dst: pairs.iter().map(|p| p.0).collect(),
        }
    }
}

impl TreeGraph {
    /// Builds a graph; node order is sorted by ID and edges are normalised to
    /// `(min, max)` pairs without duplicates.
    pub fn new(
        nodes: Vec<(BranchId, [usize; 3], u64, Option<Class>)>,
        edges: impl IntoIterator<Item = (BranchId, BranchId)>,
    ) -> Result<Self> {
        let mut nodes = nodes;
        nodes.sort_by_key(|n| n.0);
        if nodes.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(Error::invalid("duplicate branch id"));
        }
        let node_ids: Vec<BranchId> = nodes.iter().map(|n| n.0).collect();
        let mut set = BTreeSet::new();
        for (a, b) in edges {
            if a == b {
                return Err(Error::invalid(format!("self edge on branch {a}")));
            }
            for id in [a, b] {
                if node_ids.binary_search(&id).is_err() {
                    return Err(Error::UnknownBranch(id));
                }
            }
            set.insert((a.min(b), a.max(b)));
        }
        let edges: Vec<_> = set.into_iter().collect();
        let mut adjacency = vec![Vec::new(); node_ids.len()];
        for &(a, b) in &edges {
            let ia = node_ids.binary_search(&a).unwrap();
            let ib = node_ids.binary_search(&b).unwrap();
            adjacency[ia].push(ib);
            adjacency[ib].push(ia);
        }
        for adj in &mut adjacency {
            adj.sort_unstable();
        }
        Ok(TreeGraph {
            node_ids,
            edges,
            centers: nodes.iter().map(|n| n.1).collect(),
            voxel_counts: nodes.iter().map(|n| n.2).collect(),
            labels: nodes.iter().map(|n| n.3).collect(),
            adjacency,
        })
    }

    /// Graph from bare IDs and edges (no geometry, no labels).
    pub fn from_edges(ids: &[BranchId], edges: &[(BranchId, BranchId)]) -> Result<Self> {
        Self::new(ids.iter().map(|&i| (i, [0; 3], 1, None)).collect(), edges.iter().copied())
    }

    pub fn len(&self) -> usize {
        self.node_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.node_ids.is_empty()
    }

    pub fn node_ids(&self) -> &[BranchId] {
        &self.node_ids
    }

    pub fn edges(&self) -> &[(BranchId, BranchId)] {
        &self.edges
    }

    pub fn centers(&self) -> &[[usize; 3]] {
        &self.centers
    }

    pub fn voxel_counts(&self) -> &[u64] {
        &self.voxel_counts
    }

    pub fn labels(&self) -> &[Option<Class>] {
        &self.labels
    }

    pub fn set_labels(&mut self, labels: Vec<Option<Class>>) -> Result<()> {
        if labels.len() != self.len() {
            return Err(Error::shape(format!("{} labels for {} nodes", labels.len(), self.len())));
        }
        self.labels = labels;
        Ok(())
    }

    pub fn index_of(&self, id: BranchId) -> Option<usize> {
        self.node_ids.binary_search(&id).ok()
    }

    pub fn require_index(&self, id: BranchId) -> Result<usize> {
        self.index_of(id).ok_or(Error::UnknownBranch(id))
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.adjacency[i]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.adjacency[i].len()
    }

    /// Number of connected components.
    pub fn components(&self) -> usize {
        let n = self.len();
        let mut seen = vec![false; n];
        let mut count = 0;
        let mut stack = Vec::new();
        for s in 0..n {
            if seen[s] {
                continue;
            }
            count += 1;
            seen[s] = true;
            stack.push(s);
            while let Some(u) = stack.pop() {
                for &v in &self.adjacency[u] {
                    if !seen[v] {
                        seen[v] = true;
                        stack.push(v);
                    }
                }
            }
        }
        count
    }

    pub fn is_connected(&self) -> bool {
        self.components() == 1
    }

    pub fn require_connected(&self) -> Result<()> {
        match self.components() {
            1 => Ok(()),
            components => Err(Error::Disconnected { components }),
        }
    }

    /// Reference node index per class (first node carrying the label).
    pub fn reference_nodes(&self) -> Vec<Option<usize>> {
        let mut out = vec![None; crate::anatomy::NUM_CLASSES];
        for (i, l) in self.labels.iter().enumerate() {
            if let Some(c) = l {
                if c.is_named() && out[c.index()].is_none() {
                    out[c.index()] = Some(i);
                }
            }
        }
        out
    }

    /// Directed edges in both directions plus self-loops, sorted by (dst, src).
    pub fn edge_index(&self) -> EdgeIndex {
        let mut pairs: Vec<(usize, usize)> = Vec::with_capacity(self.len() + 2 * self.edges.len());
        for (i, adj) in self.adjacency.iter().enumerate() {
            pairs.push((i, i));
            pairs.extend(adj.iter().map(|&j| (i, j)));
        }
        pairs.sort_unstable();
        EdgeIndex {
            n: self.len(),
            dst: pairs.iter().map(|p| p.0).collect(),
            src: pairs.iter().map(|p| p.1).collect(),
        }
    }

    pub fn to_json(&self) -> GraphJson {
        GraphJson {
            nodes: (0..self.len())
                .map(|i| NodeJson {
                    id: self.node_ids[i],
                    center: self.centers[i],
                    voxels: self.voxel_counts[i],
                    label: self.labels[i].map(|c| c.name().to_owned()),
                })
                .collect(),
            edges: self.edges.iter().map(|&(a, b)| [a, b]).collect(),
        }
    }

    pub fn from_json(doc: &GraphJson) -> Result<Self> {
        let nodes = doc
            .nodes
            .iter()
            .map(|n| {
                let label = match &n.label {
                    None => None,
                    Some(s) => Some(Class::from_name(s).ok_or_else(|| Error::format("graph json", format!("unknown label {s:?}")))?),
                };
                Ok((n.id, n.center, n.voxels, label))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(nodes, doc.edges.iter().map(|e| (e[0], e[1])))
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let s = serde_json::to_string_pretty(&self.to_json())?;
        std::fs::write(path, s + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let doc: GraphJson = serde_json::from_str(&s)?;
        Self::from_json(&doc)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeJson {
    pub id: BranchId,
    pub center: [usize; 3],
    pub voxels: u64,
    pub label: Option<String>,
}

/// On-disk graph document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphJson {
    pub nodes: Vec<NodeJson>,
    pub edges: Vec<[BranchId; 2]>,
}

#[cfg(test)]
mod tests;
