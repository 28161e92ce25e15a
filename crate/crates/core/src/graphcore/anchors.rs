use super::paths::{bfs_shortest_paths, find_leaves};
use super::TreeGraph;
use crate::anatomy::{Class, NUM_NAMED, NUM_SEGMENTAL};
use crate::error::{Error, Result};

/// Trachea, two main bronchi, 18 segmentals and one leaf per segmental.
pub const NUM_ANCHORS: usize = 3 + 2 * NUM_SEGMENTAL;

/// Anchor node indices in canonical order: trachea, left main, right main,
/// the 18 segmentals in class order, then their 18 farthest leaves.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AnchorSet {
    anchors: Vec<usize>,
}

impl AnchorSet {
    pub fn new(anchors: Vec<usize>) -> Self {
        AnchorSet { anchors }
    }

    pub fn nodes(&self) -> &[usize] {
        &self.anchors
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }
}

/// `predicted[c]` is the node assigned to named class `c`; all 21 must be present.
pub fn select_anchors(g: &TreeGraph, predicted: &[Option<usize>]) -> Result<AnchorSet> {
    if predicted.len() < NUM_NAMED {
        return Err(Error::invalid(format!("prediction covers {} classes, need 21", predicted.len())));
    }
    let mut named = Vec::with_capacity(NUM_NAMED);
    for c in Class::named() {
        let node = predicted[c.index()].ok_or_else(|| Error::invalid(format!("no prediction for {c}")))?;
        if node >= g.len() {
            return Err(Error::invalid(format!("predicted node {node} for {c} not in graph")));
        }
        named.push(node);
    }
    let trachea = named[Class::TRACHEA.index()];
    g.require_connected()?;
    let mut anchors = named.clone();
    for c in Class::segmental() {
        let s = named[c.index()];
        anchors.push(farthest_leaf(g, trachea, s)?);
    }
    debug_assert_eq!(anchors.len(), NUM_ANCHORS);
    Ok(AnchorSet { anchors })
}

fn farthest_leaf(g: &TreeGraph, root: usize, s: usize) -> Result<usize> {
    if s != root && g.degree(s) == 1 {
        return Ok(s);
    }
    let leaves = find_leaves(g, root, Some(s))?;
    let hops = bfs_shortest_paths(g, s)?;
    // leaves come sorted by node index, which is ascending branch id; keep the
    // first maximum
    let mut best: Option<(u32, usize)> = None;
    for l in leaves {
        if best.is_none_or(|(d, _)| hops[l] > d) {
            best = Some((hops[l], l));
        }
    }
    Ok(best.map_or(s, |(_, l)| l))
}
