use std::collections::VecDeque;

use super::TreeGraph;
use crate::error::{Error, Result};

/// Marker hop count for nodes not reachable from the source.
pub const UNREACHABLE: u32 = u32::MAX;

/// Hop counts from one source, indexed by node.
pub type Hops = Vec<u32>;

pub fn bfs_shortest_paths(g: &TreeGraph, source: usize) -> Result<Hops> {
    if source >= g.len() {
        return Err(Error::invalid(format!("source node {source} not in graph of {} nodes", g.len())));
    }
    let mut dist = vec![UNREACHABLE; g.len()];
    let mut queue = VecDeque::new();
    dist[source] = 0;
    queue.push_back(source);
    while let Some(u) = queue.pop_front() {
        for &v in g.neighbors(u) {
            if dist[v] == UNREACHABLE {
                dist[v] = dist[u] + 1;
                queue.push_back(v);
            }
        }
    }
    Ok(dist)
}

pub fn all_pairs_hops(g: &TreeGraph) -> Vec<Hops> {
    (0..g.len()).map(|s| bfs_shortest_paths(g, s).expect("valid source")).collect()
}

/// Longest shortest-path hop count over all node pairs.
pub fn graph_diameter(g: &TreeGraph) -> Result<u32> {
    if g.len() < 2 {
        return Err(Error::invalid("diameter needs at least two nodes"));
    }
    g.require_connected()?;
    Ok(all_pairs_hops(g)
        .iter()
        .flat_map(|row| row.iter().copied())
        .max()
        .unwrap_or(0))
}

/// BFS parent of every node when the graph is rooted at `root`
/// (`usize::MAX` for the root and unreachable nodes).
pub(crate) fn bfs_parents(g: &TreeGraph, root: usize) -> Vec<usize> {
    let mut parent = vec![usize::MAX; g.len()];
    let mut seen = vec![false; g.len()];
    let mut queue = VecDeque::from([root]);
    seen[root] = true;
    while let Some(u) = queue.pop_front() {
        for &v in g.neighbors(u) {
            if !seen[v] {
                seen[v] = true;
                parent[v] = u;
                queue.push_back(v);
            }
        }
    }
    parent
}

/// Whether `node`'s path to the root passes through `through` (inclusive).
pub(crate) fn in_subtree(parent: &[usize], node: usize, through: usize) -> bool {
    let mut cur = node;
    loop {
        if cur == through {
            return true;
        }
        match parent[cur] {
            usize::MAX => return false,
            p => cur = p,
        }
    }
}

/// Degree-1 nodes other than `root`, optionally restricted to the subtree
/// below `within` when the graph is rooted at `root`. Sorted by node index.
pub fn find_leaves(g: &TreeGraph, root: usize, within: Option<usize>) -> Result<Vec<usize>> {
    if root >= g.len() {
        return Err(Error::invalid(format!("root node {root} not in graph")));
    }
    if let Some(w) = within {
        if w >= g.len() {
            return Err(Error::invalid(format!("subtree node {w} not in graph")));
        }
    }
    g.require_connected()?;
    let parent = bfs_parents(g, root);
    Ok((0..g.len())
        .filter(|&i| i != root && g.degree(i) == 1)
        .filter(|&i| within.is_none_or(|w| in_subtree(&parent, i, w)))
        .collect())
}
