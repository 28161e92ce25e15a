//! Deterministic synthetic airway trees and their voxel rasterization.
//!
//! A fixed binary template carries the 18 segmental bronchi; geometry is
//! randomized per seed, a few segmentals may be dropped, and random
//! sub-segmental bifurcations extend the tree to the requested depth.
//! Levels count from the trachea (1), main bronchi (2), lobar and other
//! template junctions (3) to the segmentals (4).

mod corpus;
mod geometry;
mod raster;
mod rng;

pub use corpus::{read_manifest, write_corpus, CorpusEntry, CorpusManifest};
pub use raster::rasterize_tree;
pub use rng::SplitMix64;

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::anatomy::{Class, NUM_SEGMENTAL};
use crate::error::{Error, Result};
use crate::graphcore::{BranchId, TreeGraph};
use crate::volume::{build_branch_graph, VoxelLabelMap, CANONICAL_SPACING};
use geometry::{add, cross, dot, normalize, point_segment_distance, rotate, scale, segment_distance, sub, V3};

/// At most this many segmentals are dropped from one tree.
pub const MAX_MISSING: usize = 4;

const MAX_ATTEMPTS: usize = 200;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticTreeSpec {
    pub seed: u64,
    /// Deepest level, 4 (segmentals are leaves) to 7.
    pub depth: u32,
    pub angle_jitter_deg: f64,
    /// Relative length noise.
    pub length_jitter: f64,
    pub missing_prob: f64,
    /// Chance that a terminal branch bifurcates at each extension level.
    pub extension_prob: f64,
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
}

impl Default for SyntheticTreeSpec {
    fn default() -> Self {
        SyntheticTreeSpec {
            seed: 0,
            depth: 5,
            angle_jitter_deg: 8.0,
            length_jitter: 0.15,
            missing_prob: 0.1,
            extension_prob: 0.5,
            dims: [136, 104, 184],
            spacing: CANONICAL_SPACING,
        }
    }
}

impl SyntheticTreeSpec {
    pub fn with_seed(seed: u64) -> Self {
        SyntheticTreeSpec { seed, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::invalid(m.to_string()));
        if !(4..=7).contains(&self.depth) {
            return bad("depth must be in 4..=7");
        }
        if !(0.0..=15.0).contains(&self.angle_jitter_deg) {
            return bad("angle jitter must be in [0, 15] degrees");
        }
        if !(0.0..=0.3).contains(&self.length_jitter) {
            return bad("length jitter must be in [0, 0.3]");
        }
        if !(0.0..=0.3).contains(&self.missing_prob) {
            return bad("missing-branch probability must be in [0, 0.3]");
        }
        if !(0.0..=1.0).contains(&self.extension_prob) {
            return bad("extension probability must be in [0, 1]");
        }
        if self.dims.iter().any(|&d| d < 8) {
            return bad("volume dims must be at least 8");
        }
        if !self.spacing.iter().all(|s| s.is_finite() && *s > 0.0) {
            return bad("spacing must be positive");
        }
        Ok(())
    }
}

/// Axis and radii of one branch tube, in mm, volume frame. The branch owns
/// the cylinder of `radius` around `start + t·dir` for `t ∈ [t0, length]`
/// plus a ball of `end_radius` around its end point.
#[derive(Clone, Debug, PartialEq)]
pub struct BranchGeometry {
    pub start: V3,
    pub dir: V3,
    pub length: f64,
    pub radius: f64,
    pub t0: f64,
    pub end_radius: f64,
}

impl BranchGeometry {
    pub fn end(&self) -> V3 {
        add(self.start, scale(self.dir, self.length))
    }

    fn axis_start(&self) -> V3 {
        add(self.start, scale(self.dir, self.t0))
    }

    /// Whether physical point `q` lies in the territory.
    pub fn contains(&self, q: V3) -> bool {
        let e = sub(q, self.end());
        if dot(e, e) <= self.end_radius * self.end_radius {
            return true;
        }
        let rel = sub(q, self.start);
        let t = dot(rel, self.dir);
        if t < self.t0 || t > self.length {
            return false;
        }
        let perp = sub(rel, scale(self.dir, t));
        dot(perp, perp) <= self.radius * self.radius
    }

    /// Lower bound on the gap between two territories.
    fn clearance(&self, o: &BranchGeometry) -> f64 {
        let (a0, a1, b0, b1) = (self.axis_start(), self.end(), o.axis_start(), o.end());
        let cc = segment_distance(a0, a1, b0, b1) - self.radius - o.radius;
        let bc = point_segment_distance(a1, b0, b1) - self.end_radius - o.radius;
        let cb = point_segment_distance(b1, a0, a1) - self.radius - o.end_radius;
        let bb = geometry::norm(sub(a1, b1)) - self.end_radius - o.end_radius;
        cc.min(bc).min(cb).min(bb)
    }

    fn bounds(&self) -> (V3, V3) {
        let a = self.axis_start();
        let b = self.end();
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for k in 0..3 {
            lo[k] = (a[k] - self.radius).min(b[k] - self.end_radius).min(b[k] - self.radius);
            hi[k] = (a[k] + self.radius).max(b[k] + self.end_radius).max(b[k] + self.radius);
        }
        (lo, hi)
    }

    fn translated(&self, by: V3) -> BranchGeometry {
        BranchGeometry { start: add(self.start, by), ..self.clone() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthNode {
    pub id: BranchId,
    pub parent: Option<usize>,
    pub children: Vec<usize>,
    pub class: Class,
    pub level: u32,
    pub geometry: BranchGeometry,
}

/// Generated tree; nodes are in breadth-first order, parents first.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticTree {
    pub spec: SyntheticTreeSpec,
    pub nodes: Vec<SynthNode>,
}

impl SyntheticTree {
    pub fn ids(&self) -> Vec<BranchId> {
        self.nodes.iter().map(|n| n.id).collect()
    }

    /// Parent-child pairs as `(min, max)` branch IDs, sorted.
    pub fn edges(&self) -> Vec<(BranchId, BranchId)> {
        let mut e: Vec<_> = self
            .nodes
            .iter()
            .filter_map(|n| n.parent.map(|p| (self.nodes[p].id.min(n.id), self.nodes[p].id.max(n.id))))
            .collect();
        e.sort_unstable();
        e
    }

    pub fn class_of(&self, id: BranchId) -> Option<Class> {
        self.nodes.iter().find(|n| n.id == id).map(|n| n.class)
    }

    /// Labeled graph without voxel geometry.
    pub fn topology(&self) -> TreeGraph {
        let nodes = self.nodes.iter().map(|n| (n.id, [0; 3], 0, Some(n.class))).collect();
        TreeGraph::new(nodes, self.edges()).expect("generated tree is consistent")
    }

    pub fn segmentals_present(&self) -> usize {
        self.nodes.iter().filter(|n| n.class.is_segmental()).count()
    }

    /// Same tree with every branch ID passed through `f` (must be injective
    /// and non-zero).
    pub fn relabeled(&self, f: impl Fn(BranchId) -> BranchId) -> SyntheticTree {
        let mut t = self.clone();
        for n in &mut t.nodes {
            n.id = f(n.id);
        }
        t
    }
}

/// A rasterized tree with the graph rebuilt from its voxels.
#[derive(Clone, Debug)]
pub struct SyntheticSample {
    pub tree: SyntheticTree,
    pub volume: VoxelLabelMap,
    pub graph: TreeGraph,
}

pub fn generate_sample(spec: &SyntheticTreeSpec) -> Result<SyntheticSample> {
    let tree = generate_tree(spec)?;
    let volume = rasterize_tree(&tree, spec.dims, spec.spacing)?;
    let mut graph = build_branch_graph(&volume)?;
    if graph.node_ids() != tree.ids().as_slice() {
        return Err(Error::invalid(format!("seed {}: a branch vanished during rasterization", spec.seed)));
    }
    let labels = graph.node_ids().iter().map(|&id| tree.class_of(id)).collect();
    graph.set_labels(labels)?;
    Ok(SyntheticSample { tree, volume, graph })
}

struct Proto {
    class: Class,
    children: Vec<usize>,
    level: u32,
    /// Nominal deflection from the parent direction, degrees; sign picks
    /// the side of the bifurcation plane.
    angle: f64,
}

fn template() -> (Vec<Proto>, usize) {
    let mut t: Vec<Proto> = Vec::new();
    let leaf = |t: &mut Vec<Proto>, c: Class| {
        t.push(Proto { class: c, children: vec![], level: 4, angle: 0.0 });
        t.len() - 1
    };
    let split = |t: &mut Vec<Proto>, c: Class, level: u32, kids: [usize; 2], angles: [f64; 2]| {
        for (k, a) in kids.iter().zip(angles) {
            t[*k].angle = a;
        }
        t.push(Proto { class: c, children: kids.to_vec(), level, angle: 0.0 });
        t.len() - 1
    };
    let o = Class::OTHER;
    let std = [38.0, -38.0];

    let rb: Vec<usize> = (1..=10).map(|i| leaf(&mut t, Class::rb(i))).collect();
    let x1 = split(&mut t, o, 3, [rb[1], rb[2]], std);
    let rul = split(&mut t, o, 3, [rb[0], x1], [40.0, -30.0]);
    let rml = split(&mut t, o, 3, [rb[3], rb[4]], std);
    let rbas3 = split(&mut t, o, 3, [rb[8], rb[9]], std);
    let rbas2 = split(&mut t, o, 3, [rb[7], rbas3], [40.0, -25.0]);
    let rbas = split(&mut t, o, 3, [rb[6], rbas2], [40.0, -25.0]);
    let rll = split(&mut t, o, 3, [rb[5], rbas], [45.0, -25.0]);
    let bi = split(&mut t, o, 3, [rml, rll], [40.0, -25.0]);
    let rmb = split(&mut t, Class::RIGHT_MAIN, 2, [rul, bi], [55.0, -20.0]);

    let lb: Vec<usize> = [1, 3, 4, 5, 6, 7, 9, 10].iter().map(|&i| leaf(&mut t, Class::lb(i))).collect();
    let lup = split(&mut t, o, 3, [lb[0], lb[1]], std);
    let ling = split(&mut t, o, 3, [lb[2], lb[3]], std);
    let lul = split(&mut t, o, 3, [lup, ling], [35.0, -35.0]);
    let lbas2 = split(&mut t, o, 3, [lb[6], lb[7]], std);
    let lbas = split(&mut t, o, 3, [lb[5], lbas2], [40.0, -25.0]);
    let lll = split(&mut t, o, 3, [lb[4], lbas], [45.0, -25.0]);
    let lmb = split(&mut t, Class::LEFT_MAIN, 2, [lul, lll], [40.0, -30.0]);

    let root = split(&mut t, Class::TRACHEA, 1, [rmb, lmb], [25.0, -45.0]);
    (t, root)
}

/// Builds topology and geometry. Geometry draws are retried (continuing
/// the same random stream) until all non-adjacent tubes keep clear of each
/// other and the tree fits the volume.
pub fn generate_tree(spec: &SyntheticTreeSpec) -> Result<SyntheticTree> {
    spec.validate()?;
    let mut rng = SplitMix64::new(spec.seed);
    let (mut protos, root) = template();

    // drop segmentals: K ~ Binomial(MAX_MISSING, q) distinct picks, so each
    // segmental goes missing with probability exactly 4q/18 = p
    let q = (spec.missing_prob * NUM_SEGMENTAL as f64 / MAX_MISSING as f64).min(1.0);
    let k = (0..MAX_MISSING).filter(|_| rng.bernoulli(q)).count();
    let mut segs: Vec<usize> = (0..protos.len()).filter(|&i| protos[i].class.is_segmental()).collect();
    for i in 0..k {
        let j = i + rng.below((segs.len() - i) as u64) as usize;
        segs.swap(i, j);
    }
    let missing = &segs[..k];
    for p in protos.iter_mut() {
        p.children.retain(|c| !missing.contains(c));
    }

    // breadth-first order with sub-segmental extensions appended per level
    let mut order = vec![root];
    let mut i = 0;
    while i < order.len() {
        let cur = order[i];
        let level = protos[cur].level;
        let extendable = protos[cur].class.is_segmental() || level > 4;
        if extendable && protos[cur].children.is_empty() && level < spec.depth && rng.bernoulli(spec.extension_prob) {
            for a in [35.0, -35.0] {
                protos.push(Proto { class: Class::OTHER, children: vec![], level: level + 1, angle: a });
                let id = protos.len() - 1;
                protos[cur].children.push(id);
            }
        }
        order.extend(protos[cur].children.iter().copied());
        i += 1;
    }
    let mut position = vec![usize::MAX; protos.len()];
    for (k, &p) in order.iter().enumerate() {
        position[p] = k;
    }
    let children: Vec<Vec<usize>> = order.iter().map(|&p| protos[p].children.iter().map(|&c| position[c]).collect()).collect();
    let mut parents = vec![None; order.len()];
    for (k, kids) in children.iter().enumerate() {
        for &c in kids {
            parents[c] = Some(k);
        }
    }

    for _ in 0..MAX_ATTEMPTS {
        let geo = draw_geometry(spec, &mut rng, &order, &protos, &parents, &children);
        if let Some(geo) = place(spec, geo, &parents) {
            let nodes = (0..order.len())
                .map(|k| SynthNode {
                    id: k as BranchId + 1,
                    parent: parents[k],
                    children: children[k].clone(),
                    class: protos[order[k]].class,
                    level: protos[order[k]].level,
                    geometry: geo[k].clone(),
                })
                .collect();
            return Ok(SyntheticTree { spec: spec.clone(), nodes });
        }
    }
    Err(Error::invalid(format!("seed {}: no admissible geometry in {MAX_ATTEMPTS} attempts", spec.seed)))
}

const TRACHEA_LENGTH: f64 = 18.0;
const TRACHEA_RADIUS: f64 = 2.2;
const LENGTH_RATIO: f64 = 0.72;
const RADIUS_RATIO: f64 = 0.8;
const MIN_RADIUS: f64 = 0.8;

/// Minimum clearance between non-adjacent territories: beyond the largest
/// 26-neighbour center distance no voxel pair can touch.
fn required_gap(spacing: [f64; 3]) -> f64 {
    spacing.iter().map(|s| s * s).sum::<f64>().sqrt() + 0.25
}

fn draw_geometry(
    spec: &SyntheticTreeSpec,
    rng: &mut SplitMix64,
    order: &[usize],
    protos: &[Proto],
    parents: &[Option<usize>],
    children: &[Vec<usize>],
) -> Vec<BranchGeometry> {
    let n = order.len();
    let jit = spec.angle_jitter_deg * PI / 180.0;
    let gap = required_gap(spec.spacing);
    let mut dir = vec![[0.0; 3]; n];
    let mut normal = vec![[0.0; 3]; n];
    let mut radius = vec![0.0; n];
    let mut generation = vec![0u32; n];
    dir[0] = [0.0, 0.0, -1.0];
    normal[0] = [0.0, 1.0, 0.0];
    radius[0] = TRACHEA_RADIUS;
    for k in 1..n {
        let p = parents[k].unwrap();
        generation[k] = generation[p] + 1;
        let a = protos[order[k]].angle * PI / 180.0;
        let a = a + a.signum() * rng.jitter(jit);
        dir[k] = normalize(rotate(dir[p], normal[p], a));
        let base = normalize(cross(dir[k], normal[p]));
        normal[k] = normalize(rotate(base, dir[k], rng.jitter(jit)));
        radius[k] = (TRACHEA_RADIUS * RADIUS_RATIO.powi(generation[k] as i32)).max(MIN_RADIUS);
    }
    // junction balls wide enough that sibling tubes start `gap` apart
    let mut end_radius = radius.clone();
    for k in 0..n {
        let c = &children[k];
        let mut r = if c.is_empty() { radius[k] } else { 1.25 * radius[k] };
        if c.len() == 2 {
            let cos = dot(dir[c[0]], dir[c[1]]).clamp(-1.0, 1.0);
            let half = 0.5 * cos.acos();
            r = r.max((radius[c[0]] + radius[c[1]] + gap + 0.5) / (2.0 * half.sin()));
        }
        end_radius[k] = r;
    }
    let mut out: Vec<BranchGeometry> = Vec::with_capacity(n);
    for k in 0..n {
        let nominal = TRACHEA_LENGTH * LENGTH_RATIO.powi(generation[k] as i32);
        let mut length = nominal * (1.0 + rng.jitter(spec.length_jitter));
        let (start, t0) = match parents[k] {
            None => ([0.0; 3], 0.0),
            Some(p) => (out[p].end(), end_radius[p]),
        };
        length = length.max(t0 + end_radius[k] + radius[k] + gap);
        out.push(BranchGeometry { start, dir: dir[k], length, radius: radius[k], t0, end_radius: end_radius[k] });
    }
    out
}

/// Validates clearance and centers the tree in the volume.
fn place(spec: &SyntheticTreeSpec, geo: Vec<BranchGeometry>, parents: &[Option<usize>]) -> Option<Vec<BranchGeometry>> {
    let gap = required_gap(spec.spacing);
    for a in 0..geo.len() {
        for b in a + 1..geo.len() {
            if parents[b] == Some(a) || parents[a] == Some(b) {
                continue;
            }
            if geo[a].clearance(&geo[b]) <= gap {
                return None;
            }
        }
    }
    let (mut lo, mut hi) = ([f64::INFINITY; 3], [f64::NEG_INFINITY; 3]);
    for g in &geo {
        let (l, h) = g.bounds();
        for k in 0..3 {
            lo[k] = lo[k].min(l[k]);
            hi[k] = hi[k].max(h[k]);
        }
    }
    let mut shift = [0.0; 3];
    for k in 0..3 {
        let extent = spec.dims[k] as f64 * spec.spacing[k];
        let margin = spec.spacing[k];
        if hi[k] - lo[k] > extent - 2.0 * margin {
            return None;
        }
        shift[k] = 0.5 * extent - 0.5 * (lo[k] + hi[k]);
    }
    Some(geo.iter().map(|g| g.translated(shift)).collect())
}

#[cfg(test)]
mod tests;
