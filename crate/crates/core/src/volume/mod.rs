//! Branch label volumes: storage, MetaImage I/O, resampling, adjacency
//! graphs, branch centers and CNN input patches.
//!
//! Voxel index order is `[x, y, z]` with `x` fastest in memory.

mod mhd;
mod patch;

pub use mhd::{read_label_map, write_label_map, write_label_map_local};
pub use patch::{extract_patch, extract_patch_at, BranchPatch, PATCH_BACKGROUND, PATCH_CENTER, PATCH_OTHER};

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::graphcore::{BranchId, TreeGraph};

/// Canonical resampling target in mm (sagittal, coronal, axial).
pub const CANONICAL_SPACING: [f64; 3] = [0.625, 0.625, 0.5];

/// On-disk integer width of a label map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementType {
    UShort,
    UInt,
}

impl ElementType {
    pub fn met_name(self) -> &'static str {
        match self {
            ElementType::UShort => "MET_USHORT",
            ElementType::UInt => "MET_UINT",
        }
    }

    pub fn from_met_name(s: &str) -> Option<Self> {
        match s {
            "MET_USHORT" => Some(ElementType::UShort),
            "MET_UINT" => Some(ElementType::UInt),
            _ => None,
        }
    }

    pub fn bytes(self) -> usize {
        match self {
            ElementType::UShort => 2,
            ElementType::UInt => 4,
        }
    }

    /// Narrowest type holding `max_label`.
    pub fn fitting(max_label: u32) -> Self {
        if max_label <= u16::MAX as u32 {
            ElementType::UShort
        } else {
            ElementType::UInt
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VoxelLabelMap {
    dims: [usize; 3],
    spacing: [f64; 3],
    voxels: Vec<u32>,
    element_type: ElementType,
}

impl VoxelLabelMap {
    /// Element type is the narrowest one that holds every label.
    pub fn new(dims: [usize; 3], spacing: [f64; 3], voxels: Vec<u32>) -> Result<Self> {
        let max = voxels.iter().copied().max().unwrap_or(0);
        Self::with_element_type(dims, spacing, voxels, ElementType::fitting(max))
    }

    pub fn with_element_type(
        dims: [usize; 3],
        spacing: [f64; 3],
        voxels: Vec<u32>,
        element_type: ElementType,
    ) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::shape(format!("zero dimension in {dims:?}")));
        }
        if dims.iter().product::<usize>() != voxels.len() {
            return Err(Error::shape(format!("dims {dims:?} need {} voxels, got {}", dims.iter().product::<usize>(), voxels.len())));
        }
        check_spacing(spacing)?;
        if element_type == ElementType::UShort && voxels.iter().any(|&v| v > u16::MAX as u32) {
            return Err(Error::invalid("label exceeds MET_USHORT range"));
        }
        Ok(VoxelLabelMap { dims, spacing, voxels, element_type })
    }

    pub fn zeros(dims: [usize; 3], spacing: [f64; 3]) -> Result<Self> {
        Self::new(dims, spacing, vec![0; dims.iter().product()])
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn voxels(&self) -> &[u32] {
        &self.voxels
    }

    pub fn element_type(&self) -> ElementType {
        self.element_type
    }

    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    #[inline]
    pub fn linear(&self, [x, y, z]: [usize; 3]) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn coords(&self, i: usize) -> [usize; 3] {
        let x = i % self.dims[0];
        let yz = i / self.dims[0];
        [x, yz % self.dims[1], yz / self.dims[1]]
    }

    #[inline]
    pub fn get(&self, p: [usize; 3]) -> u32 {
        self.voxels[self.linear(p)]
    }

    /// Writes a label; widens the element type when needed.
    pub fn set(&mut self, p: [usize; 3], label: u32) {
        let i = self.linear(p);
        self.voxels[i] = label;
        if label > u16::MAX as u32 {
            self.element_type = ElementType::UInt;
        }
    }

    /// Sorted distinct non-zero labels.
    pub fn branch_ids(&self) -> Vec<BranchId> {
        self.voxels.iter().copied().filter(|&v| v != 0).collect::<BTreeSet<_>>().into_iter().collect()
    }

    pub fn contains_branch(&self, id: BranchId) -> bool {
        id != 0 && self.voxels.contains(&id)
    }
}

fn check_spacing(s: [f64; 3]) -> Result<()> {
    if s.iter().all(|v| v.is_finite() && *v > 0.0) {
        Ok(())
    } else {
        Err(Error::invalid(format!("spacing must be positive, got {s:?}")))
    }
}

/// Nearest-neighbour resampling onto `target` spacing. Voxel `j` on an axis
/// covers `[j·s, (j+1)·s)`; each output center picks the input voxel whose
/// center is closest, ties going to the lower index.
pub fn resample_nearest(v: &VoxelLabelMap, target: [f64; 3]) -> Result<VoxelLabelMap> {
    check_spacing(target)?;
    if target == v.spacing {
        return Ok(v.clone());
    }
    let mut dims = [0; 3];
    let mut lookup: [Vec<usize>; 3] = Default::default();
    for a in 0..3 {
        let (d, s, t) = (v.dims[a], v.spacing[a], target[a]);
        dims[a] = ((d as f64 * s / t).round() as usize).max(1);
        lookup[a] = (0..dims[a])
            .map(|k| {
                let pos = (k as f64 + 0.5) * t;
                let mut best = 0;
                let mut best_d = f64::INFINITY;
                for j in 0..d {
                    let dist = ((j as f64 + 0.5) * s - pos).abs();
                    if dist < best_d {
                        best_d = dist;
                        best = j;
                    }
                }
                best
            })
            .collect();
    }
    let mut out = Vec::with_capacity(dims.iter().product());
    for &z in &lookup[2] {
        for &y in &lookup[1] {
            let row = v.dims[0] * (y + v.dims[1] * z);
            out.extend(lookup[0].iter().map(|&x| v.voxels[row + x]));
        }
    }
    VoxelLabelMap::with_element_type(dims, target, out, v.element_type)
}

/// Half of the 26-neighbourhood; visiting these from every voxel covers
/// each adjacent pair once.
const FORWARD_NEIGHBORS: [[isize; 3]; 13] = [
    [1, 0, 0],
    [-1, 1, 0],
    [0, 1, 0],
    [1, 1, 0],
    [-1, -1, 1],
    [0, -1, 1],
    [1, -1, 1],
    [-1, 0, 1],
    [0, 0, 1],
    [1, 0, 1],
    [-1, 1, 1],
    [0, 1, 1],
    [1, 1, 1],
];

/// One node per label, an edge wherever two labels are 26-adjacent.
/// Centers come from [`branch_centers`]; labels are left unset.
pub fn build_branch_graph(v: &VoxelLabelMap) -> Result<TreeGraph> {
    let [nx, ny, nz] = v.dims;
    let mut edges = BTreeSet::new();
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let a = v.voxels[x + nx * (y + ny * z)];
                if a == 0 {
                    continue;
                }
                for d in FORWARD_NEIGHBORS {
                    let (qx, qy, qz) = (x as isize + d[0], y as isize + d[1], z as isize + d[2]);
                    if qx < 0 || qy < 0 || qx >= nx as isize || qy >= ny as isize || qz >= nz as isize {
                        continue;
                    }
                    let b = v.voxels[qx as usize + nx * (qy as usize + ny * qz as usize)];
                    if b != 0 && b != a {
                        edges.insert((a.min(b), a.max(b)));
                    }
                }
            }
        }
    }
    let stats = branch_stats(v);
    if stats.is_empty() {
        return Err(Error::invalid("label map has no branches"));
    }
    let nodes = stats.into_iter().map(|(id, (count, center))| (id, center, count, None)).collect();
    TreeGraph::new(nodes, edges)
}

/// Voxel of `branch` closest to the branch's voxel centroid; ties go to the
/// lexicographically smallest `[x, y, z]`.
pub fn branch_center(v: &VoxelLabelMap, branch: BranchId) -> Result<[usize; 3]> {
    if branch == 0 {
        return Err(Error::UnknownBranch(0));
    }
    let mut acc = CentroidAcc::default();
    for (i, &l) in v.voxels.iter().enumerate() {
        if l == branch {
            acc.add(v.coords(i));
        }
    }
    if acc.count == 0 {
        return Err(Error::UnknownBranch(branch));
    }
    let mut best = Nearest::default();
    for (i, &l) in v.voxels.iter().enumerate() {
        if l == branch {
            best.offer(&acc, v.coords(i));
        }
    }
    Ok(best.point)
}

/// Centers for every branch in two passes over the volume.
pub fn branch_centers(v: &VoxelLabelMap) -> BTreeMap<BranchId, [usize; 3]> {
    branch_stats(v).into_iter().map(|(id, (_, c))| (id, c)).collect()
}

fn branch_stats(v: &VoxelLabelMap) -> BTreeMap<BranchId, (u64, [usize; 3])> {
    let mut accs: BTreeMap<BranchId, CentroidAcc> = BTreeMap::new();
    for (i, &l) in v.voxels.iter().enumerate() {
        if l != 0 {
            accs.entry(l).or_default().add(v.coords(i));
        }
    }
    let mut best: BTreeMap<BranchId, Nearest> = BTreeMap::new();
    for (i, &l) in v.voxels.iter().enumerate() {
        if l != 0 {
            best.entry(l).or_default().offer(&accs[&l], v.coords(i));
        }
    }
    accs.into_iter().map(|(id, a)| (id, (a.count, best[&id].point))).collect()
}

#[derive(Default)]
struct CentroidAcc {
    count: u64,
    sum: [u64; 3],
}

impl CentroidAcc {
    fn add(&mut self, p: [usize; 3]) {
        self.count += 1;
        for a in 0..3 {
            self.sum[a] += p[a] as u64;
        }
    }

    /// `count² · |p − centroid|²`, exact in integers.
    fn scaled_dist2(&self, p: [usize; 3]) -> u128 {
        (0..3)
            .map(|a| {
                let d = self.count as i128 * p[a] as i128 - self.sum[a] as i128;
                (d * d) as u128
            })
            .sum()
    }
}

struct Nearest {
    dist: u128,
    point: [usize; 3],
}

impl Default for Nearest {
    fn default() -> Self {
        Nearest { dist: u128::MAX, point: [usize::MAX; 3] }
    }
}

impl Nearest {
    fn offer(&mut self, acc: &CentroidAcc, p: [usize; 3]) {
        let d = acc.scaled_dist2(p);
        if d < self.dist || (d == self.dist && p < self.point) {
            self.dist = d;
            self.point = p;
        }
    }
}
