use super::SyntheticTree;
use crate::error::{Error, Result};
use crate::volume::VoxelLabelMap;

/// Voxel `i` on an axis has its center at `(i + 0.5)·spacing`. Branches are
/// drawn in node order and never overwrite an earlier claim.
pub fn rasterize_tree(tree: &SyntheticTree, dims: [usize; 3], spacing: [f64; 3]) -> Result<VoxelLabelMap> {
    let mut v = VoxelLabelMap::zeros(dims, spacing)?;
    let mut boxes = Vec::with_capacity(tree.nodes.len());
    for n in &tree.nodes {
        let (lo, hi) = n.geometry.bounds();
        let mut range = [(0usize, 0usize); 3];
        for a in 0..3 {
            let first = (lo[a] / spacing[a] - 0.5).ceil();
            let last = (hi[a] / spacing[a] - 0.5).floor();
            if first < 0.0 || last >= dims[a] as f64 {
                return Err(Error::invalid(format!("branch {} extends outside the volume", n.id)));
            }
            range[a] = (first as usize, last as usize);
        }
        boxes.push(range);
    }
    for (n, range) in tree.nodes.iter().zip(boxes) {
        for z in range[2].0..=range[2].1 {
            for y in range[1].0..=range[1].1 {
                for x in range[0].0..=range[0].1 {
                    let q = [(x as f64 + 0.5) * spacing[0], (y as f64 + 0.5) * spacing[1], (z as f64 + 0.5) * spacing[2]];
                    if v.get([x, y, z]) == 0 && n.geometry.contains(q) {
                        v.set([x, y, z], n.id);
                    }
                }
            }
        }
    }
    Ok(v)
}
