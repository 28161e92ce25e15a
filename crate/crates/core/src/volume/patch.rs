use super::{branch_center, VoxelLabelMap};
use crate::error::{Error, Result};
use crate::graphcore::BranchId;
use crate::tensor::Tensor;

pub const PATCH_CENTER: f32 = 0.9;
pub const PATCH_OTHER: f32 = 0.5;
pub const PATCH_BACKGROUND: f32 = 0.0;

/// Cubic crop around one branch, stored `[z, y, x]`.
#[derive(Clone, Debug, PartialEq)]
pub struct BranchPatch {
    pub side: usize,
    pub values: Tensor<f32>,
    pub center_branch: BranchId,
}

pub fn extract_patch(v: &VoxelLabelMap, branch: BranchId, side: usize) -> Result<BranchPatch> {
    let center = branch_center(v, branch)?;
    extract_patch_at(v, branch, center, side)
}

/// Crop with a precomputed center. Patch voxel `p` on an axis maps to volume
/// coordinate `center − side/2 + p`; anything outside the volume reads 0.
pub fn extract_patch_at(v: &VoxelLabelMap, branch: BranchId, center: [usize; 3], side: usize) -> Result<BranchPatch> {
    if side < 2 {
        return Err(Error::invalid(format!("patch side must be at least 2, got {side}")));
    }
    if branch == 0 {
        return Err(Error::UnknownBranch(0));
    }
    let dims = v.dims();
    if (0..3).any(|a| center[a] >= dims[a]) || v.get(center) != branch {
        return Err(Error::UnknownBranch(branch));
    }
    let half = (side / 2) as isize;
    let origin: [isize; 3] = std::array::from_fn(|a| center[a] as isize - half);
    let mut values = vec![PATCH_BACKGROUND; side * side * side];
    let vox = v.voxels();
    // clip the x range once per row
    let x0 = (-origin[0]).max(0) as usize;
    let x1 = ((dims[0] as isize - origin[0]).min(side as isize)).max(0) as usize;
    for pz in 0..side {
        let z = origin[2] + pz as isize;
        if z < 0 || z >= dims[2] as isize {
            continue;
        }
        for py in 0..side {
            let y = origin[1] + py as isize;
            if y < 0 || y >= dims[1] as isize {
                continue;
            }
            let row = dims[0] * (y as usize + dims[1] * z as usize);
            let out = &mut values[side * (py + side * pz)..][..side];
            for px in x0..x1 {
                let l = vox[row + (origin[0] + px as isize) as usize];
                out[px] = if l == branch {
                    PATCH_CENTER
                } else if l != 0 {
                    PATCH_OTHER
                } else {
                    PATCH_BACKGROUND
                };
            }
        }
    }
    Ok(BranchPatch {
        side,
        values: Tensor::new(&[side, side, side], values)?,
        center_branch: branch,
    })
}
