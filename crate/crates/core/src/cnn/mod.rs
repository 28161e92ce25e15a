//! Branch-patch encoder: three conv/conv/pool blocks, two widening
//! convolutions, a projection to the branch feature and a class head.

use serde::{Deserialize, Serialize};

use crate::anatomy::NUM_CLASSES;
use crate::error::{Error, Result};
use crate::graphcore::TreeGraph;
use crate::labeling::{ClassProbMatrix, Layer};
use crate::tensor::{Padding, ParamSet, ParamSpec, Real, Tape, Tensor, Var};
use crate::train::init_params;
use crate::volume::{extract_patch_at, BranchPatch, VoxelLabelMap};


pub const FEATURE_DIM: usize = 1024;
const KVOL: usize = 27;
/// Patches pushed through one inference tape.
const INFER_CHUNK: usize = 16;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CnnConfig {
    pub side: usize,
    /// Output channels of the three blocks.
    pub channels: [usize; 3],
    /// Output channels of both widening convolutions.
    pub widen: usize,
    pub widen_padding: Padding,
    pub feature_dim: usize,
}

impl Default for CnnConfig {
    /// 80³ patches, 32/64/128 block channels, two valid convs to 256.
    fn default() -> Self {
        CnnConfig { side: 80, channels: [32, 64, 128], widen: 256, widen_padding: Padding::Valid, feature_dim: FEATURE_DIM }
    }
}

impl CnnConfig {
    pub fn desk16() -> Self {
        CnnConfig { side: 16, channels: [8, 16, 32], widen: 64, widen_padding: Padding::Same, feature_dim: FEATURE_DIM }
    }

    pub fn desk32() -> Self {
        CnnConfig { side: 32, channels: [2, 4, 8], widen: 16, widen_padding: Padding::Same, feature_dim: FEATURE_DIM }
    }

    /// Named preset: `default`, `desk16` or `desk32`.
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "default" => Ok(Self::default()),
            "desk16" => Ok(Self::desk16()),
            "desk32" => Ok(Self::desk32()),
            other => Err(Error::invalid(format!("unknown CNN preset {other:?}"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.side < 8 || self.side % 8 != 0 {
            return Err(Error::invalid(format!("patch side must be a positive multiple of 8, got {}", self.side)));
        }
        if self.channels.contains(&0) || self.widen == 0 || self.feature_dim == 0 {
            return Err(Error::invalid("CNN widths must be positive"));
        }
        if self.widen_padding == Padding::Valid && self.pooled_side() < 5 {
            return Err(Error::invalid(format!("valid widening needs pooled side >= 5, got {}", self.pooled_side())));
        }
        Ok(())
    }

    pub fn pooled_side(&self) -> usize {
        self.side / 8
    }

    /// Spatial side after the two widening convolutions.
    pub fn widened_side(&self) -> usize {
        match self.widen_padding {
            Padding::Same => self.pooled_side(),
            Padding::Valid => self.pooled_side() - 4,
        }
    }

    pub fn flat_dim(&self) -> usize {
        self.widen * self.widened_side().pow(3)
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut specs = Vec::new();
        let mut conv = |name: String, c_in: usize, c_out: usize| {
            specs.push(ParamSpec::weight(format!("{name}.weight"), &[c_out, c_in, 3, 3, 3], c_in * KVOL));
            specs.push(ParamSpec::bias(format!("{name}.bias"), c_out));
        };
        let mut c_in = 1;
        for (b, &c) in self.channels.iter().enumerate() {
            conv(format!("block{}.conv1", b + 1), c_in, c);
            conv(format!("block{}.conv2", b + 1), c, c);
            c_in = c;
        }
        conv("widen1".into(), c_in, self.widen);
        conv("widen2".into(), self.widen, self.widen);
        let flat = self.flat_dim();
        specs.push(ParamSpec::weight("proj.weight", &[flat, self.feature_dim], flat));
        specs.push(ParamSpec::bias("proj.bias", self.feature_dim));
        specs.push(ParamSpec::weight("head.weight", &[self.feature_dim, NUM_CLASSES], self.feature_dim));
        specs.push(ParamSpec::bias("head.bias", NUM_CLASSES));
        specs
    }

    pub fn param_count(&self) -> usize {
        self.param_specs().iter().map(ParamSpec::numel).sum()
    }

    /// Per-patch layer shapes for MAC accounting.
    pub fn mac_layers(&self) -> Vec<(String, Layer)> {
        let mut out = Vec::new();
        let mut s = self.side;
        let mut c_in = 1;
        for (b, &c) in self.channels.iter().enumerate() {
            for (j, ci) in [(1, c_in), (2, c)] {
                out.push((format!("block{}.conv{j}", b + 1), Layer::Conv3d { c_in: ci, c_out: c, kernel: [3; 3], out: [s; 3] }));
            }
            s /= 2;
            c_in = c;
        }
        for (j, ci) in [(1, c_in), (2, self.widen)] {
            if self.widen_padding == Padding::Valid {
                s -= 2;
            }
            out.push((format!("widen{j}"), Layer::Conv3d { c_in: ci, c_out: self.widen, kernel: [3; 3], out: [s; 3] }));
        }
        out.push(("proj".into(), Layer::Linear { rows: 1, d_in: self.flat_dim(), d_out: self.feature_dim }));
        out.push(("head".into(), Layer::Linear { rows: 1, d_in: self.feature_dim, d_out: NUM_CLASSES }));
        out
    }
}

/// Tape handles of a batched forward pass.
#[derive(Clone, Copy, Debug)]
pub struct CnnVars {
    /// `[B, feature_dim]`, post-activation.
    pub features: Var,
    /// `[B, 22]`.
    pub logits: Var,
}

/// Records the network on `tape` for `patches` (each `[1, s, s, s]`) with
/// parameters `theta` in [`CnnConfig::param_specs`] order.
pub fn cnn_forward_tape<T: Real>(tape: &mut Tape<T>, cfg: &CnnConfig, theta: &[Var], patches: &[Var]) -> Result<CnnVars> {
    if theta.len() != 20 {
        return Err(Error::shape(format!("CNN expects 20 parameter tensors, got {}", theta.len())));
    }
    if patches.is_empty() {
        return Err(Error::invalid("CNN forward on an empty batch"));
    }
    let s = cfg.side;
    let mut flats = Vec::with_capacity(patches.len());
    for &p in patches {
        if tape.shape(p) != [1, s, s, s] {
            return Err(Error::shape(format!("patch {:?} does not match side {s}", tape.shape(p))));
        }
        let mut x = p;
        for b in 0..3 {
            for j in 0..2 {
                let w = 4 * b + 2 * j;
                x = tape.conv3d(x, theta[w], theta[w + 1], Padding::Same)?;
                x = tape.elu(x);
            }
            x = tape.maxpool3d(x)?;
        }
        for w in [12, 14] {
            x = tape.conv3d(x, theta[w], theta[w + 1], cfg.widen_padding)?;
            x = tape.elu(x);
        }
        flats.push(tape.reshape(x, &[1, cfg.flat_dim()])?);
    }
    let flat = if flats.len() == 1 { flats[0] } else { tape.stack_rows(&flats)? };
    let f = tape.linear(flat, theta[16], theta[17])?;
    let features = tape.elu(f);
    let logits = tape.linear(features, theta[18], theta[19])?;
    Ok(CnnVars { features, logits })
}

pub fn patch_input<T: Real>(p: &BranchPatch) -> Tensor<T> {
    let s = p.side;
    p.values.cast::<T>().reshape(&[1, s, s, s]).expect("patch holds side³ values")
}

#[derive(Clone, Debug, PartialEq)]
pub struct CnnModel {
    pub config: CnnConfig,
    pub params: ParamSet<f32>,
}

impl CnnModel {
    pub fn init(config: CnnConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = init_params(config.param_specs(), seed);
        Ok(CnnModel { config, params })
    }

    pub fn from_params(config: CnnConfig, params: ParamSet<f32>) -> Result<Self> {
        config.validate()?;
        let specs = config.param_specs();
        if params.specs() != specs.as_slice() {
            return Err(Error::shape("CNN parameters do not match the configuration"));
        }
        Ok(CnnModel { config, params })
    }

    /// Features `[B, feature_dim]` and class probabilities `[B, 22]`; the
    /// softmax is evaluated in `f64` from the `f32` logits.
    pub fn forward_batch(&self, patches: &[BranchPatch]) -> Result<(Tensor<f32>, Tensor<f64>)> {
        let mut feats = Vec::with_capacity(patches.len() * self.config.feature_dim);
        let mut logits = Vec::with_capacity(patches.len() * NUM_CLASSES);
        for chunk in patches.chunks(INFER_CHUNK) {
            let mut tape = Tape::<f32>::new();
            let theta = self.params.attach_frozen(&mut tape);
            let xs: Vec<Var> = chunk
                .iter()
                .map(|p| {
                    if p.side != self.config.side {
                        return Err(Error::shape(format!("patch side {} vs config side {}", p.side, self.config.side)));
                    }
                    Ok(tape.constant(patch_input(p)))
                })
                .collect::<Result<_>>()?;
            let out = cnn_forward_tape(&mut tape, &self.config, &theta, &xs)?;
            feats.extend_from_slice(tape.value(out.features).data());
            logits.extend(tape.value(out.logits).data().iter().map(|&v| v as f64));
        }
        let n = patches.len();
        let probs = Tensor::new(&[n, NUM_CLASSES], logits)?;
        Ok((Tensor::new(&[n, self.config.feature_dim], feats)?, softmax_rows(&probs)))
    }

    /// Feature vector `[feature_dim]` and class probabilities `[22]` of one patch.
    pub fn forward(&self, patch: &BranchPatch) -> Result<(Tensor<f32>, Tensor<f64>)> {
        let (f, p) = self.forward_batch(std::slice::from_ref(patch))?;
        Ok((f.reshape(&[self.config.feature_dim])?, p.reshape(&[NUM_CLASSES])?))
    }

    /// Patches of every branch in graph node order.
    pub fn tree_patches(&self, volume: &VoxelLabelMap, g: &TreeGraph) -> Result<Vec<BranchPatch>> {
        tree_patches(volume, g, self.config.side)
    }

    pub fn extract_features(&self, volume: &VoxelLabelMap, g: &TreeGraph) -> Result<TreeFeatures> {
        let patches = self.tree_patches(volume, g)?;
        self.features_from_patches(&patches)
    }

    pub fn features_from_patches(&self, patches: &[BranchPatch]) -> Result<TreeFeatures> {
        if patches.is_empty() {
            return Err(Error::invalid("feature extraction on an empty tree"));
        }
        let (features, probs) = self.forward_batch(patches)?;
        let probs = ClassProbMatrix::from_tensor(&probs)?;
        Ok(TreeFeatures { features, probs })
    }
}

/// Per-tree CNN outputs, rows in graph node order.
#[derive(Clone, Debug, PartialEq)]
pub struct TreeFeatures {
    pub features: Tensor<f32>,
    pub probs: ClassProbMatrix,
}

/// Row-wise stabilised softmax of a `[n, d]` tensor.
pub fn softmax_rows(x: &Tensor<f64>) -> Tensor<f64> {
    let d = x.cols();
    let mut out = Vec::with_capacity(x.len());
    for row in x.data().chunks(d.max(1)) {
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|v| (v - mx).exp()).collect();
        let s: f64 = e.iter().sum();
        out.extend(e.iter().map(|v| v / s));
    }
    Tensor::new(x.shape(), out).expect("same shape")
}

pub fn tree_patches(volume: &VoxelLabelMap, g: &TreeGraph, side: usize) -> Result<Vec<BranchPatch>> {
    if g.is_empty() {
        return Err(Error::invalid("tree has no branches"));
    }
    g.node_ids()
        .iter()
        .zip(g.centers())
        .map(|(&id, &c)| extract_patch_at(volume, id, c, side))
        .collect()
}
