//! Message passing on branch graphs.
//!
//! Every layer consumes an [`EdgeIndex`] with one self-loop per node. The
//! attention layer is single-head with ELU scores; GATS adds a linear skip
//! per layer; SPGNN runs a feature stream and a positional stream side by
//! side. GCN, GIN and SAGE layers exist for ablations.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::anatomy::NUM_CLASSES;
use crate::cnn::{softmax_rows, FEATURE_DIM};
use crate::error::{Error, Result};
use crate::graphcore::{EdgeIndex, NUM_ANCHORS};
use crate::labeling::{ClassProbMatrix, Layer};
use crate::tensor::{ParamSet, ParamSpec, Real, Tape, Tensor, Var};
use crate::train::init_params;

/// Width of a positional encoding row: one hop distance per anchor.
pub const PE_DIM: usize = NUM_ANCHORS;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    Gat,
    Gats,
    Gcn,
    Gin,
    Sage,
    Spgnn,
}

impl Arch {
    pub const ALL: [Arch; 6] = [Arch::Gat, Arch::Gats, Arch::Gcn, Arch::Gin, Arch::Sage, Arch::Spgnn];

    pub fn name(self) -> &'static str {
        match self {
            Arch::Gat => "gat",
            Arch::Gats => "gats",
            Arch::Gcn => "gcn",
            Arch::Gin => "gin",
            Arch::Sage => "sage",
            Arch::Spgnn => "spgnn",
        }
    }

    pub fn layer_kind(self) -> LayerKind {
        match self {
            Arch::Gat | Arch::Gats | Arch::Spgnn => LayerKind::Gat,
            Arch::Gcn => LayerKind::Gcn,
            Arch::Gin => LayerKind::Gin,
            Arch::Sage => LayerKind::Sage,
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Arch::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown architecture {s:?} (gat|gats|gcn|gin|sage|spgnn)")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Gat,
    Gcn,
    Gin,
    Sage,
}

/// How SPGNN treats the positional encodings.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PeMode {
    None,
    /// Positional stream updated by its own attention layers.
    Learnable,
    /// Raw encodings concatenated to the features at every layer.
    Frozen,
}

/// Output widths of a stack of `layers` message-passing layers.
pub fn depth_widths(layers: usize) -> Result<Vec<usize>> {
    match layers {
        2 => Ok(vec![256, FEATURE_DIM]),
        4 => Ok(vec![256, 128, 64, FEATURE_DIM]),
        7 => Ok(vec![256, 128, 64, 64, 64, 64, FEATURE_DIM]),
        n => Err(Error::invalid(format!("supported depths are 2, 4 and 7 layers, got {n}"))),
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GnnConfig {
    pub arch: Arch,
    pub input_dim: usize,
    /// Feature-stream output width per layer; the positional stream uses
    /// all but the last.
    pub widths: Vec<usize>,
    pub skip: bool,
    pub pe: PeMode,
}

impl GnnConfig {
    /// Defaults for `arch` at the given depth: skips for GATS and SPGNN,
    /// learnable encodings for SPGNN.
    pub fn new(arch: Arch, layers: usize) -> Result<Self> {
        let cfg = GnnConfig {
            arch,
            input_dim: FEATURE_DIM,
            widths: depth_widths(layers)?,
            skip: matches!(arch, Arch::Gats | Arch::Spgnn),
            pe: if arch == Arch::Spgnn { PeMode::Learnable } else { PeMode::None },
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::invalid("GNN widths must be positive and non-empty"));
        }
        match (self.arch, self.pe) {
            (Arch::Spgnn, PeMode::None) => Err(Error::invalid("spgnn needs positional encodings; use gats for the no-PE variant")),
            (a, PeMode::Learnable | PeMode::Frozen) if a != Arch::Spgnn => {
                Err(Error::invalid(format!("{a} does not take positional encodings")))
            }
            _ => Ok(()),
        }
    }

    pub fn layers(&self) -> usize {
        self.widths.len()
    }

    pub fn uses_pe(&self) -> bool {
        self.pe != PeMode::None
    }

    /// Positional-stream width entering layer `l` (0-based).
    fn pe_width(&self, l: usize) -> usize {
        match self.pe {
            PeMode::None => 0,
            PeMode::Frozen => PE_DIM,
            PeMode::Learnable if l == 0 => PE_DIM,
            PeMode::Learnable => self.widths[l - 1],
        }
    }

    /// Feature width entering layer `l`, positional columns included.
    fn layer_input(&self, l: usize) -> usize {
        let h = if l == 0 { self.input_dim } else { self.widths[l - 1] };
        h + self.pe_width(l)
    }

    fn stream_name(&self) -> &'static str {
        if self.arch == Arch::Spgnn {
            "hp"
        } else {
            "h"
        }
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut specs = Vec::new();
        let kind = self.arch.layer_kind();
        for l in 0..self.layers() {
            let (d_in, d_out) = (self.layer_input(l), self.widths[l]);
            layer_specs(&mut specs, &format!("layer{}.{}", l + 1, self.stream_name()), kind, d_in, d_out, self.skip);
            if self.pe == PeMode::Learnable && l + 1 < self.layers() {
                layer_specs(&mut specs, &format!("layer{}.p", l + 1), LayerKind::Gat, self.pe_width(l), self.widths[l], self.skip);
            }
        }
        let last = *self.widths.last().expect("validated");
        specs.push(ParamSpec::weight("head.weight", &[last, NUM_CLASSES], last));
        specs.push(ParamSpec::bias("head.bias", NUM_CLASSES));
        specs
    }

    pub fn param_count(&self) -> usize {
        self.param_specs().iter().map(ParamSpec::numel).sum()
    }

    /// Layer shapes for a graph of `n` nodes and `edges` directed edges
    /// (self-loops included).
    pub fn mac_layers(&self, n: usize, edges: usize) -> Vec<(String, Layer)> {
        let mut out = Vec::new();
        let mut push = |name: String, kind: LayerKind, d_in: usize, d_out: usize, skip: bool| {
            let lin = |d_in, d_out| Layer::Linear { rows: n, d_in, d_out };
            match kind {
                LayerKind::Gat => {
                    out.push((format!("{name}.w_a"), lin(d_in, d_out)));
                    out.push((format!("{name}.w_g"), lin(d_in, d_out)));
                    out.push((format!("{name}.attention"), Layer::Attention { edges, d_out }));
                }
                LayerKind::Gcn => {
                    out.push((format!("{name}.w"), lin(d_in, d_out)));
                    out.push((format!("{name}.aggregate"), Layer::Aggregate { edges, d: d_out }));
                }
                LayerKind::Gin => {
                    out.push((format!("{name}.aggregate"), Layer::Aggregate { edges, d: d_in }));
                    out.push((format!("{name}.w"), lin(d_in, d_out)));
                }
                LayerKind::Sage => {
                    out.push((format!("{name}.w_pool"), lin(d_in, d_in)));
                    out.push((format!("{name}.aggregate"), Layer::Aggregate { edges, d: d_in }));
                    out.push((format!("{name}.w"), lin(2 * d_in, d_out)));
                }
            }
            if skip {
                out.push((format!("{name}.skip"), lin(d_in, d_out)));
            }
        };
        for l in 0..self.layers() {
            let name = format!("layer{}.{}", l + 1, self.stream_name());
            push(name, self.arch.layer_kind(), self.layer_input(l), self.widths[l], self.skip);
            if self.pe == PeMode::Learnable && l + 1 < self.layers() {
                push(format!("layer{}.p", l + 1), LayerKind::Gat, self.pe_width(l), self.widths[l], self.skip);
            }
        }
        let last = *self.widths.last().expect("validated");
        out.push(("head".into(), Layer::Linear { rows: n, d_in: last, d_out: NUM_CLASSES }));
        out
    }
}

fn layer_specs(specs: &mut Vec<ParamSpec>, name: &str, kind: LayerKind, d_in: usize, d_out: usize, skip: bool) {
    match kind {
        LayerKind::Gat => {
            specs.push(ParamSpec::weight(format!("{name}.w_a"), &[d_in, d_out], d_in));
            specs.push(ParamSpec::weight(format!("{name}.w_g"), &[d_in, d_out], d_in));
            specs.push(ParamSpec::weight(format!("{name}.w_r"), &[2 * d_out, 1], 2 * d_out));
        }
        LayerKind::Gcn | LayerKind::Gin => {
            specs.push(ParamSpec::weight(format!("{name}.w"), &[d_in, d_out], d_in));
        }
        LayerKind::Sage => {
            specs.push(ParamSpec::weight(format!("{name}.w_pool"), &[d_in, d_in], d_in));
            specs.push(ParamSpec::weight(format!("{name}.w"), &[2 * d_in, d_out], 2 * d_in));
        }
    }
    if skip {
        specs.push(ParamSpec::weight(format!("{name}.skip"), &[d_in, d_out], d_in));
    }
}

fn require_self_loops(edges: &EdgeIndex) -> Result<()> {
    if edges.has_all_self_loops() {
        Ok(())
    } else {
        Err(Error::invalid("message passing needs a self-loop on every node"))
    }
}

fn require_rows<T: Real>(tape: &Tape<T>, h: Var, edges: &EdgeIndex) -> Result<usize> {
    match tape.shape(h) {
        [n, d] if *n == edges.n => Ok(*d),
        s => Err(Error::shape(format!("node features {s:?} for a graph of {} nodes", edges.n))),
    }
}

/// Attention layer. Returns the layer output `[N, d_out]` and the
/// attention coefficients `[E, 1]` in edge order.
pub fn gat_layer<T: Real>(tape: &mut Tape<T>, h: Var, edges: &EdgeIndex, w_a: Var, w_g: Var, w_r: Var) -> Result<(Var, Var)> {
    require_self_loops(edges)?;
    require_rows(tape, h, edges)?;
    let a = tape.matmul(h, w_a)?;
    let g = tape.matmul(h, w_g)?;
    let g_dst = tape.gather_rows(g, edges.dst.clone())?;
    let g_src = tape.gather_rows(g, edges.src.clone())?;
    let pair = tape.concat(g_dst, g_src)?;
    let score = tape.matmul(pair, w_r)?;
    let score = tape.elu(score);
    let alpha = tape.segment_softmax(score, edges.dst.clone(), edges.n)?;
    let msgs = tape.gather_rows(a, edges.src.clone())?;
    let msgs = tape.scale_rows(msgs, alpha)?;
    let agg = tape.segment_sum(msgs, edges.dst.clone(), edges.n)?;
    Ok((tape.elu(agg), alpha))
}

/// `elu(D^{-1/2} A D^{-1/2} h W)` with `A` including self-loops.
pub fn gcn_layer<T: Real>(tape: &mut Tape<T>, h: Var, edges: &EdgeIndex, w: Var) -> Result<Var> {
    require_self_loops(edges)?;
    require_rows(tape, h, edges)?;
    let deg = edges.degrees();
    let norm: Vec<T> = edges
        .src
        .iter()
        .zip(edges.dst.iter())
        .map(|(&s, &t)| T::from_f64(1.0 / ((deg[s] * deg[t]) as f64).sqrt()))
        .collect();
    let norm = tape.constant(Tensor::new(&[edges.len(), 1], norm)?);
    let hw = tape.matmul(h, w)?;
    let msgs = tape.gather_rows(hw, edges.src.clone())?;
    let msgs = tape.scale_rows(msgs, norm)?;
    let agg = tape.segment_sum(msgs, edges.dst.clone(), edges.n)?;
    Ok(tape.elu(agg))
}

/// `elu((h_b + mean_{j∈N(b)} h_j) W)`, i.e. ε = 0 with mean aggregation
/// over the neighbourhood including the self-loop.
pub fn gin_layer<T: Real>(tape: &mut Tape<T>, h: Var, edges: &EdgeIndex, w: Var) -> Result<Var> {
    require_self_loops(edges)?;
    require_rows(tape, h, edges)?;
    let inv: Vec<T> = edges.degrees().iter().map(|&d| T::from_f64(1.0 / d as f64)).collect();
    let inv = tape.constant(Tensor::new(&[edges.n, 1], inv)?);
    let msgs = tape.gather_rows(h, edges.src.clone())?;
    let sum = tape.segment_sum(msgs, edges.dst.clone(), edges.n)?;
    let mean = tape.scale_rows(sum, inv)?;
    let x = tape.add(h, mean)?;
    let y = tape.matmul(x, w)?;
    Ok(tape.elu(y))
}

/// `elu([h_b, max_{j∈N(b)} elu(h_j W_pool)] W)`.
pub fn sage_layer<T: Real>(tape: &mut Tape<T>, h: Var, edges: &EdgeIndex, w_pool: Var, w: Var) -> Result<Var> {
    require_self_loops(edges)?;
    require_rows(tape, h, edges)?;
    let pooled = tape.matmul(h, w_pool)?;
    let pooled = tape.elu(pooled);
    let msgs = tape.gather_rows(pooled, edges.src.clone())?;
    let mx = tape.segment_max(msgs, edges.dst.clone(), edges.n)?;
    let x = tape.concat(h, mx)?;
    let y = tape.matmul(x, w)?;
    Ok(tape.elu(y))
}

/// Hands out parameter handles in spec order.
struct Cursor<'a> {
    theta: &'a [Var],
    next: usize,
}

impl Cursor<'_> {
    fn take(&mut self) -> Result<Var> {
        let v = self.theta.get(self.next).copied().ok_or_else(|| Error::shape("too few GNN parameter tensors"))?;
        self.next += 1;
        Ok(v)
    }
}

/// One layer plus its optional skip, `elu(x W_skip + layer(x))`.
fn block<T: Real>(
    tape: &mut Tape<T>,
    kind: LayerKind,
    x: Var,
    edges: &EdgeIndex,
    skip: bool,
    cur: &mut Cursor<'_>,
    attention: &mut Vec<Var>,
) -> Result<Var> {
    let y = match kind {
        LayerKind::Gat => {
            let (w_a, w_g, w_r) = (cur.take()?, cur.take()?, cur.take()?);
            let (y, alpha) = gat_layer(tape, x, edges, w_a, w_g, w_r)?;
            attention.push(alpha);
            y
        }
        LayerKind::Gcn => {
            let w = cur.take()?;
            gcn_layer(tape, x, edges, w)?
        }
        LayerKind::Gin => {
            let w = cur.take()?;
            gin_layer(tape, x, edges, w)?
        }
        LayerKind::Sage => {
            let (w_pool, w) = (cur.take()?, cur.take()?);
            sage_layer(tape, x, edges, w_pool, w)?
        }
    };
    if !skip {
        return Ok(y);
    }
    let w_skip = cur.take()?;
    let s = tape.matmul(x, w_skip)?;
    let z = tape.add(s, y)?;
    Ok(tape.elu(z))
}

/// Tape handles of a forward pass.
#[derive(Clone, Debug)]
pub struct GnnVars {
    /// Final-layer node features `[N, widths.last]`.
    pub features: Var,
    /// `[N, 22]`.
    pub logits: Var,
    /// Attention coefficients `[E, 1]` of every attention layer, in order.
    pub attention: Vec<Var>,
}

/// Records the network on `tape`. `h0` is `[N, input_dim]`; `p0` is the
/// `[N, 39]` encoding matrix, required exactly when the config uses it.
pub fn gnn_forward_tape<T: Real>(
    tape: &mut Tape<T>,
    cfg: &GnnConfig,
    theta: &[Var],
    h0: Var,
    p0: Option<Var>,
    edges: &EdgeIndex,
) -> Result<GnnVars> {
    cfg.validate()?;
    require_self_loops(edges)?;
    let d = require_rows(tape, h0, edges)?;
    if d != cfg.input_dim {
        return Err(Error::shape(format!("node features have width {d}, network expects {}", cfg.input_dim)));
    }
    let p0 = match (cfg.uses_pe(), p0) {
        (true, Some(p)) => {
            if tape.shape(p) != [edges.n, PE_DIM] {
                return Err(Error::shape(format!("positional encodings {:?}, expected [{}, {PE_DIM}]", tape.shape(p), edges.n)));
            }
            Some(p)
        }
        (true, None) => return Err(Error::invalid(format!("{} needs positional encodings", cfg.arch))),
        (false, Some(_)) => return Err(Error::invalid(format!("{} does not take positional encodings", cfg.arch))),
        (false, None) => None,
    };
    let mut cur = Cursor { theta, next: 0 };
    let mut attention = Vec::new();
    let kind = cfg.arch.layer_kind();
    let (mut h, mut p) = (h0, p0);
    for l in 0..cfg.layers() {
        let x = match p {
            Some(p) => tape.concat(h, p)?,
            None => h,
        };
        let h_next = block(tape, kind, x, edges, cfg.skip, &mut cur, &mut attention)?;
        if cfg.pe == PeMode::Learnable {
            p = if l + 1 < cfg.layers() {
                Some(block(tape, LayerKind::Gat, p.expect("learnable stream"), edges, cfg.skip, &mut cur, &mut attention)?)
            } else {
                None
            };
        }
        h = h_next;
    }
    let (w, b) = (cur.take()?, cur.take()?);
    let logits = tape.linear(h, w, b)?;
    if cur.next != theta.len() {
        return Err(Error::shape(format!("{} GNN parameter tensors, network uses {}", theta.len(), cur.next)));
    }
    Ok(GnnVars { features: h, logits, attention })
}

/// Class probabilities of one tree; the softmax is evaluated in `f64`.
pub fn gnn_probs<T: Real>(
    cfg: &GnnConfig,
    params: &ParamSet<T>,
    h0: &Tensor<T>,
    p0: Option<&Tensor<T>>,
    edges: &EdgeIndex,
) -> Result<ClassProbMatrix> {
    let mut tape = Tape::new();
    let theta = params.attach_frozen(&mut tape);
    let h = tape.constant(h0.clone());
    let p = p0.map(|p| tape.constant(p.clone()));
    let out = gnn_forward_tape(&mut tape, cfg, &theta, h, p, edges)?;
    let logits = tape.value(out.logits).cast::<f64>();
    ClassProbMatrix::from_tensor(&softmax_rows(&logits))
}

/// GATS probabilities; `cfg.arch` must be `gats`.
pub fn gats_forward<T: Real>(cfg: &GnnConfig, params: &ParamSet<T>, h0: &Tensor<T>, edges: &EdgeIndex) -> Result<ClassProbMatrix> {
    if cfg.arch != Arch::Gats {
        return Err(Error::invalid(format!("gats_forward on a {} config", cfg.arch)));
    }
    gnn_probs(cfg, params, h0, None, edges)
}

/// SPGNN probabilities; `cfg.arch` must be `spgnn`.
pub fn spgnn_forward<T: Real>(
    cfg: &GnnConfig,
    params: &ParamSet<T>,
    h0: &Tensor<T>,
    p0: &Tensor<T>,
    edges: &EdgeIndex,
) -> Result<ClassProbMatrix> {
    if cfg.arch != Arch::Spgnn {
        return Err(Error::invalid(format!("spgnn_forward on a {} config", cfg.arch)));
    }
    if p0.cols() != PE_DIM || p0.ndim() != 2 {
        return Err(Error::shape(format!("positional encodings {:?}, expected width {PE_DIM}", p0.shape())));
    }
    gnn_probs(cfg, params, h0, Some(p0), edges)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GnnModel {
    pub config: GnnConfig,
    pub params: ParamSet<f32>,
}

impl GnnModel {
    pub fn init(config: GnnConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = init_params(config.param_specs(), seed);
        Ok(GnnModel { config, params })
    }

    pub fn from_params(config: GnnConfig, params: ParamSet<f32>) -> Result<Self> {
        config.validate()?;
        if params.specs() != config.param_specs().as_slice() {
            return Err(Error::shape("GNN parameters do not match the configuration"));
        }
        Ok(GnnModel { config, params })
    }

    pub fn predict(&self, features: &Tensor<f32>, pe: Option<&Tensor<f32>>, edges: &EdgeIndex) -> Result<ClassProbMatrix> {
        gnn_probs(&self.config, &self.params, features, pe, edges)
    }
}

#[cfg(test)]
mod tests;
