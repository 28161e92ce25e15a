use std::sync::Arc;

use super::conv::{self, ConvGeom, Padding};
use super::scalar::{gemm, Real};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Conv3d { x: Var, k: Var, b: Var, geom: ConvGeom },
    MaxPool { x: Var, argmax: Vec<u32> },
    MatMul { x: Var, w: Var },
    AddBias { x: Var, b: Var },
    Add { a: Var, b: Var },
    Scale { x: Var, c: T },
    Elu { x: Var },
    Softmax { x: Var },
    Concat { a: Var, b: Var },
    StackRows { parts: Vec<Var> },
    Reshape { x: Var },
    Sum { x: Var },
    Gather { x: Var, idx: Arc<[usize]> },
    ScaleRows { x: Var, w: Var },
    SegmentSum { x: Var, seg: Arc<[usize]> },
    SegmentMax { x: Var, argmax: Vec<usize> },
    SegmentSoftmax { x: Var, seg: Arc<[usize]>, nseg: usize },
    WeightedCe { logits: Var, probs: Vec<f64>, targets: Vec<usize>, weights: Vec<f64>, norm: f64 },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recording of primitive applications, replayed in reverse by [`Tape::backward`].
///
/// Nodes are appended in evaluation order, so the node list is already a
/// topological order and backward is a single reverse sweep.
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
    replay: Option<Replay>,
}

/// Winners of every max-pool and segment-max on a tape, in recording order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Routing {
    pools: Vec<Vec<u32>>,
    segments: Vec<Vec<usize>>,
}

struct Replay {
    routing: Routing,
    next_pool: usize,
    next_segment: usize,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients for every node that required one, indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn add_into<T: Real>(slot: &mut Option<Tensor<T>>, shape: &[usize], g: Vec<T>) {
    match slot {
        Some(t) => {
            for (a, b) in t.data_mut().iter_mut().zip(g) {
                *a += b;
            }
        }
        None => *slot = Some(Tensor::new(shape, g).expect("gradient shape")),
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), replay: None }
    }

    /// A tape whose max-pool and segment-max ops reuse the winners in
    /// `routing` instead of searching, so the recorded function is the
    /// smooth piece selected by that routing.
    pub fn with_routing(routing: Routing) -> Self {
        Tape { nodes: Vec::new(), replay: Some(Replay { routing, next_pool: 0, next_segment: 0 }) }
    }

    pub fn routing(&self) -> Routing {
        let mut r = Routing::default();
        for node in &self.nodes {
            match &node.op {
                Op::MaxPool { argmax, .. } => r.pools.push(argmax.clone()),
                Op::SegmentMax { argmax, .. } => r.segments.push(argmax.clone()),
                _ => {}
            }
        }
        r
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Hash of every discrete routing decision on the tape (max-pool and
    /// segment-max winners). Two evaluations with equal signatures lie on
    /// the same smooth piece of the function.
    pub fn discrete_signature(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::MaxPool { argmax, .. } => argmax.hash(&mut h),
                Op::SegmentMax { argmax, .. } => argmax.hash(&mut h),
                _ => {}
            }
        }
        h.finish()
    }

    /// Hash of which side of zero every ELU input lies on. ELU is smooth
    /// except for a jump in curvature at 0, which degrades finite differences
    /// taken across it.
    pub fn branch_signature(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for node in &self.nodes {
            if let Op::Elu { x } = node.op {
                for v in self.nodes[x.0].value.data() {
                    (*v > T::zero()).hash(&mut h);
                }
            }
        }
        h.finish()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable input.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn conv3d(&mut self, x: Var, k: Var, b: Var, padding: Padding) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(x), self.shape(k), padding)?;
        if self.shape(b) != [geom.c_out] {
            return Err(Error::shape(format!(
                "conv3d bias must be [{}], got {:?}",
                geom.c_out,
                self.shape(b)
            )));
        }
        let out = conv::conv3d_forward(
            self.value(x).data(),
            self.value(k).data(),
            self.value(b).data(),
            &geom,
        );
        let shape = [geom.c_out, geom.output[0], geom.output[1], geom.output[2]];
        let t = Tensor::new(&shape, out)?;
        Ok(self.push(t, Op::Conv3d { x, k, b, geom }, &[x, k, b]))
    }

    pub fn maxpool3d(&mut self, x: Var) -> Result<Var> {
        let (shape, mut out, mut argmax) = conv::maxpool3d_forward(self.value(x).data(), self.shape(x))?;
        if let Some(r) = self.replay.as_mut() {
            let fixed = r.routing.pools.get(r.next_pool).filter(|a| a.len() == argmax.len());
            let fixed = fixed.ok_or_else(|| Error::invalid("routing replay does not match max-pool"))?.clone();
            r.next_pool += 1;
            let src = self.nodes[x.0].value.data();
            out = fixed.iter().map(|&a| src[a as usize]).collect();
            argmax = fixed;
        }
        let t = Tensor::new(&shape, out)?;
        Ok(self.push(t, Op::MaxPool { x, argmax }, &[x]))
    }

    /// `x·w` for `x: [n, d_in]`, `w: [d_in, d_out]`.
    pub fn matmul(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
            return Err(Error::shape(format!("matmul {xs:?} x {ws:?}")));
        }
        let (n, k, m) = (xs[0], xs[1], ws[1]);
        let mut out = vec![T::zero(); n * m];
        gemm(n, k, m, self.value(x).data(), false, self.value(w).data(), false, &mut out, false);
        let t = Tensor::new(&[n, m], out)?;
        Ok(self.push(t, Op::MatMul { x, w }, &[x, w]))
    }

    /// Adds a `[d]` bias to every row of a `[n, d]` tensor.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xs, bs) = (self.shape(x), self.shape(b));
        if xs.len() != 2 || bs != [xs[1]] {
            return Err(Error::shape(format!("add_bias {xs:?} + {bs:?}")));
        }
        let d = xs[1];
        let bias = self.value(b).data().to_vec();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(d.max(1)) {
            for (v, &bv) in row.iter_mut().zip(&bias) {
                *v += bv;
            }
        }
        let t = Tensor::new(&xs.to_vec(), out)?;
        Ok(self.push(t, Op::AddBias { x, b }, &[x, b]))
    }

    /// `x·w + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!("add {:?} + {:?}", self.shape(a), self.shape(b))));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&p, &q)| p + q)
            .collect();
        let t = Tensor::new(self.shape(a), data)?;
        Ok(self.push(t, Op::Add { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let c = T::from_f64(c);
        let src = self.value(x);
        let t = Tensor::new(src.shape(), src.data().iter().map(|&v| v * c).collect()).unwrap();
        self.push(t, Op::Scale { x, c }, &[x])
    }

    pub fn elu(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let data = src.data().iter().map(|&v| elu(v)).collect();
        let t = Tensor::new(src.shape(), data).unwrap();
        self.push(t, Op::Elu { x }, &[x])
    }

    /// Softmax over the last axis (rows of a 2-D tensor, or a whole 1-D tensor).
    pub fn softmax(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let d = *src.shape().last().unwrap_or(&1);
        let mut data = Vec::with_capacity(src.len());
        for row in src.data().chunks(d.max(1)) {
            data.extend(softmax_row(row));
        }
        let t = Tensor::new(src.shape(), data).unwrap();
        self.push(t, Op::Softmax { x }, &[x])
    }

    /// Column concatenation of `[n, d1]` and `[n, d2]`.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(Error::shape(format!("concat {sa:?} with {sb:?}")));
        }
        let (n, d1, d2) = (sa[0], sa[1], sb[1]);
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(n * (d1 + d2));
        for i in 0..n {
            data.extend_from_slice(&va[i * d1..(i + 1) * d1]);
            data.extend_from_slice(&vb[i * d2..(i + 1) * d2]);
        }
        let t = Tensor::new(&[n, d1 + d2], data)?;
        Ok(self.push(t, Op::Concat { a, b }, &[a, b]))
    }

    /// Row concatenation of `[r_i, d]` tensors into `[Σ r_i, d]`.
    pub fn stack_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::shape("stack_rows of nothing"));
        };
        let d = match self.shape(first) {
            [_, d] => *d,
            s => return Err(Error::shape(format!("stack_rows needs 2-D parts, got {s:?}"))),
        };
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            match self.shape(p) {
                [r, dp] if *dp == d => rows += r,
                s => return Err(Error::shape(format!("stack_rows part {s:?} vs width {d}"))),
            }
            data.extend_from_slice(self.value(p).data());
        }
        let t = Tensor::new(&[rows, d], data)?;
        Ok(self.push(t, Op::StackRows { parts: parts.to_vec() }, parts))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape { x }, &[x]))
    }

    /// Sum of all elements (f64 accumulation) as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum_f64();
        self.push(Tensor::scalar(T::from_f64(s)), Op::Sum { x }, &[x])
    }

    /// Rows `idx[e]` of a `[n, d]` tensor, stacked into `[e, d]`.
    pub fn gather_rows(&mut self, x: Var, idx: Arc<[usize]>) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::shape(format!("gather_rows needs 2-D input, got {s:?}")));
        }
        let (n, d) = (s[0], s[1]);
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::shape(format!("gather index {bad} out of range {n}")));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx.iter() {
            data.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let t = Tensor::new(&[idx.len(), d], data)?;
        Ok(self.push(t, Op::Gather { x, idx }, &[x]))
    }

    /// Multiplies row `e` of `x: [E, d]` by the scalar `w[e]` (`w: [E, 1]`).
    pub fn scale_rows(&mut self, x: Var, w: Var) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 2 || sw != [sx[0], 1] {
            return Err(Error::shape(format!("scale_rows {sx:?} by {sw:?}")));
        }
        let d = sx[1];
        let wv = self.value(w).data();
        let mut data = self.value(x).data().to_vec();
        if d > 0 {
            for (row, &c) in data.chunks_mut(d).zip(wv) {
                row.iter_mut().for_each(|v| *v *= c);
            }
        }
        let t = Tensor::new(&sx.to_vec(), data)?;
        Ok(self.push(t, Op::ScaleRows { x, w }, &[x, w]))
    }

    /// Sums rows of `x: [E, d]` into `nseg` buckets given by `seg[e]`.
    pub fn segment_sum(&mut self, x: Var, seg: Arc<[usize]>, nseg: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        check_segments(&s, &seg, nseg)?;
        let d = s[1];
        let src = self.value(x).data();
        let mut acc = vec![0f64; nseg * d];
        for (e, &sg) in seg.iter().enumerate() {
            for (a, &v) in acc[sg * d..(sg + 1) * d].iter_mut().zip(&src[e * d..(e + 1) * d]) {
                *a += v.as_f64();
            }
        }
        let t = Tensor::new(&[nseg, d], acc.into_iter().map(T::from_f64).collect())?;
        Ok(self.push(t, Op::SegmentSum { x, seg }, &[x]))
    }

    /// Column-wise max of rows of `x: [E, d]` within each segment; empty
    /// segments yield 0. Ties go to the first row in edge order.
    pub fn segment_max(&mut self, x: Var, seg: Arc<[usize]>, nseg: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        check_segments(&s, &seg, nseg)?;
        let d = s[1];
        let src = self.value(x).data();
        let mut out = vec![T::zero(); nseg * d];
        let mut argmax = vec![usize::MAX; nseg * d];
        for (e, &sg) in seg.iter().enumerate() {
            for c in 0..d {
                let slot = sg * d + c;
                let v = src[e * d + c];
                if argmax[slot] == usize::MAX || v > out[slot] {
                    out[slot] = v;
                    argmax[slot] = e * d + c;
                }
            }
        }
        if let Some(r) = self.replay.as_mut() {
            let fixed = r.routing.segments.get(r.next_segment).filter(|a| a.len() == argmax.len());
            argmax = fixed.ok_or_else(|| Error::invalid("routing replay does not match segment max"))?.clone();
            r.next_segment += 1;
            let src = self.nodes[x.0].value.data();
            out = argmax.iter().map(|&a| if a == usize::MAX { T::zero() } else { src[a] }).collect();
        }
        let t = Tensor::new(&[nseg, d], out)?;
        Ok(self.push(t, Op::SegmentMax { x, argmax }, &[x]))
    }

    /// Softmax of the scores `x: [E, 1]` within each segment.
    pub fn segment_softmax(&mut self, x: Var, seg: Arc<[usize]>, nseg: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || s[1] != 1 {
            return Err(Error::shape(format!("segment_softmax needs [E,1], got {s:?}")));
        }
        check_segments(&s, &seg, nseg)?;
        let src = self.value(x).data();
        let mut mx = vec![f64::NEG_INFINITY; nseg];
        for (e, &sg) in seg.iter().enumerate() {
            mx[sg] = mx[sg].max(src[e].as_f64());
        }
        let mut denom = vec![0f64; nseg];
        let ex: Vec<f64> = seg
            .iter()
            .enumerate()
            .map(|(e, &sg)| {
                let v = (src[e].as_f64() - mx[sg]).exp();
                denom[sg] += v;
                v
            })
            .collect();
        let data = ex
            .iter()
            .zip(seg.iter())
            .map(|(&v, &sg)| T::from_f64(v / denom[sg]))
            .collect();
        let t = Tensor::new(&s, data)?;
        Ok(self.push(t, Op::SegmentSoftmax { x, seg, nseg }, &[x]))
    }

    /// Weighted cross-entropy on logits, normalised by the summed target
    /// weights. The log-probability is clamped at `ln(1e-12)` in the value;
    /// the gradient is the fused log-softmax gradient.
    pub fn weighted_cross_entropy(&mut self, logits: Var, targets: &[usize], class_weights: &[f64]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != targets.len() {
            return Err(Error::shape(format!(
                "cross entropy logits {s:?} vs {} targets",
                targets.len()
            )));
        }
        let c = s[1];
        if class_weights.len() != c {
            return Err(Error::shape(format!("{} class weights for {c} classes", class_weights.len())));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::invalid(format!("target class {t} out of range {c}")));
        }
        let src = self.value(logits).data();
        let mut probs = Vec::with_capacity(src.len());
        let mut total = 0f64;
        let mut norm = 0f64;
        for (i, &t) in targets.iter().enumerate() {
            let row = &src[i * c..(i + 1) * c];
            let mx = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v.as_f64() - mx).exp()).sum::<f64>().ln();
            probs.extend(row.iter().map(|v| (v.as_f64() - lse).exp()));
            let logp = (row[t].as_f64() - lse).max(LOG_CLAMP);
            total -= class_weights[t] * logp;
            norm += class_weights[t];
        }
        let norm = if norm > 0.0 { norm } else { 1.0 };
        let t = Tensor::scalar(T::from_f64(total / norm));
        Ok(self.push(
            t,
            Op::WeightedCe {
                logits,
                probs,
                targets: targets.to_vec(),
                weights: class_weights.to_vec(),
                norm,
            },
            &[logits],
        ))
    }

    /// Reverse-mode sweep from a scalar `loss`.
    ///
    /// Every trainable leaf receives a gradient (zeros when it does not
    /// influence the loss).
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let node = &self.nodes[loss.0];
        if node.value.len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                node.value.shape()
            )));
        }
        if !node.requires_grad {
            return Err(Error::invalid("loss does not depend on any trainable input"));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(node.value.shape(), vec![T::one()])?);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gout) = grads[i].take() else { continue };
            self.backprop_node(node, &gout, &mut grads);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad && grads[i].is_none() {
                grads[i] = Some(Tensor::zeros(node.value.shape()));
            }
            if !matches!(node.op, Op::Leaf) {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, node: &Node<T>, gout: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let g = gout.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv3d { x, k, b, geom } => {
                let need = [self.wants(*x), self.wants(*k), self.wants(*b)];
                let (dx, dk, db) =
                    conv::conv3d_backward(self.value(*x).data(), self.value(*k).data(), g, geom, need);
                for (v, d) in [(*x, dx), (*k, dk), (*b, db)] {
                    if let Some(d) = d {
                        add_into(&mut grads[v.0], self.shape(v), d);
                    }
                }
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = vec![T::zero(); self.value(*x).len()];
                for (&a, &gv) in argmax.iter().zip(g) {
                    dx[a as usize] += gv;
                }
                add_into(&mut grads[x.0], self.shape(*x), dx);
            }
            Op::MatMul { x, w } => {
                let (n, k) = (self.shape(*x)[0], self.shape(*x)[1]);
                let m = self.shape(*w)[1];
                if self.wants(*x) {
                    let mut dx = vec![T::zero(); n * k];
                    gemm(n, m, k, g, false, self.value(*w).data(), true, &mut dx, false);
                    add_into(&mut grads[x.0], self.shape(*x), dx);
                }
                if self.wants(*w) {
                    let mut dw = vec![T::zero(); k * m];
                    gemm(k, n, m, self.value(*x).data(), true, g, false, &mut dw, false);
                    add_into(&mut grads[w.0], self.shape(*w), dw);
                }
            }
            Op::AddBias { x, b } => {
                if self.wants(*x) {
                    add_into(&mut grads[x.0], self.shape(*x), g.to_vec());
                }
                if self.wants(*b) {
                    let d = self.shape(*b)[0];
                    let mut acc = vec![0f64; d];
                    if d > 0 {
                        for row in g.chunks(d) {
                            for (a, &v) in acc.iter_mut().zip(row) {
                                *a += v.as_f64();
                            }
                        }
                    }
                    add_into(&mut grads[b.0], &[d], acc.into_iter().map(T::from_f64).collect());
                }
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    if self.wants(v) {
                        add_into(&mut grads[v.0], self.shape(v), g.to_vec());
                    }
                }
            }
            Op::Scale { x, c } => {
                add_into(&mut grads[x.0], self.shape(*x), g.iter().map(|&v| v * *c).collect());
            }
            Op::Elu { x } => {
                let dx = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&xv, &gv)| if xv > T::zero() { gv } else { gv * xv.exp() })
                    .collect();
                add_into(&mut grads[x.0], self.shape(*x), dx);
            }
            Op::Softmax { x } => {
                let y = node.value.data();
                let d = (*node.value.shape().last().unwrap_or(&1)).max(1);
                let mut dx = Vec::with_capacity(y.len());
                for (yr, gr) in y.chunks(d).zip(g.chunks(d)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a.as_f64() * b.as_f64()).sum();
                    dx.extend(
                        yr.iter()
                            .zip(gr)
                            .map(|(&yv, &gv)| T::from_f64(yv.as_f64() * (gv.as_f64() - dot))),
                    );
                }
                add_into(&mut grads[x.0], self.shape(*x), dx);
            }
            Op::Concat { a, b } => {
                let (n, d1) = (self.shape(*a)[0], self.shape(*a)[1]);
                let d2 = self.shape(*b)[1];
                let d = d1 + d2;
                if self.wants(*a) {
                    let mut da = Vec::with_capacity(n * d1);
                    for i in 0..n {
                        da.extend_from_slice(&g[i * d..i * d + d1]);
                    }
                    add_into(&mut grads[a.0], self.shape(*a), da);
                }
                if self.wants(*b) {
                    let mut db = Vec::with_capacity(n * d2);
                    for i in 0..n {
                        db.extend_from_slice(&g[i * d + d1..(i + 1) * d]);
                    }
                    add_into(&mut grads[b.0], self.shape(*b), db);
                }
            }
            Op::StackRows { parts } => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if self.wants(p) {
                        add_into(&mut grads[p.0], self.shape(p), g[off..off + len].to_vec());
                    }
                    off += len;
                }
            }
            Op::Reshape { x } => {
                add_into(&mut grads[x.0], self.shape(*x), g.to_vec());
            }
            Op::Sum { x } => {
                add_into(&mut grads[x.0], self.shape(*x), vec![g[0]; self.value(*x).len()]);
            }
            Op::Gather { x, idx } => {
                let (n, d) = (self.shape(*x)[0], self.shape(*x)[1]);
                let mut acc = vec![0f64; n * d];
                for (e, &i) in idx.iter().enumerate() {
                    for (a, &v) in acc[i * d..(i + 1) * d].iter_mut().zip(&g[e * d..(e + 1) * d]) {
                        *a += v.as_f64();
                    }
                }
                add_into(&mut grads[x.0], &[n, d], acc.into_iter().map(T::from_f64).collect());
            }
            Op::ScaleRows { x, w } => {
                let d = self.shape(*x)[1];
                let (xv, wv) = (self.value(*x).data(), self.value(*w).data());
                if self.wants(*x) {
                    let mut dx = g.to_vec();
                    if d > 0 {
                        for (row, &c) in dx.chunks_mut(d).zip(wv) {
                            row.iter_mut().for_each(|v| *v *= c);
                        }
                    }
                    add_into(&mut grads[x.0], self.shape(*x), dx);
                }
                if self.wants(*w) {
                    let e = self.shape(*w)[0];
                    let dw = (0..e)
                        .map(|r| {
                            let s: f64 = xv[r * d..(r + 1) * d]
                                .iter()
                                .zip(&g[r * d..(r + 1) * d])
                                .map(|(a, b)| a.as_f64() * b.as_f64())
                                .sum();
                            T::from_f64(s)
                        })
                        .collect();
                    add_into(&mut grads[w.0], self.shape(*w), dw);
                }
            }
            Op::SegmentSum { x, seg } => {
                let d = self.shape(*x)[1];
                let mut dx = Vec::with_capacity(seg.len() * d);
                for &sg in seg.iter() {
                    dx.extend_from_slice(&g[sg * d..(sg + 1) * d]);
                }
                add_into(&mut grads[x.0], self.shape(*x), dx);
            }
            Op::SegmentMax { x, argmax } => {
                let mut dx = vec![T::zero(); self.value(*x).len()];
                for (&a, &gv) in argmax.iter().zip(g) {
                    if a != usize::MAX {
                        dx[a] += gv;
                    }
                }
                add_into(&mut grads[x.0], self.shape(*x), dx);
            }
            Op::SegmentSoftmax { x, seg, nseg } => {
                let y = node.value.data();
                let mut dot = vec![0f64; *nseg];
                for (e, &sg) in seg.iter().enumerate() {
                    dot[sg] += y[e].as_f64() * g[e].as_f64();
                }
                let dx = seg
                    .iter()
                    .enumerate()
                    .map(|(e, &sg)| T::from_f64(y[e].as_f64() * (g[e].as_f64() - dot[sg])))
                    .collect();
                add_into(&mut grads[x.0], self.shape(*x), dx);
            }
            Op::WeightedCe {
                logits,
                probs,
                targets,
                weights,
                norm,
            } => {
                let c = self.shape(*logits)[1];
                let scale = g[0].as_f64() / norm;
                let mut dx = Vec::with_capacity(probs.len());
                for (i, &t) in targets.iter().enumerate() {
                    let w = weights[t] * scale;
                    for j in 0..c {
                        let onehot = if j == t { 1.0 } else { 0.0 };
                        dx.push(T::from_f64(w * (probs[i * c + j] - onehot)));
                    }
                }
                add_into(&mut grads[logits.0], self.shape(*logits), dx);
            }
        }
    }
}

pub(crate) const LOG_CLAMP: f64 = -27.631_021_115_928_547; // ln(1e-12)

fn check_segments(shape: &[usize], seg: &[usize], nseg: usize) -> Result<()> {
    if shape.len() != 2 || shape[0] != seg.len() {
        return Err(Error::shape(format!(
            "segment op on {shape:?} with {} segment ids",
            seg.len()
        )));
    }
    if let Some(&bad) = seg.iter().find(|&&s| s >= nseg) {
        return Err(Error::shape(format!("segment id {bad} out of range {nseg}")));
    }
    Ok(())
}

#[inline]
pub(crate) fn elu<T: Real>(v: T) -> T {
    if v > T::zero() {
        v
    } else {
        v.exp_m1()
    }
}

pub(crate) fn softmax_row<T: Real>(row: &[T]) -> impl Iterator<Item = T> + '_ {
    let mx = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    let denom: f64 = row.iter().map(|v| (v.as_f64() - mx).exp()).sum();
    row.iter().map(move |v| T::from_f64((v.as_f64() - mx).exp() / denom))
}
