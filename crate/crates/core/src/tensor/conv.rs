//! 3×3×3 convolution and 2×2×2 max-pooling kernels on `[C, D, H, W]` volumes.
//!
//! Convolution is lowered to im2col + GEMM. The column buffer is rebuilt in
//! the backward pass instead of being kept alive on the tape.

use std::ops::Range;

use super::scalar::{gemm, Real};
use crate::error::{Error, Result};

pub const KERNEL: usize = 3;
const KVOL: usize = KERNEL * KERNEL * KERNEL;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    /// No padding: every spatial extent shrinks by 2.
    Valid,
    /// One voxel of zero padding on each side: spatial extents are kept.
    Same,
}

impl Padding {
    fn offset(self) -> usize {
        match self {
            Padding::Valid => 0,
            Padding::Same => 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub c_out: usize,
    pub input: [usize; 3],
    pub output: [usize; 3],
    pub padding: Padding,
}

impl ConvGeom {
    pub fn new(x_shape: &[usize], k_shape: &[usize], padding: Padding) -> Result<Self> {
        if x_shape.len() != 4 {
            return Err(Error::shape(format!("conv3d input must be [C,D,H,W], got {x_shape:?}")));
        }
        if k_shape.len() != 5 || k_shape[2..] != [KERNEL; 3] {
            return Err(Error::shape(format!(
                "conv3d kernel must be [C_out,C_in,3,3,3], got {k_shape:?}"
            )));
        }
        if k_shape[1] != x_shape[0] {
            return Err(Error::shape(format!(
                "kernel expects {} input channels, input has {}",
                k_shape[1], x_shape[0]
            )));
        }
        let input = [x_shape[1], x_shape[2], x_shape[3]];
        let output = match padding {
            Padding::Same => input,
            Padding::Valid => {
                if input.iter().any(|&d| d < KERNEL) {
                    return Err(Error::shape(format!(
                        "valid conv3d needs spatial dims >= 3, got {input:?}"
                    )));
                }
                [input[0] - 2, input[1] - 2, input[2] - 2]
            }
        };
        if input.iter().any(|&d| d == 0) {
            return Err(Error::shape("conv3d on empty spatial extent"));
        }
        Ok(ConvGeom {
            c_in: x_shape[0],
            c_out: k_shape[0],
            input,
            output,
            padding,
        })
    }

    pub fn out_volume(&self) -> usize {
        self.output.iter().product()
    }

    pub fn in_volume(&self) -> usize {
        self.input.iter().product()
    }

    pub fn col_rows(&self) -> usize {
        self.c_in * KVOL
    }
}

/// Range of output x whose tap `kx` lands inside the input, for the given offset.
#[inline]
fn valid_range(kx: usize, off: usize, n_in: usize, n_out: usize) -> (usize, usize) {
    // input index = o + kx - off must be in [0, n_in)
    let lo = off.saturating_sub(kx);
    let hi = (n_in + off).saturating_sub(kx).min(n_out);
    (lo, hi.max(lo))
}

/// Upper bound on im2col buffer elements; larger outputs are processed in
/// slabs of output z-planes.
const COL_BUDGET: usize = 1 << 23;

impl ConvGeom {
    fn plane(&self) -> usize {
        self.output[1] * self.output[2]
    }

    /// Output z-ranges covering the volume, each within [`COL_BUDGET`].
    fn slabs(&self) -> Vec<Range<usize>> {
        let per_plane = (self.col_rows() * self.plane()).max(1);
        let step = (COL_BUDGET / per_plane).clamp(1, self.output[0].max(1));
        (0..self.output[0]).step_by(step).map(|z| z..(z + step).min(self.output[0])).collect()
    }
}

/// Column matrix `[c_in·27, |zr|·H·W]` for the output planes `zr`.
pub(crate) fn im2col<T: Real>(x: &[T], g: &ConvGeom, zr: Range<usize>, col: &mut Vec<T>) {
    let [di, hi, wi] = g.input;
    let [dout, hout, wout] = g.output;
    let p = zr.len() * g.plane();
    let off = g.padding.offset();
    col.clear();
    col.resize(g.col_rows() * p, T::zero());
    for ci in 0..g.c_in {
        let xc = &x[ci * g.in_volume()..(ci + 1) * g.in_volume()];
        for kz in 0..KERNEL {
            let (z0, z1) = valid_range(kz, off, di, dout);
            for ky in 0..KERNEL {
                let (y0, y1) = valid_range(ky, off, hi, hout);
                for kx in 0..KERNEL {
                    let (x0, x1) = valid_range(kx, off, wi, wout);
                    let row = ci * KVOL + kz * 9 + ky * 3 + kx;
                    let dst = &mut col[row * p..(row + 1) * p];
                    for oz in z0.max(zr.start)..z1.min(zr.end) {
                        let iz = oz + kz - off;
                        for oy in y0..y1 {
                            let iy = oy + ky - off;
                            let src = (iz * hi + iy) * wi;
                            let d = ((oz - zr.start) * hout + oy) * wout;
                            let ix0 = x0 + kx - off;
                            dst[d + x0..d + x1].copy_from_slice(&xc[src + ix0..src + ix0 + (x1 - x0)]);
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-adds a slab column matrix back onto the input gradient.
pub(crate) fn col2im<T: Real>(col: &[T], g: &ConvGeom, zr: Range<usize>, dx: &mut [T]) {
    let [di, hi, wi] = g.input;
    let [dout, hout, wout] = g.output;
    let p = zr.len() * g.plane();
    let off = g.padding.offset();
    for ci in 0..g.c_in {
        let xc = &mut dx[ci * g.in_volume()..(ci + 1) * g.in_volume()];
        for kz in 0..KERNEL {
            let (z0, z1) = valid_range(kz, off, di, dout);
            for ky in 0..KERNEL {
                let (y0, y1) = valid_range(ky, off, hi, hout);
                for kx in 0..KERNEL {
                    let (x0, x1) = valid_range(kx, off, wi, wout);
                    let row = ci * KVOL + kz * 9 + ky * 3 + kx;
                    let src = &col[row * p..(row + 1) * p];
                    for oz in z0.max(zr.start)..z1.min(zr.end) {
                        let iz = oz + kz - off;
                        for oy in y0..y1 {
                            let iy = oy + ky - off;
                            let base = (iz * hi + iy) * wi + x0 + kx - off;
                            let s = ((oz - zr.start) * hout + oy) * wout;
                            for (d, &v) in xc[base..base + (x1 - x0)].iter_mut().zip(&src[s + x0..s + x1]) {
                                *d += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Copies the output planes `zr` of every channel into a dense `[C, |zr|·H·W]` block.
fn gather_planes<T: Real>(full: &[T], g: &ConvGeom, zr: &Range<usize>) -> Vec<T> {
    let (p, hw) = (g.out_volume(), g.plane());
    let mut out = Vec::with_capacity(g.c_out * zr.len() * hw);
    for co in 0..g.c_out {
        out.extend_from_slice(&full[co * p + zr.start * hw..co * p + zr.end * hw]);
    }
    out
}

fn conv3d_forward_gemm<T: Real>(x: &[T], k: &[T], bias: &[T], g: &ConvGeom) -> Vec<T> {
    let (p, hw) = (g.out_volume(), g.plane());
    let mut out = vec![T::zero(); g.c_out * p];
    for (co, row) in out.chunks_mut(p).enumerate() {
        row.iter_mut().for_each(|v| *v = bias[co]);
    }
    let slabs = g.slabs();
    let mut col = Vec::new();
    if slabs.len() == 1 {
        im2col(x, g, 0..g.output[0], &mut col);
        gemm(g.c_out, g.col_rows(), p, k, false, &col, false, &mut out, true);
        return out;
    }
    let mut tmp = Vec::new();
    for zr in slabs {
        let ps = zr.len() * hw;
        im2col(x, g, zr.clone(), &mut col);
        tmp.clear();
        tmp.resize(g.c_out * ps, T::zero());
        gemm(g.c_out, g.col_rows(), ps, k, false, &col, false, &mut tmp, false);
        for co in 0..g.c_out {
            let dst = &mut out[co * p + zr.start * hw..co * p + zr.end * hw];
            for (d, &v) in dst.iter_mut().zip(&tmp[co * ps..(co + 1) * ps]) {
                *d += v;
            }
        }
    }
    out
}

fn conv3d_backward_gemm<T: Real>(
    x: &[T],
    k: &[T],
    dout: &[T],
    g: &ConvGeom,
    need: [bool; 3],
) -> (Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>) {
    let p = g.out_volume();
    let kr = g.col_rows();
    let slabs = g.slabs();
    let whole = slabs.len() == 1;
    let mut dk = need[1].then(|| vec![T::zero(); g.c_out * kr]);
    let mut dx = need[0].then(|| vec![T::zero(); g.c_in * g.in_volume()]);
    let mut col = Vec::new();
    for zr in slabs {
        let ps = zr.len() * g.plane();
        let block;
        let d: &[T] = if whole {
            dout
        } else {
            block = gather_planes(dout, g, &zr);
            &block
        };
        if let Some(dk) = dk.as_mut() {
            im2col(x, g, zr.clone(), &mut col);
            gemm(g.c_out, ps, kr, d, false, &col, true, dk, true);
        }
        if let Some(dx) = dx.as_mut() {
            col.clear();
            col.resize(kr * ps, T::zero());
            gemm(kr, g.c_out, ps, k, true, d, false, &mut col, false);
            col2im(&col, g, zr, dx);
        }
    }
    let db = need[2].then(|| {
        dout.chunks(p)
            .map(|r| T::from_f64(r.iter().map(|v| v.as_f64()).sum()))
            .collect()
    });
    (dx, dk, db)
}

/// Channel products up to this size use the direct kernels; packing the
/// column matrix for such thin GEMMs costs more than the multiply.
const DIRECT_MAX_CHANNELS: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum ConvKernel {
    Direct,
    Gemm,
}

impl ConvGeom {
    fn kernel(&self) -> ConvKernel {
        if self.c_in * self.c_out <= DIRECT_MAX_CHANNELS {
            ConvKernel::Direct
        } else {
            ConvKernel::Gemm
        }
    }
}

pub(crate) fn conv3d_forward<T: Real>(x: &[T], k: &[T], bias: &[T], g: &ConvGeom) -> Vec<T> {
    conv3d_forward_with(x, k, bias, g, g.kernel())
}

/// Returns `(dx, dk, dbias)`; each is only computed when requested.
pub(crate) fn conv3d_backward<T: Real>(
    x: &[T],
    k: &[T],
    dout: &[T],
    g: &ConvGeom,
    need: [bool; 3],
) -> (Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>) {
    conv3d_backward_with(x, k, dout, g, need, g.kernel())
}

pub(crate) fn conv3d_forward_with<T: Real>(x: &[T], k: &[T], bias: &[T], g: &ConvGeom, kernel: ConvKernel) -> Vec<T> {
    match kernel {
        ConvKernel::Gemm => conv3d_forward_gemm(x, k, bias, g),
        ConvKernel::Direct => {
            let s = ShiftGrid::new(g);
            let xp = s.pad_input(x, g);
            let mut acc = vec![T::zero(); g.c_out * s.run];
            run_shift_forward(&xp, k, g, &s, &mut acc);
            let mut out = s.crop_output(&acc, g);
            for (co, plane) in out.chunks_mut(g.out_volume()).enumerate() {
                plane.iter_mut().for_each(|v| *v += bias[co]);
            }
            out
        }
    }
}

pub(crate) fn conv3d_backward_with<T: Real>(
    x: &[T],
    k: &[T],
    dout: &[T],
    g: &ConvGeom,
    need: [bool; 3],
    kernel: ConvKernel,
) -> (Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>) {
    if kernel == ConvKernel::Gemm {
        return conv3d_backward_gemm(x, k, dout, g, need);
    }
    let s = ShiftGrid::new(g);
    let dp = s.spread_output(dout, g);
    let dk = need[1].then(|| {
        let xp = s.pad_input(x, g);
        let mut acc = vec![0f64; g.c_out * g.c_in * KVOL];
        run_shift_kernel_grad(&xp, &dp, g, &s, &mut acc);
        acc.into_iter().map(T::from_f64).collect()
    });
    let dx = need[0].then(|| {
        let mut dxp = vec![T::zero(); g.c_in * s.volume];
        run_shift_input_grad(k, &dp, g, &s, &mut dxp);
        s.crop_input(&dxp, g)
    });
    let db = need[2].then(|| {
        dout.chunks(g.out_volume())
            .map(|r| T::from_f64(r.iter().map(|v| v.as_f64()).sum()))
            .collect()
    });
    (dx, dk, db)
}

/// Wraps a kernel so it runs in an AVX2-enabled copy when the CPU has it.
/// Only vector width changes; the arithmetic and its order do not.
macro_rules! wide_dispatch {
    ($name:ident => $body:ident($($arg:ident: $ty:ty),*)) => {
        fn $name<T: Real>($($arg: $ty),*) {
            #[cfg(target_arch = "x86_64")]
            {
                #[target_feature(enable = "avx2")]
                fn wide<T: Real>($($arg: $ty),*) {
                    $body($($arg),*)
                }
                if std::arch::is_x86_feature_detected!("avx2") {
                    // SAFETY: the feature was detected at runtime just above.
                    return unsafe { wide($($arg),*) };
                }
            }
            $body($($arg),*)
        }
    };
}

wide_dispatch!(run_shift_forward => shift_forward(xp: &[T], k: &[T], g: &ConvGeom, s: &ShiftGrid, acc: &mut [T]));
wide_dispatch!(run_shift_input_grad => shift_input_grad(k: &[T], dp: &[T], g: &ConvGeom, s: &ShiftGrid, dxp: &mut [T]));
wide_dispatch!(run_shift_kernel_grad => shift_kernel_grad(xp: &[T], dp: &[T], g: &ConvGeom, s: &ShiftGrid, acc: &mut [f64]));

/// Elements per chunk of the long shifted runs, sized to stay in L1.
const SHIFT_CHUNK: usize = 2048;

/// The padded input grid on which every tap is a constant index shift.
/// Outputs live on the same strides, so rows carry a few junk columns that
/// are dropped on crop and held at zero when gradients are spread in.
struct ShiftGrid {
    dims: [usize; 3],
    volume: usize,
    /// Length of the run from the first to the last valid output.
    run: usize,
    shifts: [usize; KVOL],
}

impl ShiftGrid {
    fn new(g: &ConvGeom) -> Self {
        let off = g.padding.offset();
        let dims = g.input.map(|d| d + 2 * off);
        let [_, ph, pw] = dims;
        let [d, h, w] = g.output;
        let run = ((d - 1) * ph + (h - 1)) * pw + w;
        let mut shifts = [0; KVOL];
        for (t, s) in shifts.iter_mut().enumerate() {
            *s = ((t / 9) * ph + (t / 3) % 3) * pw + t % 3;
        }
        ShiftGrid { dims, volume: dims.iter().product(), run, shifts }
    }

    fn pad_input<T: Real>(&self, x: &[T], g: &ConvGeom) -> Vec<T> {
        let off = g.padding.offset();
        if off == 0 {
            return x.to_vec();
        }
        let [di, hi, wi] = g.input;
        let [_, ph, pw] = self.dims;
        let mut xp = vec![T::zero(); g.c_in * self.volume];
        for c in 0..g.c_in {
            for z in 0..di {
                for y in 0..hi {
                    let src = ((c * di + z) * hi + y) * wi;
                    let dst = c * self.volume + ((z + off) * ph + y + off) * pw + off;
                    xp[dst..dst + wi].copy_from_slice(&x[src..src + wi]);
                }
            }
        }
        xp
    }

    fn crop_input<T: Real>(&self, xp: &[T], g: &ConvGeom) -> Vec<T> {
        let off = g.padding.offset();
        let [di, hi, wi] = g.input;
        let [_, ph, pw] = self.dims;
        let mut x = Vec::with_capacity(g.c_in * g.in_volume());
        for c in 0..g.c_in {
            for z in 0..di {
                for y in 0..hi {
                    let src = c * self.volume + ((z + off) * ph + y + off) * pw + off;
                    x.extend_from_slice(&xp[src..src + wi]);
                }
            }
        }
        x
    }

    /// Output-grid offsets of each valid output row, in output order.
    fn output_rows(&self, g: &ConvGeom) -> impl Iterator<Item = usize> + '_ {
        let [d, h, _] = g.output;
        let [_, ph, pw] = self.dims;
        (0..d).flat_map(move |z| (0..h).map(move |y| (z * ph + y) * pw))
    }

    fn crop_output<T: Real>(&self, acc: &[T], g: &ConvGeom) -> Vec<T> {
        let w = g.output[2];
        let mut out = Vec::with_capacity(g.c_out * g.out_volume());
        for c in 0..g.c_out {
            let a = &acc[c * self.run..(c + 1) * self.run];
            for r in self.output_rows(g) {
                out.extend_from_slice(&a[r..r + w]);
            }
        }
        out
    }

    fn spread_output<T: Real>(&self, dout: &[T], g: &ConvGeom) -> Vec<T> {
        let w = g.output[2];
        let mut dp = vec![T::zero(); g.c_out * self.run];
        let mut src = dout.chunks_exact(w);
        for c in 0..g.c_out {
            for r in self.output_rows(g) {
                let row = src.next().expect("dout covers the output");
                dp[c * self.run + r..c * self.run + r + w].copy_from_slice(row);
            }
        }
        dp
    }
}

#[inline(always)]
fn axpy<T: Real>(y: &mut [T], a: T, x: &[T]) {
    for (d, &v) in y.iter_mut().zip(x) {
        *d += a * v;
    }
}

/// Dot product with eight interleaved partial sums, widened to `f64` at the end.
#[inline(always)]
fn dot8<T: Real>(a: &[T], b: &[T]) -> f64 {
    let mut lanes = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (u, v) in ca.zip(cb) {
        for l in 0..8 {
            lanes[l] += u[l] * v[l];
        }
    }
    let mut s: f64 = lanes.iter().map(|v| v.as_f64()).sum();
    for (&u, &v) in ra.iter().zip(rb) {
        s += (u * v).as_f64();
    }
    s
}

#[inline(always)]
fn shift_forward<T: Real>(xp: &[T], k: &[T], g: &ConvGeom, s: &ShiftGrid, acc: &mut [T]) {
    for start in (0..s.run).step_by(SHIFT_CHUNK) {
        let len = SHIFT_CHUNK.min(s.run - start);
        for ci in 0..g.c_in {
            let xc = &xp[ci * s.volume..(ci + 1) * s.volume];
            for (tap, &sh) in s.shifts.iter().enumerate() {
                let src = &xc[start + sh..start + sh + len];
                for co in 0..g.c_out {
                    let w = k[(co * g.c_in + ci) * KVOL + tap];
                    axpy(&mut acc[co * s.run + start..co * s.run + start + len], w, src);
                }
            }
        }
    }
}

#[inline(always)]
fn shift_input_grad<T: Real>(k: &[T], dp: &[T], g: &ConvGeom, s: &ShiftGrid, dxp: &mut [T]) {
    for start in (0..s.run).step_by(SHIFT_CHUNK) {
        let len = SHIFT_CHUNK.min(s.run - start);
        for ci in 0..g.c_in {
            let dxc = &mut dxp[ci * s.volume..(ci + 1) * s.volume];
            for (tap, &sh) in s.shifts.iter().enumerate() {
                let dst = &mut dxc[start + sh..start + sh + len];
                for co in 0..g.c_out {
                    let w = k[(co * g.c_in + ci) * KVOL + tap];
                    axpy(dst, w, &dp[co * s.run + start..co * s.run + start + len]);
                }
            }
        }
    }
}

#[inline(always)]
fn shift_kernel_grad<T: Real>(xp: &[T], dp: &[T], g: &ConvGeom, s: &ShiftGrid, acc: &mut [f64]) {
    for start in (0..s.run).step_by(SHIFT_CHUNK) {
        let len = SHIFT_CHUNK.min(s.run - start);
        for ci in 0..g.c_in {
            let xc = &xp[ci * s.volume..(ci + 1) * s.volume];
            for (tap, &sh) in s.shifts.iter().enumerate() {
                let src = &xc[start + sh..start + sh + len];
                for co in 0..g.c_out {
                    acc[(co * g.c_in + ci) * KVOL + tap] += dot8(&dp[co * s.run + start..co * s.run + start + len], src);
                }
            }
        }
    }
}

/// 2×2×2 max-pool with stride 2. Returns output values and, per output
/// element, the flat input index of the selected (first maximal) element.
pub(crate) fn maxpool3d_forward<T: Real>(x: &[T], shape: &[usize]) -> Result<(Vec<usize>, Vec<T>, Vec<u32>)> {
    if shape.len() != 4 {
        return Err(Error::shape(format!("maxpool3d input must be [C,D,H,W], got {shape:?}")));
    }
    let (c, d, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    if d < 2 || h < 2 || w < 2 {
        return Err(Error::shape(format!("maxpool3d needs spatial dims >= 2, got {shape:?}")));
    }
    let (od, oh, ow) = (d / 2, h / 2, w / 2);
    let mut out = Vec::with_capacity(c * od * oh * ow);
    let mut arg = Vec::with_capacity(c * od * oh * ow);
    for ci in 0..c {
        let base = ci * d * h * w;
        for z in 0..od {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut best = usize::MAX;
                    let mut best_v = T::neg_infinity();
                    for dz in 0..2 {
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let idx = base + ((2 * z + dz) * h + 2 * y + dy) * w + 2 * xo + dx;
                                let v = x[idx];
                                if best == usize::MAX || v > best_v {
                                    best = idx;
                                    best_v = v;
                                }
                            }
                        }
                    }
                    out.push(best_v);
                    arg.push(best as u32);
                }
            }
        }
    }
    Ok((vec![c, od, oh, ow], out, arg))
}
