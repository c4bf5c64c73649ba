//! Volumetric primitives and their vector-Jacobian products.
//!
//! Every function here is pure. The `*_backward` helpers are consumed by the
//! tape; the forward functions are also the public eager API.
//!
//! Convolution weights are laid out `(C_out, C_in, kd, kh, kw)` with every
//! kernel extent in `{1, 3}`; padding is `k / 2` zeros per axis so that the
//! output extent along each axis is `ceil(n / stride)`.

use crate::error::{shape_err, AmaaError, Result};
use crate::tensor::{Tensor, VoxelVolume};

// ── convolution ─────────────────────────────────────────────────────────

/// Validated geometry of one convolution call.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub c_out: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: usize,
    pub output: [usize; 3],
}

impl ConvGeom {
    pub fn new(input_dims: [usize; 4], weight_shape: &[usize], stride: usize) -> Result<Self> {
        let &[c_out, c_in, kd, kh, kw] = weight_shape else {
            return shape_err(format!(
                "conv weight must be (C_out, C_in, kd, kh, kw), got {weight_shape:?}"
            ));
        };
        for k in [kd, kh, kw] {
            if k != 1 && k != 3 {
                return Err(AmaaError::UnsupportedKernel(k));
            }
        }
        if stride != 1 && stride != 2 {
            return Err(AmaaError::Contract(format!("stride must be 1 or 2, got {stride}")));
        }
        let [c, d, h, w] = input_dims;
        if c != c_in {
            return shape_err(format!("conv expects {c_in} input channels, got {c}"));
        }
        let input = [d, h, w];
        let output = input.map(|n| n.div_ceil(stride));
        Ok(Self {
            c_in,
            c_out,
            input,
            kernel: [kd, kh, kw],
            stride,
            output,
        })
    }

    fn in_voxels(&self) -> usize {
        self.input.iter().product()
    }

    fn out_voxels(&self) -> usize {
        self.output.iter().product()
    }

    fn taps(&self) -> usize {
        self.kernel.iter().product()
    }

    /// Output index range along one axis whose input position `o*s + t - pad`
    /// lies inside `[0, n)`.
    fn valid_range(&self, axis: usize, tap: usize) -> (usize, usize) {
        let pad = self.kernel[axis] / 2;
        let n = self.input[axis] as isize;
        let s = self.stride as isize;
        let off = tap as isize - pad as isize;
        // o*s + off >= 0  and  o*s + off <= n - 1
        let lo = if off >= 0 { 0 } else { (-off + s - 1) / s };
        let hi = (n - 1 - off).div_euclid(s) + 1;
        let hi = hi.clamp(0, self.output[axis] as isize);
        (lo as usize, hi.max(lo) as usize)
    }

    /// Visits every output row segment touched by one kernel tap as
    /// `(output start, input start, length)`; consecutive outputs read
    /// inputs `stride` apart.
    #[inline]
    fn for_each_row(&self, tap: [usize; 3], mut f: impl FnMut(usize, usize, usize)) {
        let [_, ih, iw] = self.input;
        let [_, oh, ow] = self.output;
        let s = self.stride;
        let pads = self.kernel.map(|k| k / 2);
        let (d0, d1) = self.valid_range(0, tap[0]);
        let (h0, h1) = self.valid_range(1, tap[1]);
        let (w0, w1) = self.valid_range(2, tap[2]);
        if w1 <= w0 {
            return;
        }
        for od in d0..d1 {
            let id = od * s + tap[0] - pads[0];
            for oh_i in h0..h1 {
                let ih_i = oh_i * s + tap[1] - pads[1];
                let orow = (od * oh + oh_i) * ow;
                let irow = (id * ih + ih_i) * iw;
                f(orow + w0, irow + w0 * s + tap[2] - pads[2], w1 - w0);
            }
        }
    }

    fn tap_index(&self, t: usize) -> [usize; 3] {
        let [_, kh, kw] = self.kernel;
        [t / (kh * kw), (t / kw) % kh, t % kw]
    }
}

/// Strided matrix view into a flat buffer.
#[derive(Clone, Copy)]
struct View {
    off: usize,
    rs: usize,
    cs: usize,
}

impl View {
    fn new(off: usize, rs: usize, cs: usize) -> Self {
        Self { off, rs, cs }
    }

    fn check(&self, len: usize, rows: usize, cols: usize) {
        if rows > 0 && cols > 0 {
            assert!(self.off + (rows - 1) * self.rs + (cols - 1) * self.cs < len);
        }
    }
}

/// `C = A·B + beta·C` with `A` m × k, `B` k × n, `C` m × n.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], av: View, b: &[f64], bv: View, beta: f64, c: &mut [f64], cv: View) {
    if m == 0 || n == 0 {
        return;
    }
    av.check(a.len(), m, k);
    bv.check(b.len(), k, n);
    cv.check(c.len(), m, n);
    // SAFETY: the checks above keep every element of the three views in bounds.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr().add(av.off),
            av.rs as isize,
            av.cs as isize,
            b.as_ptr().add(bv.off),
            bv.rs as isize,
            bv.cs as isize,
            beta,
            c.as_mut_ptr().add(cv.off),
            cv.rs as isize,
            cv.cs as isize,
        );
    }
}

/// Zero-padded layout for stride-1 convolutions. Output voxel `(d, h, w)`
/// maps to padded position `q = (d·Hp + h)·Wp + w`, and kernel tap
/// `(a, b, c)` reads the padded input at `q + (a·Hp + b)·Wp + c`, so every
/// tap is one matrix product over a shifted view.
struct Padded {
    dims: [usize; 3],
    /// Positions `0..span` cover every output voxel (plus border junk).
    span: usize,
}

impl Padded {
    fn new(g: &ConvGeom) -> Self {
        let pads = g.kernel.map(|k| k / 2);
        let dims = [0, 1, 2].map(|i| g.input[i] + 2 * pads[i]);
        let [d, h, w] = g.input;
        let span = ((d - 1) * dims[1] + (h - 1)) * dims[2] + w;
        Self { dims, span }
    }

    fn voxels(&self) -> usize {
        self.dims.iter().product()
    }

    fn q(&self, d: usize, h: usize, w: usize) -> usize {
        (d * self.dims[1] + h) * self.dims[2] + w
    }

    fn tap_offset(&self, tap: [usize; 3]) -> usize {
        self.q(tap[0], tap[1], tap[2])
    }

    fn pad(&self, g: &ConvGeom, x: &[f64]) -> Vec<f64> {
        let np = self.voxels();
        let pads = g.kernel.map(|k| k / 2);
        let [d, h, w] = g.input;
        let mut out = vec![0.0; g.c_in * np];
        for c in 0..g.c_in {
            for a in 0..d {
                for b in 0..h {
                    let src = ((c * d + a) * h + b) * w;
                    let dst = c * np + self.q(a + pads[0], b + pads[1], pads[2]);
                    out[dst..dst + w].copy_from_slice(&x[src..src + w]);
                }
            }
        }
        out
    }

    fn unpad_add(&self, g: &ConvGeom, xp: &[f64]) -> Vec<f64> {
        let np = self.voxels();
        let pads = g.kernel.map(|k| k / 2);
        let [d, h, w] = g.input;
        let mut out = vec![0.0; g.c_in * d * h * w];
        for c in 0..g.c_in {
            for a in 0..d {
                for b in 0..h {
                    let dst = ((c * d + a) * h + b) * w;
                    let src = c * np + self.q(a + pads[0], b + pads[1], pads[2]);
                    out[dst..dst + w].copy_from_slice(&xp[src..src + w]);
                }
            }
        }
        out
    }

    /// Output rows `(channel, d, h)` as `(span position, flat output index)`.
    fn rows(&self, g: &ConvGeom, channels: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        let [d, h, w] = g.input;
        (0..channels).flat_map(move |c| {
            (0..d).flat_map(move |a| (0..h).map(move |b| (c * self.span + self.q(a, b, 0), ((c * d + a) * h + b) * w)))
        })
    }
}

fn conv_s1_forward(x: &[f64], w: &[f64], g: &ConvGeom) -> Vec<f64> {
    let p = Padded::new(g);
    let (np, taps) = (p.voxels(), g.taps());
    let xp = p.pad(g, x);
    let mut acc = vec![0.0; g.c_out * p.span];
    for t in 0..taps {
        let off = p.tap_offset(g.tap_index(t));
        gemm(
            g.c_out,
            g.c_in,
            p.span,
            w,
            View::new(t, g.c_in * taps, taps),
            &xp,
            View::new(off, np, 1),
            1.0,
            &mut acc,
            View::new(0, p.span, 1),
        );
    }
    let width = g.input[2];
    let mut out = vec![0.0; g.c_out * g.out_voxels()];
    for (q, o) in p.rows(g, g.c_out) {
        out[o..o + width].copy_from_slice(&acc[q..q + width]);
    }
    out
}

fn conv_s1_backward(x: &[f64], w: &[f64], grad_out: &[f64], g: &ConvGeom) -> (Vec<f64>, Vec<f64>) {
    let p = Padded::new(g);
    let (np, taps) = (p.voxels(), g.taps());
    let xp = p.pad(g, x);
    let width = g.input[2];
    let mut gq = vec![0.0; g.c_out * p.span];
    for (q, o) in p.rows(g, g.c_out) {
        gq[q..q + width].copy_from_slice(&grad_out[o..o + width]);
    }
    let mut gw = vec![0.0; g.c_out * g.c_in * taps];
    let mut gxp = vec![0.0; g.c_in * np];
    for t in 0..taps {
        let off = p.tap_offset(g.tap_index(t));
        gemm(
            g.c_out,
            p.span,
            g.c_in,
            &gq,
            View::new(0, p.span, 1),
            &xp,
            View::new(off, 1, np),
            0.0,
            &mut gw,
            View::new(t, g.c_in * taps, taps),
        );
        gemm(
            g.c_in,
            g.c_out,
            p.span,
            w,
            View::new(t, taps, g.c_in * taps),
            &gq,
            View::new(0, p.span, 1),
            1.0,
            &mut gxp,
            View::new(off, np, 1),
        );
    }
    (p.unpad_add(g, &gxp), gw)
}

impl ConvGeom {
    /// Pointwise convolutions read the input directly as the column matrix.
    fn is_pointwise(&self) -> bool {
        self.taps() == 1 && self.stride == 1
    }

    /// Column matrix `(C_in · taps) × out_voxels`, zero where the kernel hangs
    /// over the border.
    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let (nin, nout, taps) = (self.in_voxels(), self.out_voxels(), self.taps());
        let mut col = vec![0.0; self.c_in * taps * nout];
        for ci in 0..self.c_in {
            let xin = &x[ci * nin..(ci + 1) * nin];
            for t in 0..taps {
                let row = &mut col[(ci * taps + t) * nout..(ci * taps + t + 1) * nout];
                self.for_each_row(self.tap_index(t), |os, is, n| {
                    for (o, v) in row[os..os + n].iter_mut().zip(xin[is..].iter().step_by(self.stride)) {
                        *o = *v;
                    }
                });
            }
        }
        col
    }

    /// Adjoint of [`ConvGeom::im2col`].
    fn col2im(&self, col: &[f64]) -> Vec<f64> {
        let (nin, nout, taps) = (self.in_voxels(), self.out_voxels(), self.taps());
        let mut x = vec![0.0; self.c_in * nin];
        for ci in 0..self.c_in {
            let xin = &mut x[ci * nin..(ci + 1) * nin];
            for t in 0..taps {
                let row = &col[(ci * taps + t) * nout..(ci * taps + t + 1) * nout];
                self.for_each_row(self.tap_index(t), |os, is, n| {
                    for (g, v) in xin[is..].iter_mut().step_by(self.stride).zip(&row[os..os + n]) {
                        *g += *v;
                    }
                });
            }
        }
        x
    }
}

/// Raw convolution forward on flat buffers.
pub fn conv3d_raw(x: &[f64], w: &[f64], bias: Option<&[f64]>, g: &ConvGeom) -> Vec<f64> {
    let (nout, k) = (g.out_voxels(), g.c_in * g.taps());
    let mut out = if g.stride == 1 && !g.is_pointwise() {
        conv_s1_forward(x, w, g)
    } else {
        let owned;
        let col = if g.is_pointwise() {
            x
        } else {
            owned = g.im2col(x);
            &owned
        };
        let mut out = vec![0.0; g.c_out * nout];
        gemm(g.c_out, k, nout, w, View::new(0, k, 1), col, View::new(0, nout, 1), 0.0, &mut out, View::new(0, nout, 1));
        out
    };
    if let Some(b) = bias {
        for (o, b) in out.chunks_mut(nout).zip(b) {
            for v in o {
                *v += b;
            }
        }
    }
    out
}

/// Gradients of a convolution: `(d input, d weight, d bias)`.
pub fn conv3d_backward_raw(
    x: &[f64],
    w: &[f64],
    grad_out: &[f64],
    g: &ConvGeom,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (nout, k) = (g.out_voxels(), g.c_in * g.taps());
    let gb_src = grad_out;
    let (gx, gw) = if g.stride == 1 && !g.is_pointwise() {
        conv_s1_backward(x, w, grad_out, g)
    } else {
        let owned;
        let col = if g.is_pointwise() {
            x
        } else {
            owned = g.im2col(x);
            &owned
        };
        let mut gw = vec![0.0; g.c_out * k];
        let full = |n| View::new(0, n, 1);
        gemm(g.c_out, nout, k, grad_out, full(nout), col, View::new(0, 1, nout), 0.0, &mut gw, full(k));
        let mut gcol = vec![0.0; k * nout];
        gemm(k, g.c_out, nout, w, View::new(0, 1, k), grad_out, full(nout), 0.0, &mut gcol, full(nout));
        let gx = if g.is_pointwise() { gcol } else { g.col2im(&gcol) };
        (gx, gw)
    };
    let gb = gb_src.chunks(nout).map(|c| c.iter().sum()).collect();
    (gx, gw, gb)
}

/// 3D convolution with same-padding. `weight` is `(C_out, C_in, kd, kh, kw)`.
pub fn conv3d(
    input: &VoxelVolume,
    weight: &Tensor,
    bias: Option<&[f64]>,
    stride: usize,
) -> Result<VoxelVolume> {
    let g = ConvGeom::new(input.dims(), weight.shape(), stride)?;
    if let Some(b) = bias {
        if b.len() != g.c_out {
            return shape_err(format!("bias length {} != C_out {}", b.len(), g.c_out));
        }
    }
    let out = conv3d_raw(input.data(), weight.data(), bias, &g);
    let [d, h, w] = g.output;
    VoxelVolume::new([g.c_out, d, h, w], out)
}

// ── pooling and windows ─────────────────────────────────────────────────

/// Mean of each channel over all voxels.
pub fn global_avg_pool3d(input: &VoxelVolume) -> Result<Vec<f64>> {
    let n = input.voxels();
    if n == 0 || input.channels() == 0 {
        return shape_err("global average pool of an empty volume");
    }
    Ok((0..input.channels())
        .map(|c| input.channel(c).iter().sum::<f64>() / n as f64)
        .collect())
}

pub fn check_window(size: usize) -> Result<()> {
    if size == 0 || size % 2 == 0 {
        return Err(AmaaError::InvalidWindow(size));
    }
    Ok(())
}

fn box_sum_axis(x: &[f64], dims: [usize; 4], axis: usize, radius: usize) -> Vec<f64> {
    let [c, d, h, w] = dims;
    let ext = [d, h, w][axis];
    let stride = match axis {
        0 => h * w,
        1 => w,
        _ => 1,
    };
    let mut out = vec![0.0; x.len()];
    for base in 0..c * d * h * w {
        let pos = (base / stride) % ext;
        let lo = pos.saturating_sub(radius);
        let hi = (pos + radius).min(ext - 1);
        let start = base - (pos - lo) * stride;
        let mut acc = 0.0;
        for k in 0..=(hi - lo) {
            acc += x[start + k * stride];
        }
        out[base] = acc;
    }
    out
}

/// Sum over the boundary-clipped cube window of side `size` around each voxel.
pub fn box_sum(x: &[f64], dims: [usize; 4], size: usize) -> Vec<f64> {
    let r = size / 2;
    if r == 0 {
        return x.to_vec();
    }
    let a = box_sum_axis(x, dims, 2, r);
    let b = box_sum_axis(&a, dims, 1, r);
    box_sum_axis(&b, dims, 0, r)
}

/// Number of in-bounds voxels in each clipped window (same for every channel).
pub fn window_counts(spatial: [usize; 3], size: usize) -> Vec<f64> {
    let r = size / 2;
    let axis = |n: usize| -> Vec<usize> {
        (0..n).map(|i| (i + r).min(n - 1) - i.saturating_sub(r) + 1).collect()
    };
    let [d, h, w] = spatial;
    let (cd, ch, cw) = (axis(d), axis(h), axis(w));
    let mut out = Vec::with_capacity(d * h * w);
    for a in &cd {
        for b in &ch {
            for c in &cw {
                out.push((a * b * c) as f64);
            }
        }
    }
    out
}

/// Mean over the clipped window around each voxel, per channel.
pub fn window_mean_raw(x: &[f64], dims: [usize; 4], size: usize) -> Vec<f64> {
    let counts = window_counts([dims[1], dims[2], dims[3]], size);
    let n = counts.len();
    let mut s = box_sum(x, dims, size);
    for (i, v) in s.iter_mut().enumerate() {
        *v /= counts[i % n];
    }
    s
}

/// Adjoint of [`window_mean_raw`]; clipped windows are symmetric so the
/// transpose is a box sum of the count-normalized gradient.
pub fn window_mean_backward_raw(grad: &[f64], dims: [usize; 4], size: usize) -> Vec<f64> {
    let counts = window_counts([dims[1], dims[2], dims[3]], size);
    let n = counts.len();
    let scaled: Vec<f64> = grad
        .iter()
        .enumerate()
        .map(|(i, g)| g / counts[i % n])
        .collect();
    box_sum(&scaled, dims, size)
}

pub fn window_mean(input: &VoxelVolume, size: usize) -> Result<VoxelVolume> {
    check_window(size)?;
    VoxelVolume::new(input.dims(), window_mean_raw(input.data(), input.dims(), size))
}

/// Windowed mean and population variance over clipped `size³` windows.
///
/// Variance is `mean(x²) - mean(x)²` with negative rounding residue clamped to 0.
pub fn neighborhood_stats(input: &VoxelVolume, size: usize) -> Result<(VoxelVolume, VoxelVolume)> {
    check_window(size)?;
    let dims = input.dims();
    let mean = window_mean_raw(input.data(), dims, size);
    let sq: Vec<f64> = input.data().iter().map(|x| x * x).collect();
    let m2 = window_mean_raw(&sq, dims, size);
    let var = m2
        .iter()
        .zip(&mean)
        .map(|(m2, m)| clamp_min0(m2 - m * m))
        .collect();
    Ok((VoxelVolume::new(dims, mean)?, VoxelVolume::new(dims, var)?))
}

// ── elementwise ─────────────────────────────────────────────────────────

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

#[inline]
pub fn clamp_min0(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

#[inline]
pub fn recip_floor(x: f64, floor: f64) -> f64 {
    1.0 / x.max(floor)
}

/// How the right operand of a binary op lines up with a `(C, D, H, W)` left operand.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Broadcast {
    Same,
    Scalar,
    /// `(C, 1, 1, 1)`: one value per channel.
    PerChannel,
    /// `(1, D, H, W)`: one map shared by all channels.
    Spatial,
}

impl Broadcast {
    pub fn resolve(a: &[usize], b: &[usize]) -> Result<Self> {
        if a == b {
            return Ok(Broadcast::Same);
        }
        let nb: usize = b.iter().product();
        if nb == 1 {
            return Ok(Broadcast::Scalar);
        }
        if a.len() == 4 && b.len() == 4 {
            if b[0] == a[0] && b[1..] == [1, 1, 1] {
                return Ok(Broadcast::PerChannel);
            }
            if b[0] == 1 && b[1..] == a[1..] {
                return Ok(Broadcast::Spatial);
            }
        }
        shape_err(format!("cannot broadcast {b:?} onto {a:?}"))
    }

    /// Index into the right operand for flat left index `i`.
    #[inline]
    pub fn rhs_index(self, i: usize, voxels: usize) -> usize {
        match self {
            Broadcast::Same => i,
            Broadcast::Scalar => 0,
            Broadcast::PerChannel => i / voxels,
            Broadcast::Spatial => i % voxels,
        }
    }
}

fn voxels_of(shape: &[usize]) -> usize {
    if shape.len() == 4 {
        shape[1] * shape[2] * shape[3]
    } else {
        1
    }
}

pub fn binary_raw(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    let bc = Broadcast::resolve(a.shape(), b.shape())?;
    let nv = voxels_of(a.shape());
    let data = a
        .data()
        .iter()
        .enumerate()
        .map(|(i, &x)| f(x, b.data()[bc.rhs_index(i, nv)]))
        .collect();
    Tensor::new(a.shape().to_vec(), data)
}

/// Reduces a full-shape gradient onto a broadcast operand's shape.
pub fn reduce_broadcast(grad: &[f64], a_shape: &[usize], b_shape: &[usize], bc: Broadcast) -> Vec<f64> {
    let nb: usize = b_shape.iter().product();
    if bc == Broadcast::Same {
        return grad.to_vec();
    }
    let nv = voxels_of(a_shape);
    let mut out = vec![0.0; nb];
    for (i, g) in grad.iter().enumerate() {
        out[bc.rhs_index(i, nv)] += g;
    }
    out
}

pub fn add(a: &VoxelVolume, b: &VoxelVolume) -> Result<VoxelVolume> {
    binary_raw(a.as_tensor(), b.as_tensor(), |x, y| x + y)?.try_into()
}

pub fn mul(a: &VoxelVolume, b: &VoxelVolume) -> Result<VoxelVolume> {
    binary_raw(a.as_tensor(), b.as_tensor(), |x, y| x * y)?.try_into()
}

/// Multiplies channel `c` by `s[c]`.
pub fn mul_channels(a: &VoxelVolume, s: &[f64]) -> Result<VoxelVolume> {
    let b = VoxelVolume::new([s.len(), 1, 1, 1], s.to_vec())?;
    mul(a, &b)
}

pub fn scale(a: &VoxelVolume, factor: f64) -> VoxelVolume {
    map(a, |x| x * factor)
}

pub fn map(a: &VoxelVolume, f: impl Fn(f64) -> f64) -> VoxelVolume {
    VoxelVolume::new(a.dims(), a.data().iter().map(|&x| f(x)).collect())
        .expect("map preserves shape")
}

// ── channel layout ──────────────────────────────────────────────────────

pub fn concat_channels(a: &VoxelVolume, b: &VoxelVolume) -> Result<VoxelVolume> {
    if a.spatial() != b.spatial() {
        return shape_err(format!(
            "concat spatial mismatch {:?} vs {:?}",
            a.spatial(),
            b.spatial()
        ));
    }
    let [ca, d, h, w] = a.dims();
    let mut data = Vec::with_capacity(a.data().len() + b.data().len());
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    VoxelVolume::new([ca + b.channels(), d, h, w], data)
}

/// Splits off the first `c` channels.
pub fn split_channels(v: &VoxelVolume, c: usize) -> Result<(VoxelVolume, VoxelVolume)> {
    let [ct, d, h, w] = v.dims();
    if c > ct {
        return shape_err(format!("cannot split {c} channels from {ct}"));
    }
    let cut = c * d * h * w;
    Ok((
        VoxelVolume::new([c, d, h, w], v.data()[..cut].to_vec())?,
        VoxelVolume::new([ct - c, d, h, w], v.data()[cut..].to_vec())?,
    ))
}

/// Mean over channels, producing a single-channel volume.
pub fn channel_mean_raw(x: &[f64], dims: [usize; 4]) -> Vec<f64> {
    let [c, d, h, w] = dims;
    let n = d * h * w;
    let mut out = vec![0.0; n];
    for ci in 0..c {
        for (o, v) in out.iter_mut().zip(&x[ci * n..(ci + 1) * n]) {
            *o += v;
        }
    }
    out.iter_mut().for_each(|o| *o /= c as f64);
    out
}

// ── upsampling ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpsampleMode {
    Nearest,
    Trilinear,
}

/// Two-tap interpolation stencil `(i0, i1, w0, w1)` for one output index.
type Stencil = (usize, usize, f64, f64);

fn stencils(n_in: usize, n_out: usize, mode: UpsampleMode) -> Vec<Stencil> {
    (0..n_out)
        .map(|o| match mode {
            UpsampleMode::Nearest => {
                let i = (o / 2).min(n_in - 1);
                (i, i, 1.0, 0.0)
            }
            UpsampleMode::Trilinear => {
                // half-pixel alignment, clamped to the edge samples
                let x = ((o as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, (n_in - 1) as f64);
                let i0 = x.floor() as usize;
                let i1 = (i0 + 1).min(n_in - 1);
                let t = x - i0 as f64;
                (i0, i1, 1.0 - t, t)
            }
        })
        .collect()
}

fn resample_axis(x: &[f64], dims: [usize; 4], axis: usize, st: &[Stencil]) -> (Vec<f64>, [usize; 4]) {
    let mut od = dims;
    od[axis + 1] = st.len();
    let inner: usize = dims[axis + 2..].iter().product();
    let outer: usize = dims[..axis + 1].iter().product();
    let n_in = dims[axis + 1];
    let mut out = vec![0.0; outer * st.len() * inner];
    for o in 0..outer {
        for (k, &(i0, i1, w0, w1)) in st.iter().enumerate() {
            let dst = (o * st.len() + k) * inner;
            let s0 = (o * n_in + i0) * inner;
            let s1 = (o * n_in + i1) * inner;
            for j in 0..inner {
                out[dst + j] = w0 * x[s0 + j] + w1 * x[s1 + j];
            }
        }
    }
    (out, od)
}

fn resample_axis_adjoint(g: &[f64], in_dims: [usize; 4], axis: usize, st: &[Stencil]) -> Vec<f64> {
    let inner: usize = in_dims[axis + 2..].iter().product();
    let outer: usize = in_dims[..axis + 1].iter().product();
    let n_in = in_dims[axis + 1];
    let mut out = vec![0.0; outer * n_in * inner];
    for o in 0..outer {
        for (k, &(i0, i1, w0, w1)) in st.iter().enumerate() {
            let src = (o * st.len() + k) * inner;
            let d0 = (o * n_in + i0) * inner;
            let d1 = (o * n_in + i1) * inner;
            for j in 0..inner {
                out[d0 + j] += w0 * g[src + j];
                out[d1 + j] += w1 * g[src + j];
            }
        }
    }
    out
}

/// Checks that each target extent is `2n` or `2n - 1` of the source extent.
pub fn check_upsample_target(spatial: [usize; 3], target: [usize; 3]) -> Result<()> {
    for (n, t) in spatial.iter().zip(&target) {
        if *t != 2 * n && *t + 1 != 2 * n {
            return shape_err(format!(
                "upsample target {target:?} is not a 2x enlargement of {spatial:?}"
            ));
        }
    }
    Ok(())
}

/// Upsampling by 2 along each spatial axis, cropped to `target`.
pub fn upsample_raw(x: &[f64], dims: [usize; 4], target: [usize; 3], mode: UpsampleMode) -> Vec<f64> {
    let mut cur = x.to_vec();
    let mut cd = dims;
    for axis in (0..3).rev() {
        let st = stencils(dims[axis + 1], target[axis], mode);
        let (next, nd) = resample_axis(&cur, cd, axis, &st);
        cur = next;
        cd = nd;
    }
    cur
}

pub fn upsample_backward_raw(g: &[f64], dims: [usize; 4], target: [usize; 3], mode: UpsampleMode) -> Vec<f64> {
    // forward order is w, h, d; the adjoint runs d, h, w
    let mut shapes = vec![dims];
    let mut cd = dims;
    for axis in (0..3).rev() {
        cd[axis + 1] = target[axis];
        shapes.push(cd);
    }
    let mut cur = g.to_vec();
    for (step, axis) in (0..3).enumerate() {
        let in_dims = shapes[2 - step];
        let st = stencils(dims[axis + 1], target[axis], mode);
        cur = resample_axis_adjoint(&cur, in_dims, axis, &st);
    }
    cur
}

/// Doubles every spatial extent.
pub fn upsample(input: &VoxelVolume, mode: UpsampleMode) -> Result<VoxelVolume> {
    let [c, d, h, w] = input.dims();
    upsample_to(input, [2 * d, 2 * h, 2 * w], mode).map(|v| {
        debug_assert_eq!(v.channels(), c);
        v
    })
}

/// Factor-2 upsampling cropped to `target` (each extent `2n` or `2n - 1`).
pub fn upsample_to(input: &VoxelVolume, target: [usize; 3], mode: UpsampleMode) -> Result<VoxelVolume> {
    check_upsample_target(input.spatial(), target)?;
    let out = upsample_raw(input.data(), input.dims(), target, mode);
    let [d, h, w] = target;
    VoxelVolume::new([input.channels(), d, h, w], out)
}
