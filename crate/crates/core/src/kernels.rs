//! Forward and backward kernels on plain tensors.
//!
//! These are the numeric routines behind every graph operation. They do not
//! record anything; [`crate::graph`] wires them into the tape. The
//! convolution family shares one tap iterator so that forward, input-adjoint
//! and weight-gradient passes visit exactly the same index pairs.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::{numel, Tensor};

const SQRT_2: f64 = core::f64::consts::SQRT_2;
const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

pub const LAYER_NORM_EPS: f64 = 1e-5;

// ---------------------------------------------------------------- pointwise

/// Exact GELU, `x·Φ(x)` with the Gaussian CDF.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / SQRT_2))
}

pub fn gelu_grad(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / SQRT_2)) + x * FRAC_1_SQRT_2PI * libm::exp(-0.5 * x * x)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

// ---------------------------------------------------------------- matmul

/// `out += op(a)·op(b)` for row-major `m×k` and `k×n` operands, where `op`
/// optionally transposes the stored matrix.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_acc(
    a: &[f64],
    b: &[f64],
    out: &mut [f64],
    m: usize,
    k: usize,
    n: usize,
    trans_a: bool,
    trans_b: bool,
) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = if trans_a { a[p * m + i] } else { a[i * k + p] };
            if av == 0.0 {
                continue;
            }
            if trans_b {
                for (j, o) in row.iter_mut().enumerate() {
                    *o += av * b[j * k + p];
                }
            } else {
                let brow = &b[p * n..(p + 1) * n];
                for (o, &bv) in row.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    }
}

/// Batch, m, k, n for a 2-D or batched 3-D product.
pub(crate) fn matmul_dims(a: &[usize], b: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match (a, b) {
        ([m, k], [k2, n]) if k == k2 => Ok((1, *m, *k, *n)),
        ([ba, m, k], [bb, k2, n]) if ba == bb && k == k2 => Ok((*ba, *m, *k, *n)),
        _ => Err(Error::shape("matmul", a, b)),
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (batch, m, k, n) = matmul_dims(a.shape(), b.shape())?;
    let mut out = vec![0.0; batch * m * n];
    for bi in 0..batch {
        gemm_acc(
            &a.data()[bi * m * k..(bi + 1) * m * k],
            &b.data()[bi * k * n..(bi + 1) * k * n],
            &mut out[bi * m * n..(bi + 1) * m * n],
            m,
            k,
            n,
            false,
            false,
        );
    }
    let shape = if a.rank() == 2 { vec![m, n] } else { vec![batch, m, n] };
    Ok(Tensor::from_parts(shape, out))
}

/// Gradients of `a·b` with respect to both operands.
pub(crate) fn matmul_backward(a: &Tensor, b: &Tensor, gy: &Tensor) -> (Tensor, Tensor) {
    let (batch, m, k, n) = matmul_dims(a.shape(), b.shape()).expect("checked in forward");
    let mut ga = vec![0.0; a.len()];
    let mut gb = vec![0.0; b.len()];
    for bi in 0..batch {
        let gys = &gy.data()[bi * m * n..(bi + 1) * m * n];
        // ga = gy·bᵀ (m×n · n×k)
        gemm_acc(
            gys,
            &b.data()[bi * k * n..(bi + 1) * k * n],
            &mut ga[bi * m * k..(bi + 1) * m * k],
            m,
            n,
            k,
            false,
            true,
        );
        // gb = aᵀ·gy (k×m · m×n)
        gemm_acc(
            &a.data()[bi * m * k..(bi + 1) * m * k],
            gys,
            &mut gb[bi * k * n..(bi + 1) * k * n],
            k,
            m,
            n,
            true,
            false,
        );
    }
    (
        Tensor::from_parts(a.shape().to_vec(), ga),
        Tensor::from_parts(b.shape().to_vec(), gb),
    )
}

// ---------------------------------------------------------------- layout

pub fn permute(x: &Tensor, perm: &[usize]) -> Result<Tensor> {
    let rank = x.rank();
    let mut seen = vec![false; rank];
    if perm.len() != rank || perm.iter().any(|&p| p >= rank || core::mem::replace(&mut seen[p], true)) {
        return Err(Error::invalid(
            "permute",
            alloc::format!("{perm:?} is not a permutation of rank {rank}"),
        ));
    }
    let in_strides = x.strides();
    let out_shape: Vec<usize> = perm.iter().map(|&p| x.shape()[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(x.len());
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    let data = x.data();
    for _ in 0..x.len() {
        out.push(data[offset]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            offset += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= src_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    Ok(Tensor::from_parts(out_shape, out))
}

pub(crate) fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Splits `shape` around `axis` into `(outer, extent, inner)`.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
}

pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = parts.first().ok_or(Error::Empty { op: "concat" })?;
    if axis >= first.rank() {
        return Err(Error::invalid("concat", "axis out of range"));
    }
    let mut total = 0;
    for p in parts {
        let ok = p.rank() == first.rank()
            && p
                .shape()
                .iter()
                .zip(first.shape())
                .enumerate()
                .all(|(ax, (a, b))| ax == axis || a == b);
        if !ok {
            return Err(Error::shape("concat", first.shape(), p.shape()));
        }
        total += p.shape()[axis];
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = total;
    let (outer, _, inner) = axis_split(&shape, axis);
    let mut out = Vec::with_capacity(numel(&shape));
    for o in 0..outer {
        for p in parts {
            let block = p.shape()[axis] * inner;
            out.extend_from_slice(&p.data()[o * block..(o + 1) * block]);
        }
    }
    Ok(Tensor::from_parts(shape, out))
}

// ---------------------------------------------------------------- softmax / layer norm

pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= x.rank() {
        return Err(Error::invalid("softmax", "axis out of range"));
    }
    let (outer, n, inner) = axis_split(x.shape(), axis);
    let mut out = vec![0.0; x.len()];
    let data = x.data();
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * n * inner + j * inner + i;
            let max = (0..n).map(|j| data[at(j)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for j in 0..n {
                let e = libm::exp(data[at(j)] - max);
                out[at(j)] = e;
                total += e;
            }
            for j in 0..n {
                out[at(j)] /= total;
            }
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

pub(crate) fn softmax_backward(y: &Tensor, gy: &Tensor, axis: usize) -> Tensor {
    let (outer, n, inner) = axis_split(y.shape(), axis);
    let mut gx = vec![0.0; y.len()];
    let (yd, gd) = (y.data(), gy.data());
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * n * inner + j * inner + i;
            let s: f64 = (0..n).map(|j| yd[at(j)] * gd[at(j)]).sum();
            for j in 0..n {
                gx[at(j)] = yd[at(j)] * (gd[at(j)] - s);
            }
        }
    }
    Tensor::from_parts(y.shape().to_vec(), gx)
}

/// Normalizes the last axis to zero mean and unit variance (no affine).
pub fn layer_norm(x: &Tensor) -> Tensor {
    let n = *x.shape().last().expect("rank >= 1");
    let mut out = vec![0.0; x.len()];
    for (row, o) in x.data().chunks(n).zip(out.chunks_mut(n)) {
        let mean = row.iter().sum::<f64>() / n as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let inv = 1.0 / libm::sqrt(var + LAYER_NORM_EPS);
        for (oi, &v) in o.iter_mut().zip(row) {
            *oi = (v - mean) * inv;
        }
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

pub(crate) fn layer_norm_backward(x: &Tensor, y: &Tensor, gy: &Tensor) -> Tensor {
    let n = *x.shape().last().expect("rank >= 1");
    let mut gx = vec![0.0; x.len()];
    for ((row, yr), (gr, gxr)) in x
        .data()
        .chunks(n)
        .zip(y.data().chunks(n))
        .zip(gy.data().chunks(n).zip(gx.chunks_mut(n)))
    {
        let mean = row.iter().sum::<f64>() / n as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let inv = 1.0 / libm::sqrt(var + LAYER_NORM_EPS);
        let g_mean = gr.iter().sum::<f64>() / n as f64;
        let gy_mean = gr.iter().zip(yr).map(|(g, y)| g * y).sum::<f64>() / n as f64;
        for ((o, &g), &yv) in gxr.iter_mut().zip(gr).zip(yr) {
            *o = inv * (g - g_mean - yv * gy_mean);
        }
    }
    Tensor::from_parts(x.shape().to_vec(), gx)
}

// ---------------------------------------------------------------- convolution

/// Geometry of a 3-D correlation `input [N, Cin, D, H, W] -> [N, Cout, D', H', W']`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub cout: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub output: [usize; 3],
    pub stride: usize,
    pub pad: usize,
}

/// Output extent of a correlation; `None` when it would be non-positive.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Output extent of a transposed correlation; `None` when non-positive.
pub fn conv_transpose_out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let full = (input - 1) * stride + kernel;
    if stride == 0 || full <= 2 * pad {
        return None;
    }
    Some(full - 2 * pad)
}

fn split_batch(shape: &[usize], op: &'static str) -> Result<(usize, usize, [usize; 3])> {
    match *shape {
        [c, d, h, w] => Ok((1, c, [d, h, w])),
        [n, c, d, h, w] => Ok((n, c, [d, h, w])),
        _ => Err(Error::invalid(
            op,
            alloc::format!("expected [C,D,H,W] or [N,C,D,H,W], got {shape:?}"),
        )),
    }
}

fn with_batch(batched: bool, n: usize, c: usize, sp: [usize; 3]) -> Vec<usize> {
    if batched {
        vec![n, c, sp[0], sp[1], sp[2]]
    } else {
        vec![c, sp[0], sp[1], sp[2]]
    }
}

impl ConvGeom {
    /// Geometry of `conv3d(input, weight)` with weight `[Cout, Cin, kd, kh, kw]`.
    pub fn for_conv(input: &[usize], weight: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let (batch, cin, sp) = split_batch(input, "conv3d")?;
        let [cout, wcin, kd, kh, kw] = *weight else {
            return Err(Error::invalid("conv3d", alloc::format!("weight must be rank 5, got {weight:?}")));
        };
        if wcin != cin {
            return Err(Error::shape("conv3d", input, weight));
        }
        if stride == 0 {
            return Err(Error::invalid("conv3d", "stride must be >= 1"));
        }
        let kernel = [kd, kh, kw];
        let mut output = [0; 3];
        for ax in 0..3 {
            output[ax] = conv_out_extent(sp[ax], kernel[ax], stride, pad).ok_or_else(|| {
                Error::invalid(
                    "conv3d",
                    alloc::format!("input {input:?} too small for kernel {kernel:?} with padding {pad}"),
                )
            })?;
        }
        Ok(ConvGeom { batch, cin, cout, input: sp, kernel, output, stride, pad })
    }

    /// Geometry of the correlation whose adjoint is `conv_transpose3d(input, weight)`,
    /// weight laid out `[C_in_of_transpose, C_out_of_transpose, kd, kh, kw]`.
    pub fn for_transpose(input: &[usize], weight: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let (batch, tin, sp) = split_batch(input, "conv_transpose3d")?;
        let [wtin, tout, kd, kh, kw] = *weight else {
            return Err(Error::invalid(
                "conv_transpose3d",
                alloc::format!("weight must be rank 5, got {weight:?}"),
            ));
        };
        if wtin != tin {
            return Err(Error::shape("conv_transpose3d", input, weight));
        }
        if stride == 0 {
            return Err(Error::invalid("conv_transpose3d", "stride must be >= 1"));
        }
        let kernel = [kd, kh, kw];
        let mut big = [0; 3];
        for ax in 0..3 {
            big[ax] = conv_transpose_out_extent(sp[ax], kernel[ax], stride, pad).ok_or_else(|| {
                Error::invalid("conv_transpose3d", "computed output extent is not positive")
            })?;
        }
        // The forward correlation maps the large grid back onto `sp`.
        let g = ConvGeom { batch, cin: tout, cout: tin, input: big, kernel, output: sp, stride, pad };
        for ax in 0..3 {
            if conv_out_extent(big[ax], kernel[ax], stride, pad) != Some(sp[ax]) {
                return Err(Error::invalid("conv_transpose3d", "inconsistent transposed geometry"));
            }
        }
        Ok(g)
    }

    fn in_len(&self) -> usize {
        self.batch * self.cin * numel(&self.input)
    }

    fn out_len(&self) -> usize {
        self.batch * self.cout * numel(&self.output)
    }

    /// Valid output range `[lo, hi)` for kernel tap `k` along an axis.
    fn valid(&self, ax: usize, k: usize) -> (usize, usize) {
        let (s, p, n, o) = (self.stride, self.pad, self.input[ax], self.output[ax]);
        // need 0 <= out*s + k - p < n
        let lo = if p > k { (p - k).div_ceil(s) } else { 0 };
        let hi = if n + p > k { ((n + p - k - 1) / s + 1).min(o) } else { 0 };
        (lo, hi.max(lo))
    }

    /// Calls `f(x_offset, y_offset, weight_index, count)` for every contiguous
    /// output row segment; element `j` of the row reads `x[x_offset + j*stride]`.
    #[inline]
    fn for_each_row(&self, mut f: impl FnMut(usize, usize, usize, usize)) {
        let [id, ih, iw] = self.input;
        let [od, oh, ow] = self.output;
        let [kd, kh, kw] = self.kernel;
        let (s, p) = (self.stride, self.pad);
        for n in 0..self.batch {
            for co in 0..self.cout {
                for ci in 0..self.cin {
                    let x_chan = (n * self.cin + ci) * id * ih * iw;
                    let y_chan = (n * self.cout + co) * od * oh * ow;
                    for kz in 0..kd {
                        let (z_lo, z_hi) = self.valid(0, kz);
                        for ky in 0..kh {
                            let (y_lo, y_hi) = self.valid(1, ky);
                            for kx in 0..kw {
                                let (x_lo, x_hi) = self.valid(2, kx);
                                if x_lo >= x_hi {
                                    continue;
                                }
                                let widx = (((co * self.cin + ci) * kd + kz) * kh + ky) * kw + kx;
                                let count = x_hi - x_lo;
                                let ix0 = x_lo * s + kx - p;
                                for oz in z_lo..z_hi {
                                    let iz = oz * s + kz - p;
                                    for oy in y_lo..y_hi {
                                        let iy = oy * s + ky - p;
                                        f(
                                            x_chan + (iz * ih + iy) * iw + ix0,
                                            y_chan + (oz * oh + oy) * ow + x_lo,
                                            widx,
                                            count,
                                        );
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// `y += corr(x, w)`.
    fn forward_acc(&self, x: &[f64], w: &[f64], y: &mut [f64]) {
        let s = self.stride;
        self.for_each_row(|xo, yo, wi, count| {
            let wv = w[wi];
            if wv == 0.0 {
                return;
            }
            let yr = &mut y[yo..yo + count];
            if s == 1 {
                for (a, &b) in yr.iter_mut().zip(&x[xo..xo + count]) {
                    *a += wv * b;
                }
            } else {
                for (j, a) in yr.iter_mut().enumerate() {
                    *a += wv * x[xo + j * s];
                }
            }
        });
    }

    /// `x += corrᵀ(y, w)`: the adjoint of [`Self::forward_acc`] in `x`.
    fn adjoint_acc(&self, y: &[f64], w: &[f64], x: &mut [f64]) {
        let s = self.stride;
        self.for_each_row(|xo, yo, wi, count| {
            let wv = w[wi];
            if wv == 0.0 {
                return;
            }
            let yr = &y[yo..yo + count];
            if s == 1 {
                for (a, &b) in x[xo..xo + count].iter_mut().zip(yr) {
                    *a += wv * b;
                }
            } else {
                for (j, &b) in yr.iter().enumerate() {
                    x[xo + j * s] += wv * b;
                }
            }
        });
    }

    /// `gw += ∂⟨y_grad, corr(x, w)⟩/∂w`.
    fn weight_grad_acc(&self, x: &[f64], gy: &[f64], gw: &mut [f64]) {
        let s = self.stride;
        self.for_each_row(|xo, yo, wi, count| {
            let yr = &gy[yo..yo + count];
            let acc: f64 = if s == 1 {
                yr.iter().zip(&x[xo..xo + count]).map(|(a, b)| a * b).sum()
            } else {
                yr.iter().enumerate().map(|(j, a)| a * x[xo + j * s]).sum()
            };
            gw[wi] += acc;
        });
    }
}

fn add_channel_bias(y: &mut [f64], bias: &[f64], batch: usize, spatial: usize) {
    let c = bias.len();
    for n in 0..batch {
        for (ch, &b) in bias.iter().enumerate() {
            let start = (n * c + ch) * spatial;
            for v in &mut y[start..start + spatial] {
                *v += b;
            }
        }
    }
}

fn channel_bias_grad(gy: &[f64], batch: usize, channels: usize, spatial: usize) -> Vec<f64> {
    let mut gb = vec![0.0; channels];
    for n in 0..batch {
        for (ch, g) in gb.iter_mut().enumerate() {
            let start = (n * channels + ch) * spatial;
            *g += gy[start..start + spatial].iter().sum::<f64>();
        }
    }
    gb
}

fn check_bias(op: &'static str, bias: Option<&Tensor>, channels: usize) -> Result<()> {
    if let Some(b) = bias {
        if b.shape() != [channels] {
            return Err(Error::shape(op, b.shape(), &[channels]));
        }
    }
    Ok(())
}

/// 3-D correlation (no kernel flip). Input `[C,D,H,W]` or batched `[N,C,D,H,W]`,
/// weight `[Cout, Cin, kd, kh, kw]`, optional bias `[Cout]`.
pub fn conv3d(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, stride: usize, pad: usize) -> Result<Tensor> {
    let g = ConvGeom::for_conv(x.shape(), w.shape(), stride, pad)?;
    check_bias("conv3d", bias, g.cout)?;
    let mut y = vec![0.0; g.out_len()];
    g.forward_acc(x.data(), w.data(), &mut y);
    if let Some(b) = bias {
        add_channel_bias(&mut y, b.data(), g.batch, numel(&g.output));
    }
    Ok(Tensor::from_parts(with_batch(x.rank() == 5, g.batch, g.cout, g.output), y))
}

/// Gradients of [`conv3d`] with respect to input, weight and bias.
pub(crate) fn conv3d_backward(x: &Tensor, w: &Tensor, gy: &Tensor, stride: usize, pad: usize) -> (Tensor, Tensor, Tensor) {
    let g = ConvGeom::for_conv(x.shape(), w.shape(), stride, pad).expect("checked in forward");
    let mut gx = vec![0.0; g.in_len()];
    let mut gw = vec![0.0; w.len()];
    g.adjoint_acc(gy.data(), w.data(), &mut gx);
    g.weight_grad_acc(x.data(), gy.data(), &mut gw);
    let gb = channel_bias_grad(gy.data(), g.batch, g.cout, numel(&g.output));
    (
        Tensor::from_parts(x.shape().to_vec(), gx),
        Tensor::from_parts(w.shape().to_vec(), gw),
        Tensor::from_parts(vec![g.cout], gb),
    )
}

/// Transposed 3-D correlation, the exact adjoint of [`conv3d`] for the same
/// weight. Weight `[Cin, Cout, kd, kh, kw]`; output extent
/// `(in − 1)·stride − 2·pad + kernel`.
pub fn conv_transpose3d(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, stride: usize, pad: usize) -> Result<Tensor> {
    let g = ConvGeom::for_transpose(x.shape(), w.shape(), stride, pad)?;
    check_bias("conv_transpose3d", bias, g.cin)?;
    let mut y = vec![0.0; g.in_len()];
    g.adjoint_acc(x.data(), w.data(), &mut y);
    if let Some(b) = bias {
        add_channel_bias(&mut y, b.data(), g.batch, numel(&g.input));
    }
    Ok(Tensor::from_parts(with_batch(x.rank() == 5, g.batch, g.cin, g.input), y))
}

pub(crate) fn conv_transpose3d_backward(
    x: &Tensor,
    w: &Tensor,
    gy: &Tensor,
    stride: usize,
    pad: usize,
) -> (Tensor, Tensor, Tensor) {
    let g = ConvGeom::for_transpose(x.shape(), w.shape(), stride, pad).expect("checked in forward");
    let mut gx = vec![0.0; g.out_len()];
    let mut gw = vec![0.0; w.len()];
    g.forward_acc(gy.data(), w.data(), &mut gx);
    g.weight_grad_acc(gy.data(), x.data(), &mut gw);
    let gb = channel_bias_grad(gy.data(), g.batch, g.cin, numel(&g.input));
    (
        Tensor::from_parts(x.shape().to_vec(), gx),
        Tensor::from_parts(w.shape().to_vec(), gw),
        Tensor::from_parts(vec![g.cin], gb),
    )
}

/// Timestep-axis dimensions `(T, C, sites)` of a `[T, C, ...]` tensor.
fn temporal_dims(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::invalid("temporal_conv", "input must be at least [T, C]"));
    }
    Ok((shape[0], shape[1], numel(&shape[2..])))
}

/// Length-3 convolution along the leading timestep axis with zero padding 1,
/// applied identically at every spatial site. Input `[T, C, ...]`, weight
/// `[Cout, C, 3]`, optional bias `[Cout]`.
pub fn temporal_conv(x: &Tensor, w: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let (t_len, c, sites) = temporal_dims(x.shape())?;
    let [cout, wc, k] = *w.shape() else {
        return Err(Error::invalid("temporal_conv", "weight must be [Cout, C, 3]"));
    };
    if k != 3 {
        return Err(Error::invalid(
            "temporal_conv",
            alloc::format!("kernel length must be 3, got {k}"),
        ));
    }
    if wc != c {
        return Err(Error::shape("temporal_conv", x.shape(), w.shape()));
    }
    check_bias("temporal_conv", bias, cout)?;
    let mut y = vec![0.0; t_len * cout * sites];
    let (xd, wd) = (x.data(), w.data());
    for t in 0..t_len {
        for co in 0..cout {
            let yr = &mut y[(t * cout + co) * sites..(t * cout + co + 1) * sites];
            if let Some(b) = bias {
                yr.iter_mut().for_each(|v| *v = b.data()[co]);
            }
            for ci in 0..c {
                for tap in 0..3 {
                    let Some(src) = (t + tap).checked_sub(1).filter(|&s| s < t_len) else {
                        continue;
                    };
                    let wv = wd[(co * c + ci) * 3 + tap];
                    let xr = &xd[(src * c + ci) * sites..(src * c + ci + 1) * sites];
                    for (a, &b) in yr.iter_mut().zip(xr) {
                        *a += wv * b;
                    }
                }
            }
        }
    }
    let mut shape = x.shape().to_vec();
    shape[1] = cout;
    Ok(Tensor::from_parts(shape, y))
}

pub(crate) fn temporal_conv_backward(x: &Tensor, w: &Tensor, gy: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (t_len, c, sites) = temporal_dims(x.shape()).expect("checked in forward");
    let cout = w.shape()[0];
    let mut gx = vec![0.0; x.len()];
    let mut gw = vec![0.0; w.len()];
    let mut gb = vec![0.0; cout];
    let (xd, wd, gd) = (x.data(), w.data(), gy.data());
    for t in 0..t_len {
        for co in 0..cout {
            let gr = &gd[(t * cout + co) * sites..(t * cout + co + 1) * sites];
            gb[co] += gr.iter().sum::<f64>();
            for ci in 0..c {
                for tap in 0..3 {
                    let Some(src) = (t + tap).checked_sub(1).filter(|&s| s < t_len) else {
                        continue;
                    };
                    let wi = (co * c + ci) * 3 + tap;
                    let base = (src * c + ci) * sites;
                    let xr = &xd[base..base + sites];
                    gw[wi] += gr.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>();
                    let wv = wd[wi];
                    for (a, &g) in gx[base..base + sites].iter_mut().zip(gr) {
                        *a += wv * g;
                    }
                }
            }
        }
    }
    (
        Tensor::from_parts(x.shape().to_vec(), gx),
        Tensor::from_parts(w.shape().to_vec(), gw),
        Tensor::from_parts(vec![cout], gb),
    )
}

// ---------------------------------------------------------------- statistics

fn rows(x: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match *x.shape() {
        [b, d] => Ok((b, d)),
        _ => Err(Error::invalid(op, alloc::format!("expected a [B, d] matrix, got {:?}", x.shape()))),
    }
}

/// Population covariance `(1/B)·(H − mean)ᵀ(H − mean)` of a `[B, d]` matrix.
pub fn covariance(h: &Tensor) -> Result<Tensor> {
    let (b, d) = rows(h, "covariance")?;
    let centered = center_rows(h.data(), b, d);
    let mut cov = vec![0.0; d * d];
    gemm_acc(&centered, &centered, &mut cov, d, b, d, true, false);
    let inv = 1.0 / b as f64;
    cov.iter_mut().for_each(|v| *v *= inv);
    // exact symmetry regardless of summation order
    for i in 0..d {
        for j in i + 1..d {
            cov[j * d + i] = cov[i * d + j];
        }
    }
    Ok(Tensor::from_parts(vec![d, d], cov))
}

fn center_rows(data: &[f64], b: usize, d: usize) -> Vec<f64> {
    let mut mean = vec![0.0; d];
    for row in data.chunks(d) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= b as f64);
    let mut out = data.to_vec();
    for row in out.chunks_mut(d) {
        for (v, m) in row.iter_mut().zip(&mean) {
            *v -= m;
        }
    }
    out
}

pub(crate) fn covariance_backward(h: &Tensor, gy: &Tensor) -> Tensor {
    let (b, d) = rows(h, "covariance").expect("checked in forward");
    let centered = center_rows(h.data(), b, d);
    let g = gy.data();
    let mut sym = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            sym[i * d + j] = (g[i * d + j] + g[j * d + i]) / b as f64;
        }
    }
    let mut gx = vec![0.0; b * d];
    gemm_acc(&centered, &sym, &mut gx, b, d, d, false, false);
    Tensor::from_parts(h.shape().to_vec(), gx)
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("cosine", &[a.len()], &[b.len()]));
    }
    let na = libm::sqrt(a.iter().map(|v| v * v).sum());
    let nb = libm::sqrt(b.iter().map(|v| v * v).sum());
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNorm { op: "cosine", row: 0 });
    }
    let c = a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb);
    Ok(c.clamp(-1.0, 1.0))
}

/// Cosine similarity of corresponding rows of two `[B, d]` matrices.
pub fn row_cosine(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, d) = rows(a, "row_cosine")?;
    if a.shape() != b.shape() {
        return Err(Error::shape("row_cosine", a.shape(), b.shape()));
    }
    let mut out = Vec::with_capacity(n);
    for (i, (ra, rb)) in a.data().chunks(d).zip(b.data().chunks(d)).enumerate() {
        out.push(cosine(ra, rb).map_err(|_| Error::ZeroNorm { op: "row_cosine", row: i })?);
    }
    Ok(Tensor::from_parts(vec![n], out))
}

pub(crate) fn row_cosine_backward(a: &Tensor, b: &Tensor, gy: &Tensor) -> (Tensor, Tensor) {
    let d = a.shape()[1];
    let mut ga = vec![0.0; a.len()];
    let mut gb = vec![0.0; b.len()];
    for (i, ((ra, rb), (oa, ob))) in a
        .data()
        .chunks(d)
        .zip(b.data().chunks(d))
        .zip(ga.chunks_mut(d).zip(gb.chunks_mut(d)))
        .enumerate()
    {
        let aa: f64 = ra.iter().map(|v| v * v).sum();
        let bb: f64 = rb.iter().map(|v| v * v).sum();
        let ab: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
        let (na, nb) = (libm::sqrt(aa), libm::sqrt(bb));
        let c = ab / (na * nb);
        let g = gy.data()[i];
        for j in 0..d {
            oa[j] = g * (rb[j] / (na * nb) - c * ra[j] / aa);
            ob[j] = g * (ra[j] / (na * nb) - c * rb[j] / bb);
        }
    }
    (
        Tensor::from_parts(a.shape().to_vec(), ga),
        Tensor::from_parts(b.shape().to_vec(), gb),
    )
}

pub fn frobenius(x: &Tensor) -> f64 {
    libm::sqrt(x.data().iter().map(|v| v * v).sum())
}
