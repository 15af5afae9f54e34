//! Planar convolution, its adjoint, and the affine map, each with a hand-written backward.
//!
//! Convolutions are lowered to im2col plus a single-threaded GEMM, so results are
//! bit-reproducible on a given machine.

use crate::error::{shape_err, Error, Result};
use crate::tensor::GridTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_size: usize,
    pub stride: usize,
    pub padding: usize,
    pub transposed: bool,
}

impl ConvSpec {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel_size: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        if kernel_size.is_multiple_of(2) {
            return Err(Error::EvenKernel(kernel_size));
        }
        if !(1..=2).contains(&stride) {
            return Err(Error::Config(format!("stride {stride} not in {{1, 2}}")));
        }
        if in_channels == 0 || out_channels == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        Ok(Self { in_channels, out_channels, kernel_size, stride, padding, transposed: false })
    }

    /// Stride-`stride` convolution that keeps `ceil(n / stride)` on odd extents.
    pub fn same(in_channels: usize, out_channels: usize, kernel_size: usize, stride: usize) -> Result<Self> {
        Self::new(in_channels, out_channels, kernel_size, stride, kernel_size / 2)
    }

    pub fn transposed(mut self) -> Self {
        self.transposed = true;
        self
    }

    /// `[C_out, C_in, K, K]` for a convolution, `[C_in, C_out, K, K]` for a transposed one.
    pub fn kernel_shape(&self) -> [usize; 4] {
        let k = self.kernel_size;
        if self.transposed {
            [self.in_channels, self.out_channels, k, k]
        } else {
            [self.out_channels, self.in_channels, k, k]
        }
    }

    /// Output extent for an input extent `n`.
    pub fn output_size(&self, n: usize) -> Result<usize> {
        let (k, s, p) = (self.kernel_size, self.stride, self.padding);
        if self.transposed {
            let full = (n - 1) * s + k;
            if full <= 2 * p {
                return Err(Error::Config(format!("transposed conv output empty for n={n}")));
            }
            Ok(full - 2 * p)
        } else {
            if n + 2 * p < k {
                return Err(Error::Config(format!("input extent {n} smaller than kernel {k}")));
            }
            Ok((n + 2 * p - k) / s + 1)
        }
    }

    fn check(&self, input: &GridTensor, kernel: &GridTensor, transposed: bool) -> Result<()> {
        if self.transposed != transposed {
            return Err(Error::Config(format!("spec.transposed={} used for the wrong op", self.transposed)));
        }
        if input.rank() != 4 {
            return shape_err(format!("conv input must be [B,C,Y,X], got {:?}", input.shape()));
        }
        if input.dim(1) != self.in_channels {
            return shape_err(format!("input has {} channels, spec says {}", input.dim(1), self.in_channels));
        }
        if kernel.shape() != self.kernel_shape() {
            return shape_err(format!("kernel {:?}, expected {:?}", kernel.shape(), self.kernel_shape()));
        }
        Ok(())
    }
}

struct Geometry {
    batch: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    /// Output column range `[lo, hi)` whose input column `o*s + kx - p` lies in `[0, w)`.
    fn valid_out_range(&self, kx: usize, in_len: usize, out_len: usize) -> (usize, usize) {
        let (s, p) = (self.stride, self.pad);
        let lo = if p > kx { (p - kx).div_ceil(s) } else { 0 };
        let hi = ((in_len + p).saturating_sub(kx)).div_ceil(s).min(out_len);
        (lo, hi.max(lo))
    }
}

/// Unfolds one batch item `[c_in, h, w]` into `cols[(c, ky, kx), (oy, ox)]`; padding stays zero.
fn im2col(g: &Geometry, inp: &[f64], cols: &mut [f64]) {
    let (k, s, p, n_out) = (g.k, g.stride, g.pad, g.ho * g.wo);
    cols.fill(0.0);
    for c in 0..g.c_in {
        let plane = &inp[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..k {
            let (oy_lo, oy_hi) = g.valid_out_range(ky, g.h, g.ho);
            for kx in 0..k {
                let (ox_lo, ox_hi) = g.valid_out_range(kx, g.w, g.wo);
                let row = &mut cols[((c * k + ky) * k + kx) * n_out..][..n_out];
                for oy in oy_lo..oy_hi {
                    let irow = &plane[(oy * s + ky - p) * g.w..][..g.w];
                    let orow = &mut row[oy * g.wo..(oy + 1) * g.wo];
                    if s == 1 {
                        orow[ox_lo..ox_hi].copy_from_slice(&irow[ox_lo + kx - p..ox_hi + kx - p]);
                    } else {
                        for ox in ox_lo..ox_hi {
                            orow[ox] = irow[ox * s + kx - p];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates `cols` back onto `out` (`[c_in, h, w]`).
fn col2im(g: &Geometry, cols: &[f64], out: &mut [f64]) {
    let (k, s, p, n_out) = (g.k, g.stride, g.pad, g.ho * g.wo);
    for c in 0..g.c_in {
        let plane = &mut out[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..k {
            let (oy_lo, oy_hi) = g.valid_out_range(ky, g.h, g.ho);
            for kx in 0..k {
                let (ox_lo, ox_hi) = g.valid_out_range(kx, g.w, g.wo);
                let row = &cols[((c * k + ky) * k + kx) * n_out..][..n_out];
                for oy in oy_lo..oy_hi {
                    let orow = &mut plane[(oy * s + ky - p) * g.w..][..g.w];
                    let crow = &row[oy * g.wo..(oy + 1) * g.wo];
                    if s == 1 {
                        for (o, v) in orow[ox_lo + kx - p..ox_hi + kx - p].iter_mut().zip(&crow[ox_lo..ox_hi]) {
                            *o += v;
                        }
                    } else {
                        for ox in ox_lo..ox_hi {
                            orow[ox * s + kx - p] += crow[ox];
                        }
                    }
                }
            }
        }
    }
}

/// `c (m x n) += a (m x k) * b (k x n)` with explicit row/column strides.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], (rsa, csa): (usize, usize), b: &[f64], (rsb, csb): (usize, usize), c: &mut [f64]) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    debug_assert!((m - 1) * rsa + (k - 1) * csa < a.len());
    debug_assert!((k - 1) * rsb + (n - 1) * csb < b.len());
    debug_assert!(m * n <= c.len());
    // SAFETY: the asserted extents keep every strided access inside the slices, and
    // `c` does not alias `a` or `b` because it is borrowed mutably.
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0,
            a.as_ptr(), rsa as isize, csa as isize,
            b.as_ptr(), rsb as isize, csb as isize,
            1.0, c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// `out[b,o,y,x] += sum in[b,c,y*s-p+ky, x*s-p+kx] * ker[o,c,ky,kx]`
fn forward_raw(g: &Geometry, inp: &[f64], ker: &[f64], out: &mut [f64]) {
    let (rows, n_out) = (g.c_in * g.k * g.k, g.ho * g.wo);
    let mut cols = vec![0.0; rows * n_out];
    for b in 0..g.batch {
        im2col(g, &inp[b * g.c_in * g.h * g.w..][..g.c_in * g.h * g.w], &mut cols);
        gemm(g.c_out, rows, n_out, ker, (rows, 1), &cols, (n_out, 1), &mut out[b * g.c_out * n_out..][..g.c_out * n_out]);
    }
}

/// Adjoint of `forward_raw`: `inp` has shape `[B, c_out, ho, wo]`, `out` has `[B, c_in, h, w]`,
/// kernel layout is the forward layout `[c_out, c_in, K, K]`.
fn adjoint_raw(g: &Geometry, inp: &[f64], ker: &[f64], out: &mut [f64]) {
    let (rows, n_out) = (g.c_in * g.k * g.k, g.ho * g.wo);
    let mut cols = vec![0.0; rows * n_out];
    for b in 0..g.batch {
        cols.fill(0.0);
        gemm(rows, g.c_out, n_out, ker, (1, rows), &inp[b * g.c_out * n_out..][..g.c_out * n_out], (n_out, 1), &mut cols);
        col2im(g, &cols, &mut out[b * g.c_in * g.h * g.w..][..g.c_in * g.h * g.w]);
    }
}

/// Kernel gradient of `forward_raw`: `gk[o,c,ky,kx] = sum_b,y,x gout[b,o,y,x] * in[b,c,..]`.
fn kernel_grad_raw(g: &Geometry, inp: &[f64], gout: &[f64], gk: &mut [f64]) {
    let (rows, n_out) = (g.c_in * g.k * g.k, g.ho * g.wo);
    let mut cols = vec![0.0; rows * n_out];
    for b in 0..g.batch {
        im2col(g, &inp[b * g.c_in * g.h * g.w..][..g.c_in * g.h * g.w], &mut cols);
        gemm(g.c_out, n_out, rows, &gout[b * g.c_out * n_out..][..g.c_out * n_out], (n_out, 1), &cols, (1, n_out), gk);
    }
}

fn forward_geometry(input: &GridTensor, spec: &ConvSpec) -> Result<Geometry> {
    Ok(Geometry {
        batch: input.dim(0),
        c_in: spec.in_channels,
        h: input.dim(2),
        w: input.dim(3),
        c_out: spec.out_channels,
        k: spec.kernel_size,
        stride: spec.stride,
        pad: spec.padding,
        ho: spec.output_size(input.dim(2))?,
        wo: spec.output_size(input.dim(3))?,
    })
}

/// Zero-padded cross-correlation: `[B,C,Y,X] * [C',C,K,K] -> [B,C',Y',X']`.
pub fn conv2d(input: &GridTensor, kernel: &GridTensor, spec: &ConvSpec) -> Result<GridTensor> {
    spec.check(input, kernel, false)?;
    let g = forward_geometry(input, spec)?;
    let mut out = GridTensor::zeros(&[g.batch, g.c_out, g.ho, g.wo]);
    forward_raw(&g, input.data(), kernel.data(), out.data_mut());
    Ok(out)
}

/// Gradients of `conv2d` with respect to its input and kernel.
pub fn conv2d_backward(
    input: &GridTensor,
    kernel: &GridTensor,
    spec: &ConvSpec,
    grad_out: &GridTensor,
) -> Result<(GridTensor, GridTensor)> {
    spec.check(input, kernel, false)?;
    let g = forward_geometry(input, spec)?;
    if grad_out.shape() != [g.batch, g.c_out, g.ho, g.wo] {
        return shape_err(format!("grad_out {:?}", grad_out.shape()));
    }
    let mut gin = GridTensor::zeros(input.shape());
    adjoint_raw(&g, grad_out.data(), kernel.data(), gin.data_mut());
    let mut gk = GridTensor::zeros(kernel.shape());
    kernel_grad_raw(&g, input.data(), grad_out.data(), gk.data_mut());
    Ok((gin, gk))
}

/// Geometry of the forward convolution whose adjoint maps `input` (`[B, C_in, h, w]`)
/// onto an `out_h x out_w` map.
fn transposed_geometry(input: &GridTensor, spec: &ConvSpec, out_h: usize, out_w: usize) -> Result<Geometry> {
    let fwd = ConvSpec { transposed: false, in_channels: spec.out_channels, out_channels: spec.in_channels, ..*spec };
    let (ho, wo) = (fwd.output_size(out_h)?, fwd.output_size(out_w)?);
    if (ho, wo) != (input.dim(2), input.dim(3)) {
        return shape_err(format!(
            "transposed conv: {out_h}x{out_w} output does not map back onto {}x{} input",
            input.dim(2),
            input.dim(3)
        ));
    }
    Ok(Geometry {
        batch: input.dim(0),
        c_in: spec.out_channels,
        h: out_h,
        w: out_w,
        c_out: spec.in_channels,
        k: spec.kernel_size,
        stride: spec.stride,
        pad: spec.padding,
        ho,
        wo,
    })
}

/// Transposed convolution, the adjoint of [`conv2d`] with the same kernel.
///
/// Kernel layout `[C_in, C_out, K, K]`; output extent `(n-1)*s - 2p + K`.
pub fn conv2d_transpose(input: &GridTensor, kernel: &GridTensor, spec: &ConvSpec) -> Result<GridTensor> {
    spec.check(input, kernel, true)?;
    let (oh, ow) = (spec.output_size(input.dim(2))?, spec.output_size(input.dim(3))?);
    conv2d_transpose_sized(input, kernel, spec, oh, ow)
}

/// Transposed convolution onto an explicit output extent (any extent the forward conv maps back).
pub fn conv2d_transpose_sized(
    input: &GridTensor,
    kernel: &GridTensor,
    spec: &ConvSpec,
    out_h: usize,
    out_w: usize,
) -> Result<GridTensor> {
    spec.check(input, kernel, true)?;
    let g = transposed_geometry(input, spec, out_h, out_w)?;
    let mut out = GridTensor::zeros(&[g.batch, g.c_in, out_h, out_w]);
    adjoint_raw(&g, input.data(), kernel.data(), out.data_mut());
    Ok(out)
}

/// Gradients of `conv2d_transpose` with respect to its input and kernel.
pub fn conv2d_transpose_backward(
    input: &GridTensor,
    kernel: &GridTensor,
    spec: &ConvSpec,
    grad_out: &GridTensor,
) -> Result<(GridTensor, GridTensor)> {
    spec.check(input, kernel, true)?;
    let g = transposed_geometry(input, spec, grad_out.dim(2), grad_out.dim(3))?;
    if grad_out.shape() != [g.batch, g.c_in, g.h, g.w] {
        return shape_err(format!("grad_out {:?}", grad_out.shape()));
    }
    let mut gin = GridTensor::zeros(input.shape());
    forward_raw(&g, grad_out.data(), kernel.data(), gin.data_mut());
    let mut gk = GridTensor::zeros(kernel.shape());
    kernel_grad_raw(&g, grad_out.data(), input.data(), gk.data_mut());
    Ok((gin, gk))
}

/// Adds `bias[c]` to every element of channel `c` (axis 1).
pub fn add_channel_bias(x: &mut GridTensor, bias: &[f64]) -> Result<()> {
    if x.rank() < 2 || x.dim(1) != bias.len() {
        return shape_err(format!("bias of {} for {:?}", bias.len(), x.shape()));
    }
    let inner: usize = x.shape()[2..].iter().product();
    let c = bias.len();
    for (i, chunk) in x.data_mut().chunks_mut(inner).enumerate() {
        let b = bias[i % c];
        chunk.iter_mut().for_each(|v| *v += b);
    }
    Ok(())
}

/// Gradient of [`add_channel_bias`] with respect to the bias.
pub fn channel_bias_grad(grad: &GridTensor) -> Vec<f64> {
    let c = grad.dim(1);
    let inner: usize = grad.shape()[2..].iter().product();
    let mut g = vec![0.0; c];
    for (i, chunk) in grad.data().chunks(inner).enumerate() {
        g[i % c] += chunk.iter().sum::<f64>();
    }
    g
}

/// Affine map on the last axis: `out[.., o] = sum_i in[.., i] * w[o, i] + bias[o]`.
pub fn linear(input: &GridTensor, weight: &GridTensor, bias: &[f64]) -> Result<GridTensor> {
    let d_in = *input.shape().last().unwrap_or(&0);
    if weight.rank() != 2 || weight.dim(1) != d_in || weight.dim(0) != bias.len() {
        return shape_err(format!(
            "linear: input {:?}, weight {:?}, bias {}",
            input.shape(),
            weight.shape(),
            bias.len()
        ));
    }
    let d_out = weight.dim(0);
    let mut shape = input.shape().to_vec();
    *shape.last_mut().unwrap() = d_out;
    let mut out = GridTensor::zeros(&shape);
    for (row, orow) in input.data().chunks(d_in).zip(out.data_mut().chunks_mut(d_out)) {
        affine_into(weight.data(), bias, row, orow);
    }
    Ok(out)
}

/// Gradients of [`linear`]: `(grad_input, grad_weight, grad_bias)`.
pub fn linear_backward(
    input: &GridTensor,
    weight: &GridTensor,
    grad_out: &GridTensor,
) -> Result<(GridTensor, GridTensor, Vec<f64>)> {
    let (d_out, d_in) = (weight.dim(0), weight.dim(1));
    if grad_out.len() / d_out != input.len() / d_in || *grad_out.shape().last().unwrap() != d_out {
        return shape_err(format!("linear_backward: grad {:?} vs input {:?}", grad_out.shape(), input.shape()));
    }
    let mut gin = GridTensor::zeros(input.shape());
    let mut gw = GridTensor::zeros(weight.shape());
    let mut gb = vec![0.0; d_out];
    for ((row, grow), girow) in input
        .data()
        .chunks(d_in)
        .zip(grad_out.data().chunks(d_out))
        .zip(gin.data_mut().chunks_mut(d_in))
    {
        affine_backward(weight.data(), row, grow, girow, gw.data_mut(), &mut gb);
    }
    Ok((gin, gw, gb))
}

/// `out = W x + b` for a row-major `W` of shape `[out.len(), x.len()]`.
pub(crate) fn affine_into(w: &[f64], b: &[f64], x: &[f64], out: &mut [f64]) {
    let n = x.len();
    for (o, (wr, &bias)) in out.iter_mut().zip(w.chunks(n).zip(b)) {
        *o = bias + wr.iter().zip(x).map(|(a, v)| a * v).sum::<f64>();
    }
}

/// Accumulates the gradients of `out = W x + b` given `g = dL/dout`.
pub(crate) fn affine_backward(w: &[f64], x: &[f64], g: &[f64], gx: &mut [f64], gw: &mut [f64], gb: &mut [f64]) {
    let n = x.len();
    for (o, &go) in g.iter().enumerate() {
        gb[o] += go;
        let wr = &w[o * n..(o + 1) * n];
        let gwr = &mut gw[o * n..(o + 1) * n];
        for i in 0..n {
            gx[i] += wr[i] * go;
            gwr[i] += go * x[i];
        }
    }
}
