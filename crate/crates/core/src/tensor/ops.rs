//! Forward and backward kernels for the fixed operator set.
//!
//! These are plain functions over [`Tensor`] values. The tape in
//! [`crate::autograd`] records calls to them and wires the backward kernels
//! together; inference code that never differentiates can call them directly.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Row-major `c = op(a)·op(b) + beta·c` where `op` optionally transposes.
///
/// `a` is `m×k` (or `k×m` when `a_t`), `b` is `k×n` (or `n×k` when `b_t`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, beta: f64, c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices hold exactly m·k, k·n and m·n elements (checked above)
    // and the strides address only those elements.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    fn patch_len(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Unfolds `C×H×W` into `(C·k·k) × (Ho·Wo)` patches, zero outside the image.
pub(crate) fn im2col(x: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let p = g.positions();
    let mut cols = vec![0.0; g.patch_len() * p];
    for c in 0..g.channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kernel {
            for kj in 0..g.kernel {
                let row = (c * g.kernel + ki) * g.kernel + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let src_row = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    let dst_row = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    for (ox, d) in dst_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.width as isize {
                            *d = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters patch columns back onto `C×H×W`, accumulating.
pub(crate) fn col2im(cols: &[f64], g: &ConvGeometry, out: &mut [f64]) {
    let p = g.positions();
    for c in 0..g.channels {
        let plane = &mut out[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kernel {
            for kj in 0..g.kernel {
                let row = (c * g.kernel + ki) * g.kernel + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst_row = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.width as isize {
                            dst_row[ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

fn conv_geometry(x: &Tensor, w: &Tensor, bias: &Tensor, stride: usize, padding: usize) -> Result<ConvGeometry> {
    let (c, h, wd) = x.dims3()?;
    let [out_c, in_c, kh, kw] = w.shape()[..] else {
        return Err(Error::shape("conv2d", "weight rank", 4, w.ndim()));
    };
    if in_c != c {
        return Err(Error::shape("conv2d", "input channels", in_c, c));
    }
    if kh != kw {
        return Err(Error::shape("conv2d", "kernel width", kh, kw));
    }
    if kh % 2 == 0 {
        return Err(Error::invalid("conv2d", format!("kernel size {kh} must be odd")));
    }
    if stride == 0 {
        return Err(Error::invalid("conv2d", "stride must be at least 1"));
    }
    if bias.len() != out_c {
        return Err(Error::shape("conv2d", "bias length", out_c, bias.len()));
    }
    if h + 2 * padding < kh {
        return Err(Error::shape("conv2d", "padded input height", kh, h + 2 * padding));
    }
    if wd + 2 * padding < kh {
        return Err(Error::shape("conv2d", "padded input width", kh, wd + 2 * padding));
    }
    Ok(ConvGeometry {
        channels: c,
        height: h,
        width: wd,
        kernel: kh,
        stride,
        padding,
        out_h: (h + 2 * padding - kh) / stride + 1,
        out_w: (wd + 2 * padding - kh) / stride + 1,
    })
}

/// Cross-correlation of `C×H×W` input with `Cout×C×k×k` weights.
pub fn conv2d(x: &Tensor, w: &Tensor, bias: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    conv2d_with_cols(x, w, bias, stride, padding).map(|(out, _)| out)
}

/// Forward pass that also returns the unfolded input needed by the backward pass.
pub(crate) fn conv2d_with_cols(
    x: &Tensor,
    w: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<(Tensor, Vec<f64>)> {
    let g = conv_geometry(x, w, bias, stride, padding)?;
    let out_c = w.shape()[0];
    let p = g.positions();
    let cols = if g.kernel == 1 && g.stride == 1 && g.padding == 0 {
        x.data().to_vec()
    } else {
        im2col(x.data(), &g)
    };
    let mut out = Vec::with_capacity(out_c * p);
    for &b in bias.data() {
        out.extend(std::iter::repeat(b).take(p));
    }
    gemm(out_c, g.patch_len(), p, w.data(), false, &cols, false, 1.0, &mut out);
    Ok((Tensor::from_parts(vec![out_c, g.out_h, g.out_w], out), cols))
}

pub(crate) struct ConvGrads {
    pub input: Tensor,
    pub weight: Tensor,
    pub bias: Tensor,
}

pub(crate) fn conv2d_backward(
    grad_out: &Tensor,
    x: &Tensor,
    w: &Tensor,
    cols: &[f64],
    stride: usize,
    padding: usize,
) -> ConvGrads {
    let (c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (out_c, k) = (w.shape()[0], w.shape()[2]);
    let g = ConvGeometry {
        channels: c,
        height: h,
        width: wd,
        kernel: k,
        stride,
        padding,
        out_h: grad_out.shape()[1],
        out_w: grad_out.shape()[2],
    };
    let p = g.positions();
    let patch = g.patch_len();
    let go = grad_out.data();

    let mut dw = vec![0.0; out_c * patch];
    gemm(out_c, p, patch, go, false, cols, true, 0.0, &mut dw);
    let db: Vec<f64> = go.chunks_exact(p).map(|row| row.iter().sum()).collect();

    let mut dcols = vec![0.0; patch * p];
    gemm(patch, out_c, p, w.data(), true, go, false, 0.0, &mut dcols);
    let dx = if k == 1 && stride == 1 && padding == 0 {
        dcols
    } else {
        let mut dx = vec![0.0; c * h * wd];
        col2im(&dcols, &g, &mut dx);
        dx
    };
    ConvGrads {
        input: Tensor::from_parts(x.shape().to_vec(), dx),
        weight: Tensor::from_parts(w.shape().to_vec(), dw),
        bias: Tensor::from_parts(vec![out_c], db),
    }
}

fn conv_transpose_geometry(x: &Tensor, w: &Tensor, bias: &Tensor, stride: usize) -> Result<(ConvGeometry, usize)> {
    let (c, h, wd) = x.dims3()?;
    let [in_c, out_c, kh, kw] = w.shape()[..] else {
        return Err(Error::shape("conv_transpose2d", "weight rank", 4, w.ndim()));
    };
    if in_c != c {
        return Err(Error::shape("conv_transpose2d", "input channels", in_c, c));
    }
    if kh != kw {
        return Err(Error::shape("conv_transpose2d", "kernel width", kh, kw));
    }
    if stride == 0 {
        return Err(Error::invalid("conv_transpose2d", "stride must be at least 1"));
    }
    if bias.len() != out_c {
        return Err(Error::shape("conv_transpose2d", "bias length", out_c, bias.len()));
    }
    // Geometry of the forward convolution whose adjoint this is: it maps the
    // (Cout × Ho × Wo) output back onto the (Cin × H × W) input.
    let g = ConvGeometry {
        channels: out_c,
        height: (h - 1) * stride + kh,
        width: (wd - 1) * stride + kh,
        kernel: kh,
        stride,
        padding: 0,
        out_h: h,
        out_w: wd,
    };
    Ok((g, in_c))
}

/// Transposed convolution with `Cin×Cout×k×k` weights; output extent `(H−1)·stride + k`.
pub fn conv_transpose2d(x: &Tensor, w: &Tensor, bias: &Tensor, stride: usize) -> Result<Tensor> {
    let (g, in_c) = conv_transpose_geometry(x, w, bias, stride)?;
    let p = g.positions();
    let mut cols = vec![0.0; g.patch_len() * p];
    gemm(g.patch_len(), in_c, p, w.data(), true, x.data(), false, 0.0, &mut cols);
    let plane = g.height * g.width;
    let mut out = Vec::with_capacity(g.channels * plane);
    for &b in bias.data() {
        out.extend(std::iter::repeat(b).take(plane));
    }
    col2im(&cols, &g, &mut out);
    Ok(Tensor::from_parts(vec![g.channels, g.height, g.width], out))
}

pub(crate) fn conv_transpose2d_backward(grad_out: &Tensor, x: &Tensor, w: &Tensor, stride: usize) -> ConvGrads {
    let in_c = x.shape()[0];
    let out_c = w.shape()[1];
    let g = ConvGeometry {
        channels: out_c,
        height: grad_out.shape()[1],
        width: grad_out.shape()[2],
        kernel: w.shape()[2],
        stride,
        padding: 0,
        out_h: x.shape()[1],
        out_w: x.shape()[2],
    };
    let p = g.positions();
    let patch = g.patch_len();
    let gcols = im2col(grad_out.data(), &g);
    let mut dx = vec![0.0; in_c * p];
    gemm(in_c, patch, p, w.data(), false, &gcols, false, 0.0, &mut dx);
    let mut dw = vec![0.0; in_c * patch];
    gemm(in_c, p, patch, x.data(), false, &gcols, true, 0.0, &mut dw);
    let plane = g.height * g.width;
    let db = grad_out.data().chunks_exact(plane).map(|c| c.iter().sum()).collect();
    ConvGrads {
        input: Tensor::from_parts(x.shape().to_vec(), dx),
        weight: Tensor::from_parts(w.shape().to_vec(), dw),
        bias: Tensor::from_parts(vec![out_c], db),
    }
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

pub(crate) fn relu_backward(grad_out: &Tensor, x: &Tensor) -> Tensor {
    Tensor::from_parts(
        x.shape().to_vec(),
        grad_out
            .data()
            .iter()
            .zip(x.data())
            .map(|(&g, &v)| if v > 0.0 { g } else { 0.0 })
            .collect(),
    )
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::shape("matmul", "inner extent", k, k2));
    }
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, a.data(), false, b.data(), false, 0.0, &mut out);
    Ok(Tensor::from_parts(vec![m, n], out))
}

pub(crate) fn matmul_backward(grad_out: &Tensor, a: &Tensor, b: &Tensor) -> (Tensor, Tensor) {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let mut da = vec![0.0; m * k];
    gemm(m, n, k, grad_out.data(), false, b.data(), true, 0.0, &mut da);
    let mut db = vec![0.0; k * n];
    gemm(k, m, n, a.data(), true, grad_out.data(), false, 0.0, &mut db);
    (
        Tensor::from_parts(a.shape().to_vec(), da),
        Tensor::from_parts(b.shape().to_vec(), db),
    )
}

/// Softmax over contiguous rows of length `row_len`, max-subtracted.
pub(crate) fn softmax_rows(data: &[f64], row_len: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(data.len());
    for row in data.chunks_exact(row_len) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let start = out.len();
        let mut total = 0.0;
        for &v in row {
            let e = (v - max).exp();
            total += e;
            out.push(e);
        }
        out[start..].iter_mut().for_each(|e| *e /= total);
    }
    out
}

pub(crate) fn softmax_rows_backward(grad_out: &[f64], probs: &[f64], row_len: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(probs.len());
    for (g, s) in grad_out.chunks_exact(row_len).zip(probs.chunks_exact(row_len)) {
        let inner: f64 = g.iter().zip(s).map(|(a, b)| a * b).sum();
        out.extend(g.iter().zip(s).map(|(&gi, &si)| si * (gi - inner)));
    }
    out
}

/// Per-channel softmax over the spatial extent of a `K×H×W` tensor.
pub fn softmax_spatial(x: &Tensor) -> Result<Tensor> {
    let (_, h, w) = x.dims3()?;
    Ok(Tensor::from_parts(x.shape().to_vec(), softmax_rows(x.data(), h * w)))
}

/// Per-axis half-pixel interpolation table: `(lo, hi, w_lo, w_hi)` per output index.
fn upsample_taps(len: usize, factor: usize) -> Vec<(usize, usize, f64, f64)> {
    (0..len * factor)
        .map(|o| {
            let src = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(len - 1);
            let hi = (lo + 1).min(len - 1);
            let frac = src - lo as f64;
            (lo, hi, 1.0 - frac, frac)
        })
        .collect()
}

/// Bilinear upsampling by an integer factor, half-pixel (align-corners-false) convention.
pub fn bilinear_upsample(x: &Tensor, factor: usize) -> Result<Tensor> {
    let (c, h, w) = x.dims3()?;
    if factor == 0 {
        return Err(Error::invalid("bilinear_upsample", "factor must be at least 1"));
    }
    if factor == 1 {
        return Ok(x.clone());
    }
    let ty = upsample_taps(h, factor);
    let tx = upsample_taps(w, factor);
    let (oh, ow) = (h * factor, w * factor);
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let plane = x.channel(ch);
        for &(y0, y1, wy0, wy1) in &ty {
            let (r0, r1) = (&plane[y0 * w..(y0 + 1) * w], &plane[y1 * w..(y1 + 1) * w]);
            for &(x0, x1, wx0, wx1) in &tx {
                out.push(wy0 * (wx0 * r0[x0] + wx1 * r0[x1]) + wy1 * (wx0 * r1[x0] + wx1 * r1[x1]));
            }
        }
    }
    Ok(Tensor::from_parts(vec![c, oh, ow], out))
}

pub(crate) fn bilinear_upsample_backward(grad_out: &Tensor, in_shape: &[usize], factor: usize) -> Tensor {
    if factor == 1 {
        return grad_out.clone();
    }
    let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
    let ty = upsample_taps(h, factor);
    let tx = upsample_taps(w, factor);
    let ow = w * factor;
    let mut dx = vec![0.0; c * h * w];
    for ch in 0..c {
        let g = grad_out.channel(ch);
        let plane = &mut dx[ch * h * w..(ch + 1) * h * w];
        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                let v = g[oy * ow + ox];
                plane[y0 * w + x0] += wy0 * wx0 * v;
                plane[y0 * w + x1] += wy0 * wx1 * v;
                plane[y1 * w + x0] += wy1 * wx0 * v;
                plane[y1 * w + x1] += wy1 * wx1 * v;
            }
        }
    }
    Tensor::from_parts(in_shape.to_vec(), dx)
}
