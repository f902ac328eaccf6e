//! Neural kernels over [`Tensor`].
//!
//! Reductions accumulate in f64 regardless of the storage type. Parallel
//! work is split by output rows only, so each output element is produced by
//! the same sequence of operations on every run.

use rayon::prelude::*;

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Rows handled together by the GEMM micro-kernel.
const ROW_BLOCK: usize = 4;
/// Below this many multiply-adds the GEMM stays on the calling thread.
const PAR_THRESHOLD: usize = 1 << 15;

/// `c[m, n] = a[m, k] · b[k, n]`, f64 accumulation.
pub fn gemm<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let b64: Vec<f64> = b.iter().map(|v| v.as_f64()).collect();
    let mut out = vec![T::zero(); m * n];
    let kernel = |(blk, chunk): (usize, &mut [T])| {
        let row0 = blk * ROW_BLOCK;
        let rows = chunk.len() / n;
        let mut acc = vec![0.0f64; ROW_BLOCK * n];
        for kk in 0..k {
            let brow = &b64[kk * n..(kk + 1) * n];
            for r in 0..rows {
                let av = a[(row0 + r) * k + kk].as_f64();
                let accr = &mut acc[r * n..(r + 1) * n];
                for (o, &bv) in accr.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        for (o, &v) in chunk.iter_mut().zip(&acc) {
            *o = T::from_f64(v);
        }
    };
    if m * k * n >= PAR_THRESHOLD {
        out.par_chunks_mut(ROW_BLOCK * n).enumerate().for_each(kernel);
    } else {
        out.chunks_mut(ROW_BLOCK * n).enumerate().for_each(kernel);
    }
    out
}

fn check_vec<T: Scalar>(op: &'static str, name: &str, t: &Tensor<T>, len: usize) -> Result<()> {
    if t.shape() != [len] {
        return Err(Error::shape(
            op,
            format!("{name} must have shape [{len}], got {:?}", t.shape()),
        ));
    }
    Ok(())
}

/// Matrix product over the last axis: `[..., Din] × [Din, Dout] -> [..., Dout]`.
pub fn linear<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let (din, dout) = weight.dims2("linear")?;
    if input.last_dim() != din {
        return Err(Error::shape(
            "linear",
            format!(
                "input last axis {} does not match weight rows {din}",
                input.last_dim()
            ),
        ));
    }
    let rows = input.len() / din;
    let mut out = gemm(input.data(), weight.data(), rows, din, dout);
    if let Some(b) = bias {
        check_vec("linear", "bias", b, dout)?;
        for row in out.chunks_exact_mut(dout) {
            for (o, &bv) in row.iter_mut().zip(b.data()) {
                *o = *o + bv;
            }
        }
    }
    let mut shape = input.shape().to_vec();
    *shape.last_mut().unwrap() = dout;
    Tensor::new(shape, out)?.ensure_finite("linear")
}

/// 2-D cross-correlation on channels-last input.
///
/// `kernel` is `[Kh, Kw, Cin / groups, Cout]`.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
    groups: usize,
) -> Result<Tensor<T>> {
    const OP: &str = "conv2d";
    let (h, w, cin) = input.dims3(OP)?;
    let &[kh, kw, cin_g, cout] = kernel.shape() else {
        return Err(Error::shape(
            OP,
            format!("kernel must be rank 4, got {:?}", kernel.shape()),
        ));
    };
    if stride == 0 {
        return Err(Error::invalid(OP, "stride must be >= 1"));
    }
    if groups == 0 || cin % groups != 0 || cout % groups != 0 {
        return Err(Error::invalid(
            OP,
            format!("groups {groups} must divide Cin {cin} and Cout {cout}"),
        ));
    }
    if cin / groups != cin_g {
        return Err(Error::shape(
            OP,
            format!(
                "kernel expects {cin_g} input channels per group, input has {cin} channels in {groups} groups"
            ),
        ));
    }
    if h + 2 * padding < kh || w + 2 * padding < kw {
        return Err(Error::shape(
            OP,
            format!("kernel {kh}x{kw} larger than padded input {h}x{w} (pad {padding})"),
        ));
    }
    let ho = (h + 2 * padding - kh) / stride + 1;
    let wo = (w + 2 * padding - kw) / stride + 1;
    let cout_g = cout / groups;

    let mut out = if cin_g == 1 && cout_g == 1 {
        depthwise(input.data(), h, w, cin, kernel.data(), kh, kw, stride, padding, ho, wo)
    } else if kh == 1 && kw == 1 && stride == 1 && padding == 0 && groups == 1 {
        gemm(input.data(), kernel.data(), h * w, cin, cout)
    } else {
        let mut out = vec![T::zero(); ho * wo * cout];
        let kdim = kh * kw * cin_g;
        for g in 0..groups {
            let cols = im2col(input.data(), h, w, cin, g * cin_g, cin_g, kh, kw, stride, padding, ho, wo);
            let kmat: Vec<T> = if groups == 1 {
                kernel.data().to_vec()
            } else {
                let mut km = Vec::with_capacity(kdim * cout_g);
                for row in kernel.data().chunks_exact(cout) {
                    km.extend_from_slice(&row[g * cout_g..(g + 1) * cout_g]);
                }
                km
            };
            let part = gemm(&cols, &kmat, ho * wo, kdim, cout_g);
            for (p, prow) in part.chunks_exact(cout_g).enumerate() {
                out[p * cout + g * cout_g..p * cout + (g + 1) * cout_g].copy_from_slice(prow);
            }
        }
        out
    };
    if let Some(b) = bias {
        check_vec(OP, "bias", b, cout)?;
        for px in out.chunks_exact_mut(cout) {
            for (o, &bv) in px.iter_mut().zip(b.data()) {
                *o = *o + bv;
            }
        }
    }
    Tensor::new([ho, wo, cout], out)?.ensure_finite(OP)
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    x: &[T],
    h: usize,
    w: usize,
    cin: usize,
    c0: usize,
    cg: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Vec<T> {
    let kdim = kh * kw * cg;
    let mut cols = vec![T::zero(); ho * wo * kdim];
    cols.par_chunks_mut(wo * kdim).enumerate().for_each(|(oy, orow)| {
        for ox in 0..wo {
            let dst = &mut orow[ox * kdim..(ox + 1) * kdim];
            for ky in 0..kh {
                let iy = (oy * stride + ky) as isize - pad as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..kw {
                    let ix = (ox * stride + kx) as isize - pad as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let src = (iy as usize * w + ix as usize) * cin + c0;
                    let d = (ky * kw + kx) * cg;
                    dst[d..d + cg].copy_from_slice(&x[src..src + cg]);
                }
            }
        }
    });
    cols
}

#[allow(clippy::too_many_arguments)]
fn depthwise<T: Scalar>(
    x: &[T],
    h: usize,
    w: usize,
    c: usize,
    kernel: &[T],
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Vec<T> {
    let mut out = vec![T::zero(); ho * wo * c];
    out.par_chunks_mut(wo * c).enumerate().for_each(|(oy, orow)| {
        let mut acc = vec![0.0f64; c];
        for ox in 0..wo {
            acc.iter_mut().for_each(|a| *a = 0.0);
            for ky in 0..kh {
                let iy = (oy * stride + ky) as isize - pad as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..kw {
                    let ix = (ox * stride + kx) as isize - pad as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let src = &x[(iy as usize * w + ix as usize) * c..][..c];
                    let k = &kernel[(ky * kw + kx) * c..][..c];
                    for ((a, &xv), &kv) in acc.iter_mut().zip(src).zip(k) {
                        *a += xv.as_f64() * kv.as_f64();
                    }
                }
            }
            for (o, &a) in orow[ox * c..(ox + 1) * c].iter_mut().zip(&acc) {
                *o = T::from_f64(a);
            }
        }
    });
    out
}

/// Normalize over the last axis, then scale and shift.
pub fn layer_norm<T: Scalar>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<Tensor<T>> {
    const OP: &str = "layer_norm";
    if eps <= 0.0 {
        return Err(Error::invalid(OP, "eps must be positive"));
    }
    let c = input.last_dim();
    check_vec(OP, "gamma", gamma, c)?;
    check_vec(OP, "beta", beta, c)?;
    let mut out = Vec::with_capacity(input.len());
    for row in input.data().chunks_exact(c) {
        let mean = row.iter().map(|v| v.as_f64()).sum::<f64>() / c as f64;
        let var = row
            .iter()
            .map(|v| {
                let d = v.as_f64() - mean;
                d * d
            })
            .sum::<f64>()
            / c as f64;
        let inv = 1.0 / (var + eps).sqrt();
        for ((&v, g), b) in row.iter().zip(gamma.data()).zip(beta.data()) {
            out.push(T::from_f64((v.as_f64() - mean) * inv * g.as_f64() + b.as_f64()));
        }
    }
    Tensor::new(input.shape().to_vec(), out)?.ensure_finite(OP)
}

/// Inference-mode batch normalization over the last axis using stored
/// running statistics.
pub fn batch_norm<T: Scalar>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    mean: &Tensor<T>,
    var: &Tensor<T>,
    eps: f64,
) -> Result<Tensor<T>> {
    const OP: &str = "batch_norm";
    let c = input.last_dim();
    for (name, t) in [("gamma", gamma), ("beta", beta), ("mean", mean), ("var", var)] {
        check_vec(OP, name, t, c)?;
    }
    let (scale, shift) = batch_norm_affine(gamma, beta, mean, var, eps);
    let mut out = Vec::with_capacity(input.len());
    for row in input.data().chunks_exact(c) {
        for ((&v, s), b) in row.iter().zip(&scale).zip(&shift) {
            out.push(T::from_f64(v.as_f64() * s + b));
        }
    }
    Tensor::new(input.shape().to_vec(), out)?.ensure_finite(OP)
}

/// Per-channel `(scale, shift)` equivalent of an inference batch norm.
pub fn batch_norm_affine<T: Scalar>(
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    mean: &Tensor<T>,
    var: &Tensor<T>,
    eps: f64,
) -> (Vec<f64>, Vec<f64>) {
    gamma
        .data()
        .iter()
        .zip(beta.data())
        .zip(mean.data().iter().zip(var.data()))
        .map(|((g, b), (m, v))| {
            let s = g.as_f64() / (v.as_f64() + eps).sqrt();
            (s, b.as_f64() - m.as_f64() * s)
        })
        .unzip()
}

/// Softmax over the last axis with max subtraction.
pub fn softmax<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let input = input.clone().ensure_finite("softmax input")?;
    let l = input.last_dim();
    let mut out = Vec::with_capacity(input.len());
    let mut buf = vec![0.0f64; l];
    for row in input.data().chunks_exact(l) {
        softmax_row_f64(row.iter().map(|v| v.as_f64()), &mut buf);
        out.extend(buf.iter().map(|&v| T::from_f64(v)));
    }
    Tensor::new(input.shape().to_vec(), out)?.ensure_finite("softmax")
}

/// Stable softmax of `row` into `out` (same length).
pub fn softmax_row_f64(row: impl Iterator<Item = f64> + Clone, out: &mut [f64]) {
    let max = row.clone().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, v) in out.iter_mut().zip(row) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Bilinear upsampling by an integer factor with half-pixel centers
/// (`align_corners = false`), edges clamped.
pub fn upsample_bilinear<T: Scalar>(input: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    const OP: &str = "upsample_bilinear";
    let (h, w, c) = input.dims3(OP)?;
    if factor == 0 {
        return Err(Error::invalid(OP, "factor must be >= 1"));
    }
    if factor == 1 {
        return Ok(input.clone());
    }
    let (ho, wo) = (h * factor, w * factor);
    let src = |o: usize, n: usize| -> (usize, usize, f64) {
        let s = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
        let i0 = (s.floor() as usize).min(n - 1);
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, s - i0 as f64)
    };
    let xs: Vec<_> = (0..wo).map(|x| src(x, w)).collect();
    let x = input.data();
    let mut out = vec![T::zero(); ho * wo * c];
    out.par_chunks_mut(wo * c).enumerate().for_each(|(oy, orow)| {
        let (y0, y1, ly) = src(oy, h);
        for (ox, &(x0, x1, lx)) in xs.iter().enumerate() {
            let p00 = &x[(y0 * w + x0) * c..][..c];
            let p01 = &x[(y0 * w + x1) * c..][..c];
            let p10 = &x[(y1 * w + x0) * c..][..c];
            let p11 = &x[(y1 * w + x1) * c..][..c];
            for ch in 0..c {
                let top = p00[ch].as_f64() * (1.0 - lx) + p01[ch].as_f64() * lx;
                let bot = p10[ch].as_f64() * (1.0 - lx) + p11[ch].as_f64() * lx;
                orow[ox * c + ch] = T::from_f64(top * (1.0 - ly) + bot * ly);
            }
        }
    });
    Tensor::new([ho, wo, c], out)?.ensure_finite(OP)
}

/// Max pooling on channels-last input; padded cells never win.
pub fn max_pool2d<T: Scalar>(
    input: &Tensor<T>,
    k: usize,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    const OP: &str = "max_pool2d";
    let (h, w, c) = input.dims3(OP)?;
    if stride == 0 || k == 0 || padding >= k || h + 2 * padding < k || w + 2 * padding < k {
        return Err(Error::invalid(OP, format!("k={k} stride={stride} pad={padding} on {h}x{w}")));
    }
    let ho = (h + 2 * padding - k) / stride + 1;
    let wo = (w + 2 * padding - k) / stride + 1;
    let x = input.data();
    let mut out = vec![T::neg_infinity(); ho * wo * c];
    for oy in 0..ho {
        for ox in 0..wo {
            let o = &mut out[(oy * wo + ox) * c..][..c];
            for ky in 0..k {
                let iy = (oy * stride + ky) as isize - padding as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let ix = (ox * stride + kx) as isize - padding as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let src = &x[(iy as usize * w + ix as usize) * c..][..c];
                    for (a, &b) in o.iter_mut().zip(src) {
                        if b > *a {
                            *a = b;
                        }
                    }
                }
            }
        }
    }
    Tensor::new([ho, wo, c], out)?.ensure_finite(OP)
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

#[inline]
pub fn silu_f64(v: f64) -> f64 {
    v / (1.0 + (-v).exp())
}

pub fn silu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| T::from_f64(silu_f64(v.as_f64())))
}

#[inline]
pub fn softplus_f64(v: f64) -> f64 {
    if v > 20.0 {
        v
    } else {
        v.exp().ln_1p()
    }
}

#[inline]
pub fn sigmoid_f64(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}
