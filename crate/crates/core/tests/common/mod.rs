//! Independent oracles shared by the integration tests. Nothing here calls
//! the code paths it is used to check.
#![allow(dead_code, clippy::needless_range_loop)]

use rand::Rng;
use rs3mamba::init::{rng_from_seed, ModelRng};
use rs3mamba::ssm::S6Params;
use rs3mamba::Tensor;

pub fn rng(seed: u64) -> ModelRng {
    rng_from_seed(seed)
}

pub fn rand_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
}

pub fn rand_s6(d: usize, n: usize, r: usize, rng: &mut impl Rng) -> S6Params<f64> {
    S6Params {
        a_log: rand_tensor(&[d, n], -1.0, 1.0, rng),
        d_skip: rand_tensor(&[d], -1.0, 1.0, rng),
        x_proj: rand_tensor(&[d, r + 2 * n], -0.7, 0.7, rng),
        dt_proj: rand_tensor(&[r, d], -0.7, 0.7, rng),
        dt_bias: rand_tensor(&[d], -1.0, 0.5, rng),
    }
}

/// Direct loop S6: projections, softplus, explicit hidden state.
pub fn s6_loop_oracle(x: &Tensor<f64>, p: &S6Params<f64>) -> Vec<f64> {
    let (l, d) = (x.shape()[0], x.shape()[1]);
    let n = p.a_log.shape()[1];
    let r = p.dt_proj.shape()[0];
    let w = r + 2 * n;
    let xp = p.x_proj.data();
    let mut h = vec![vec![0.0f64; n]; d];
    let mut y = vec![0.0; l * d];
    for t in 0..l {
        let xt = &x.data()[t * d..(t + 1) * d];
        let mut z = vec![0.0; w];
        for q in 0..w {
            for j in 0..d {
                z[q] += xt[j] * xp[j * w + q];
            }
        }
        for j in 0..d {
            let mut raw = p.dt_bias.data()[j];
            for q in 0..r {
                raw += z[q] * p.dt_proj.data()[q * d + j];
            }
            let delta = (1.0 + raw.exp()).ln();
            let mut acc = 0.0;
            for k in 0..n {
                let a = -p.a_log.data()[j * n + k].exp();
                h[j][k] = (delta * a).exp() * h[j][k] + delta * z[r + k] * xt[j];
                acc += z[r + n + k] * h[j][k];
            }
            y[t * d + j] = acc + p.d_skip.data()[j] * xt[j];
        }
    }
    y
}

/// Central finite difference of scalar `f` with respect to every entry of
/// `v`, step `h`.
pub fn central_diff(v: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut work = v.to_vec();
    (0..v.len())
        .map(|i| {
            let orig = work[i];
            work[i] = orig + h;
            let fp = f(&work);
            work[i] = orig - h;
            let fm = f(&work);
            work[i] = orig;
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

/// Normwise relative error `max|a-b| / max|b|`, absolute when `b` is zero.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let d = a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    let s = b.iter().fold(0.0f64, |m, y| m.max(y.abs()));
    if s == 0.0 {
        d
    } else {
        d / s
    }
}

/// Naive six-loop convolution, kernel `[Kh, Kw, Cin/groups, Cout]`.
#[allow(clippy::too_many_arguments)]
pub fn conv_oracle(
    x: &Tensor<f64>,
    k: &Tensor<f64>,
    bias: Option<&Tensor<f64>>,
    stride: usize,
    pad: usize,
    groups: usize,
) -> Tensor<f64> {
    let (h, w, cin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (kh, kw, cg, cout) = (k.shape()[0], k.shape()[1], k.shape()[2], k.shape()[3]);
    let og = cout / groups;
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; ho * wo * cout];
    for oy in 0..ho {
        for ox in 0..wo {
            for co in 0..cout {
                let g = co / og;
                let mut acc = bias.map_or(0.0, |b| b.data()[co]);
                for ky in 0..kh {
                    for kx in 0..kw {
                        for ci in 0..cg {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            let xv = x.data()[(iy as usize * w + ix as usize) * cin + g * cg + ci];
                            acc += xv * k.data()[((ky * kw + kx) * cg + ci) * cout + co];
                        }
                    }
                }
                out[(oy * wo + ox) * cout + co] = acc;
            }
        }
    }
    Tensor::new([ho, wo, cout], out).unwrap()
}

pub fn matmul_oracle(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for q in 0..k {
                c[i * n + j] += a[i * k + q] * b[q * n + j];
            }
        }
    }
    c
}

pub fn layer_norm_oracle(x: &Tensor<f64>, g: &[f64], b: &[f64], eps: f64) -> Tensor<f64> {
    let c = x.shape()[x.ndim() - 1];
    let mut out = Vec::new();
    for row in x.data().chunks(c) {
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
        for i in 0..c {
            out.push((row[i] - mean) / (var + eps).sqrt() * g[i] + b[i]);
        }
    }
    Tensor::new(x.shape().to_vec(), out).unwrap()
}

pub fn silu(v: f64) -> f64 {
    v / (1.0 + (-v).exp())
}

/// Window attention computed window by window from explicit token lists.
/// Padding tokens are zeros and take part in attention.
#[allow(clippy::too_many_arguments)]
pub fn window_msa_oracle(
    x: &Tensor<f64>,
    qkv_w: &Tensor<f64>,
    qkv_b: &[f64],
    proj_w: &Tensor<f64>,
    proj_b: &[f64],
    rel_bias: &Tensor<f64>,
    window: usize,
    heads: usize,
) -> Tensor<f64> {
    let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let hd = c / heads;
    let rows = h.div_ceil(window);
    let cols = w.div_ceil(window);
    let mut out = vec![0.0; h * w * c];
    let affine = |v: &[f64], wt: &Tensor<f64>, b: &[f64]| -> Vec<f64> {
        let dout = wt.shape()[1];
        (0..dout)
            .map(|o| b[o] + v.iter().enumerate().map(|(i, a)| a * wt.data()[i * dout + o]).sum::<f64>())
            .collect()
    };
    for wr in 0..rows {
        for wc in 0..cols {
            let mut coords = Vec::new();
            let mut toks = Vec::new();
            for dy in 0..window {
                for dx in 0..window {
                    let (y, xx) = (wr * window + dy, wc * window + dx);
                    let v = if y < h && xx < w {
                        x.data()[(y * w + xx) * c..][..c].to_vec()
                    } else {
                        vec![0.0; c]
                    };
                    coords.push((dy as isize, dx as isize, y, xx));
                    toks.push(affine(&v, qkv_w, qkv_b));
                }
            }
            let n = toks.len();
            let mut mixed = vec![vec![0.0; c]; n];
            for head in 0..heads {
                for i in 0..n {
                    let mut s: Vec<f64> = (0..n)
                        .map(|j| {
                            let dot: f64 = (0..hd).map(|d| toks[i][head * hd + d] * toks[j][c + head * hd + d]).sum();
                            let (ry, rx) = (coords[i].0 - coords[j].0, coords[i].1 - coords[j].1);
                            let idx = (ry + window as isize - 1) as usize * (2 * window - 1)
                                + (rx + window as isize - 1) as usize;
                            dot / (hd as f64).sqrt() + rel_bias.data()[idx * heads + head]
                        })
                        .collect();
                    let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    s.iter_mut().for_each(|v| *v = (*v - m).exp());
                    let z: f64 = s.iter().sum();
                    for d in 0..hd {
                        mixed[i][head * hd + d] = (0..n).map(|j| s[j] / z * toks[j][2 * c + head * hd + d]).sum();
                    }
                }
            }
            for (i, &(_, _, y, xx)) in coords.iter().enumerate() {
                if y < h && xx < w {
                    out[(y * w + xx) * c..][..c].copy_from_slice(&affine(&mixed[i], proj_w, proj_b));
                }
            }
        }
    }
    Tensor::new([h, w, c], out).unwrap()
}

/// Max pooling with `-inf` padding.
pub fn max_pool_oracle(x: &Tensor<f64>, k: usize, stride: usize, pad: usize) -> Tensor<f64> {
    let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (w + 2 * pad - k) / stride + 1;
    let mut out = vec![f64::NEG_INFINITY; ho * wo * c];
    for oy in 0..ho {
        for ox in 0..wo {
            for ky in 0..k {
                for kx in 0..k {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let ix = (ox * stride + kx) as isize - pad as isize;
                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                        continue;
                    }
                    for ch in 0..c {
                        let v = x.data()[(iy as usize * w + ix as usize) * c + ch];
                        let o = &mut out[(oy * wo + ox) * c + ch];
                        *o = o.max(v);
                    }
                }
            }
        }
    }
    Tensor::new([ho, wo, c], out).unwrap()
}

/// Worst relative error of analytic S6 gradients against central differences
/// of `<dy, y>` through [`s6_loop_oracle`].
pub fn s6_fd_error(l: usize, d: usize, n: usize, r: usize, seed: u64) -> f64 {
    let mut g = rng(seed);
    let p = rand_s6(d, n, r, &mut g);
    let x = rand_tensor(&[l, d], -1.0, 1.0, &mut g);
    let dy = rand_tensor(&[l, d], -1.0, 1.0, &mut g);
    let (dx, gp) = rs3mamba::ssm::s6_backward(&x, &p, &dy).unwrap();
    let loss = |x: &Tensor<f64>, p: &S6Params<f64>| -> f64 {
        let y = s6_loop_oracle(x, p);
        y.iter().zip(dy.data()).map(|(a, b)| a * b).sum()
    };
    let h = 1e-5;
    let mut worst = 0.0f64;
    let fdx = central_diff(x.data(), h, |v| loss(&Tensor::new([l, d], v.to_vec()).unwrap(), &p));
    worst = worst.max(rel_err(dx.data(), &fdx));
    type Field = fn(&mut S6Params<f64>) -> &mut Tensor<f64>;
    let fields: [(Field, &Tensor<f64>); 5] = [
        (|q| &mut q.a_log, &gp.a_log),
        (|q| &mut q.d_skip, &gp.d_skip),
        (|q| &mut q.x_proj, &gp.x_proj),
        (|q| &mut q.dt_proj, &gp.dt_proj),
        (|q| &mut q.dt_bias, &gp.dt_bias),
    ];
    for (field, grad) in fields {
        let mut q = p.clone();
        let base = field(&mut q).clone();
        let fd = central_diff(base.data(), h, |v| {
            *field(&mut q) = Tensor::new(base.shape().to_vec(), v.to_vec()).unwrap();
            loss(&x, &q)
        });
        worst = worst.max(rel_err(grad.data(), &fd));
    }
    worst
}
