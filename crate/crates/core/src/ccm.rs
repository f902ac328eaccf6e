//! Collaborative completion module.
//!
//! `F_r = window_msa(F_m) + local(F_a)`: non-shifted window self-attention
//! with a relative position bias on the main features, plus a convolutional
//! path over the auxiliary features projected to the main width.

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::nn::{module_fields, BatchNorm, Conv2d, ConvSpec, Linear};
use crate::tensor::ops::{self, softmax_row_f64};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CcmConfig {
    pub window: usize,
    pub head_dim: usize,
}

impl Default for CcmConfig {
    fn default() -> Self {
        CcmConfig {
            window: 8,
            head_dim: 32,
        }
    }
}

impl CcmConfig {
    /// `max(1, C / head_dim)`.
    pub fn heads_for(&self, c: usize) -> usize {
        (c / self.head_dim).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.head_dim == 0 {
            return Err(Error::Config("ccm.window and ccm.head_dim must be positive".into()));
        }
        Ok(())
    }
}

/// Padding bookkeeping for [`window_partition`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowLayout {
    pub h: usize,
    pub w: usize,
    pub window: usize,
    pub rows: usize,
    pub cols: usize,
}

impl WindowLayout {
    pub fn new(h: usize, w: usize, window: usize) -> Self {
        WindowLayout {
            h,
            w,
            window,
            rows: h.div_ceil(window),
            cols: w.div_ceil(window),
        }
    }

    pub fn n_windows(&self) -> usize {
        self.rows * self.cols
    }

    /// Source pixel of token `t` in window `k`, or `None` for padding.
    pub fn source(&self, k: usize, t: usize) -> Option<usize> {
        let y = (k / self.cols) * self.window + t / self.window;
        let x = (k % self.cols) * self.window + t % self.window;
        (y < self.h && x < self.w).then_some(y * self.w + x)
    }
}

/// `[H, W, C]` to `[nW, w·w, C]`, zero-padding H and W up to multiples of
/// `w`. Windows and the tokens inside them are row-major.
pub fn window_partition<T: Scalar>(x: &Tensor<T>, window: usize) -> Result<(Tensor<T>, WindowLayout)> {
    let (h, w, c) = x.dims3("window_partition")?;
    if window == 0 {
        return Err(Error::invalid("window_partition", "window must be >= 1"));
    }
    let lay = WindowLayout::new(h, w, window);
    let ww = window * window;
    let src = x.data();
    let mut out = vec![T::zero(); lay.n_windows() * ww * c];
    for k in 0..lay.n_windows() {
        for t in 0..ww {
            if let Some(p) = lay.source(k, t) {
                out[(k * ww + t) * c..][..c].copy_from_slice(&src[p * c..][..c]);
            }
        }
    }
    Ok((Tensor::new([lay.n_windows(), ww, c], out)?, lay))
}

/// Inverse of [`window_partition`]; padded tokens are dropped.
pub fn window_unpartition<T: Scalar>(windows: &Tensor<T>, lay: &WindowLayout) -> Result<Tensor<T>> {
    let ww = lay.window * lay.window;
    let (n, t_len, c) = windows.dims3("window_unpartition")?;
    if n != lay.n_windows() || t_len != ww {
        return Err(Error::shape(
            "window_unpartition",
            format!(
                "expected [{}, {ww}, C], got {:?}",
                lay.n_windows(),
                windows.shape()
            ),
        ));
    }
    let src = windows.data();
    let mut out = vec![T::zero(); lay.h * lay.w * c];
    for k in 0..n {
        for t in 0..ww {
            if let Some(p) = lay.source(k, t) {
                out[p * c..][..c].copy_from_slice(&src[(k * ww + t) * c..][..c]);
            }
        }
    }
    Tensor::new([lay.h, lay.w, c], out)
}

/// Row into the `(2w-1)²` relative bias table for tokens `i` and `j`.
pub fn relative_index(i: usize, j: usize, window: usize) -> usize {
    let (yi, xi) = (i / window, i % window);
    let (yj, xj) = (j / window, j % window);
    let dy = yi + window - 1 - yj;
    let dx = xi + window - 1 - xj;
    dy * (2 * window - 1) + dx
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowAttention<T = f32> {
    /// `C -> 3C` laid out as `[q | k | v]`, with bias.
    pub qkv: Linear<T>,
    pub proj: Linear<T>,
    /// `[(2w-1)², heads]`
    pub rel_bias: Tensor<T>,
    pub window: usize,
    pub heads: usize,
}

module_fields!(WindowAttention { qkv => "qkv", proj => "proj", rel_bias => "rel_bias" });

impl<T: Scalar> WindowAttention<T> {
    pub fn zeros(c: usize, window: usize, heads: usize) -> Self {
        WindowAttention {
            qkv: Linear::zeros(c, 3 * c, true),
            proj: Linear::zeros(c, c, true),
            rel_bias: Tensor::zeros([(2 * window - 1).pow(2), heads]),
            window,
            heads,
        }
    }

    pub fn init(c: usize, window: usize, heads: usize, rng: &mut impl Rng) -> Self {
        WindowAttention {
            qkv: Linear::init(c, 3 * c, true, rng),
            proj: Linear::init(c, c, true, rng),
            ..Self::zeros(c, window, heads)
        }
    }

    pub fn param_count(c: usize, window: usize, heads: usize) -> usize {
        Linear::<T>::param_count(c, 3 * c, true)
            + Linear::<T>::param_count(c, c, true)
            + (2 * window - 1).pow(2) * heads
    }

    /// 2 × MACs: qkv and output projections plus `q·kᵀ` and `attn·v`,
    /// over the padded grid.
    pub fn flops(c: usize, window: usize, h: usize, w: usize) -> u64 {
        let lay = WindowLayout::new(h, w, window);
        let tokens = (lay.n_windows() * window * window) as u64;
        let per_token = 4 * c * c + 2 * window * window * c;
        2 * tokens * per_token as u64
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let c = x.last_dim();
        if !c.is_multiple_of(self.heads) {
            return Err(Error::shape(
                "window_msa",
                format!("{c} channels not divisible by {} heads", self.heads),
            ));
        }
        if self.rel_bias.shape() != [(2 * self.window - 1).pow(2), self.heads] {
            return Err(Error::shape(
                "window_msa",
                format!("relative bias table has shape {:?}", self.rel_bias.shape()),
            ));
        }
        let (win, lay) = window_partition(x, self.window)?;
        let qkv = self.qkv.forward(&win)?;
        let ww = self.window * self.window;
        let hd = c / self.heads;
        let scale = (hd as f64).powf(-0.5);
        let table = self.rel_bias.data();
        let mut attended = vec![T::zero(); win.len()];
        attended
            .par_chunks_mut(ww * c)
            .zip(qkv.data().par_chunks(ww * 3 * c))
            .for_each(|(out, qkv)| {
                let mut scores = vec![0.0f64; ww];
                let mut probs = vec![0.0f64; ww];
                for head in 0..self.heads {
                    let (qo, ko, vo) = (head * hd, c + head * hd, 2 * c + head * hd);
                    for i in 0..ww {
                        let q = &qkv[i * 3 * c + qo..][..hd];
                        for (j, s) in scores.iter_mut().enumerate() {
                            let k = &qkv[j * 3 * c + ko..][..hd];
                            let dot: f64 = q.iter().zip(k).map(|(a, b)| a.as_f64() * b.as_f64()).sum();
                            let bias = table[relative_index(i, j, self.window) * self.heads + head];
                            *s = dot * scale + bias.as_f64();
                        }
                        softmax_row_f64(scores.iter().copied(), &mut probs);
                        for d in 0..hd {
                            let acc: f64 = probs
                                .iter()
                                .enumerate()
                                .map(|(j, p)| p * qkv[j * 3 * c + vo + d].as_f64())
                                .sum();
                            out[i * c + head * hd + d] = T::from_f64(acc);
                        }
                    }
                }
            });
        let attended = Tensor::new(win.shape().to_vec(), attended)?.ensure_finite("window_msa")?;
        window_unpartition(&self.proj.forward(&attended)?, &lay)
    }
}

/// 1×1 projection `C_aux -> C_main` with bias, then 3×3 conv, batch norm
/// and SiLU.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalBranch<T = f32> {
    pub proj: Conv2d<T>,
    pub conv: Conv2d<T>,
    pub bn: BatchNorm<T>,
    /// Skip batch norm and SiLU (linear-path test seam).
    pub bypass_norm_act: bool,
}

module_fields!(LocalBranch { proj => "proj", conv => "conv", bn => "bn" });

fn local_specs(c_aux: usize, c_main: usize) -> (ConvSpec, ConvSpec) {
    (
        ConvSpec::new(c_aux, c_main, 1).bias(true),
        ConvSpec::new(c_main, c_main, 3),
    )
}

impl<T: Scalar> LocalBranch<T> {
    pub fn zeros(c_aux: usize, c_main: usize) -> Self {
        let (p, k) = local_specs(c_aux, c_main);
        LocalBranch {
            proj: Conv2d::zeros(p),
            conv: Conv2d::zeros(k),
            bn: BatchNorm::new(c_main),
            bypass_norm_act: false,
        }
    }

    pub fn init(c_aux: usize, c_main: usize, rng: &mut impl Rng) -> Self {
        let (p, k) = local_specs(c_aux, c_main);
        LocalBranch {
            proj: Conv2d::init(p, rng),
            conv: Conv2d::init(k, rng),
            ..Self::zeros(c_aux, c_main)
        }
    }

    pub fn param_count(c_aux: usize, c_main: usize) -> usize {
        let (p, k) = local_specs(c_aux, c_main);
        p.param_count() + k.param_count() + 2 * c_main
    }

    pub fn flops(c_aux: usize, c_main: usize, h: usize, w: usize) -> u64 {
        let (p, k) = local_specs(c_aux, c_main);
        p.flops(h, w) + k.flops(h, w)
    }

    pub fn forward(&self, f_a: &Tensor<T>) -> Result<Tensor<T>> {
        let y = self.conv.forward(&self.proj.forward(f_a)?)?;
        if self.bypass_norm_act {
            return Ok(y);
        }
        Ok(ops::silu(&self.bn.forward(&y)?))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ccm<T = f32> {
    pub attn: WindowAttention<T>,
    pub local: LocalBranch<T>,
}

module_fields!(Ccm { attn => "attn", local => "local" });

impl<T: Scalar> Ccm<T> {
    pub fn zeros(c_main: usize, c_aux: usize, cfg: &CcmConfig) -> Self {
        Ccm {
            attn: WindowAttention::zeros(c_main, cfg.window, cfg.heads_for(c_main)),
            local: LocalBranch::zeros(c_aux, c_main),
        }
    }

    pub fn init(c_main: usize, c_aux: usize, cfg: &CcmConfig, rng: &mut impl Rng) -> Self {
        Ccm {
            attn: WindowAttention::init(c_main, cfg.window, cfg.heads_for(c_main), rng),
            local: LocalBranch::init(c_aux, c_main, rng),
        }
    }

    pub fn param_count(c_main: usize, c_aux: usize, cfg: &CcmConfig) -> usize {
        WindowAttention::<T>::param_count(c_main, cfg.window, cfg.heads_for(c_main))
            + LocalBranch::<T>::param_count(c_aux, c_main)
    }

    pub fn flops(c_main: usize, c_aux: usize, cfg: &CcmConfig, h: usize, w: usize) -> u64 {
        WindowAttention::<T>::flops(c_main, cfg.window, h, w) + LocalBranch::<T>::flops(c_aux, c_main, h, w)
    }

    pub fn forward(&self, f_m: &Tensor<T>, f_a: &Tensor<T>) -> Result<Tensor<T>> {
        let (hm, wm, _) = f_m.dims3("ccm")?;
        let (ha, wa, _) = f_a.dims3("ccm")?;
        if (hm, wm) != (ha, wa) {
            return Err(Error::shape(
                "ccm",
                format!(
                    "main features {:?} and auxiliary features {:?} differ spatially",
                    f_m.shape(),
                    f_a.shape()
                ),
            ));
        }
        let (global, local) = rayon::join(|| self.attn.forward(f_m), || self.local.forward(f_a));
        global?.add(&local?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::init::{rng_from_seed, uniform};

    #[test]
    fn partition_pads_and_inverts() {
        let x = Tensor::<f64>::from_fn([5, 5, 1], |i| i as f64 + 1.0);
        let (win, lay) = window_partition(&x, 4).unwrap();
        assert_eq!(win.shape(), [4, 16, 1]);
        // window 1 covers columns 4..8 of rows 0..4: only column 4 is real
        let w1: Vec<f64> = win.data()[16..32].to_vec();
        assert_eq!(&w1[..5], &[5.0, 0.0, 0.0, 0.0, 10.0]);
        assert_eq!(win.data().iter().filter(|&&v| v == 0.0).count(), 64 - 25);
        assert_eq!(window_unpartition(&win, &lay).unwrap(), x);
    }

    #[test]
    fn single_window_is_row_major() {
        let x = Tensor::<f32>::from_fn([3, 3, 2], |i| i as f32);
        let (win, _) = window_partition(&x, 3).unwrap();
        assert_eq!(win.data(), x.data());
    }

    #[test]
    fn relative_index_range() {
        let w = 3;
        let idx: Vec<usize> = (0..9).flat_map(|i| (0..9).map(move |j| relative_index(i, j, w))).collect();
        assert_eq!(*idx.iter().max().unwrap(), 24);
        assert_eq!(relative_index(4, 4, w), 12);
    }

    #[test]
    fn zero_value_path_gives_output_bias() {
        let mut rng = rng_from_seed(8);
        let mut a = WindowAttention::<f64>::init(8, 2, 2, &mut rng);
        let w = a.qkv.weight.clone();
        a.qkv.weight = Tensor::from_fn([8, 24], |j| if j % 24 >= 16 { 0.0 } else { w.data()[j] });
        a.proj.bias = Some(Tensor::from_fn([8], |i| i as f64));
        let x = uniform::<f64>(&[4, 4, 8], -1.0, 1.0, &mut rng);
        let y = a.forward(&x).unwrap();
        for px in y.data().chunks(8) {
            for (k, v) in px.iter().enumerate() {
                assert!((v - k as f64).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn flops_linear_in_pixels() {
        let f1 = WindowAttention::<f32>::flops(64, 8, 16, 16);
        let f2 = WindowAttention::<f32>::flops(64, 8, 32, 16);
        assert_eq!(f2, 2 * f1);
    }

    #[test]
    fn spatial_mismatch_reports_both_shapes() {
        let m = Ccm::<f32>::zeros(4, 6, &CcmConfig { window: 2, head_dim: 4 });
        let e = m
            .forward(&Tensor::zeros([4, 4, 4]), &Tensor::zeros([2, 2, 6]))
            .unwrap_err()
            .to_string();
        assert!(e.contains("[4, 4, 4]") && e.contains("[2, 2, 6]"), "{e}");
    }
}
