//! Four-direction 2-D selective scan and the visual state-space block.
//!
//! A `[H, W, C]` grid is unrolled into four sequences of length `H·W`:
//! row-major, column-major, and the reverses of both. Each sequence is
//! mixed by its own S6 layer, mapped back to grid positions and the four
//! grids are summed.

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::nn::{module_fields, Conv2d, ConvSpec, LayerNorm, Linear};
use crate::ssm::{self, default_dt_rank, S6Params};
use crate::tensor::ops;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Direction {
    RowMajor,
    ColMajor,
    RowMajorReversed,
    ColMajorReversed,
}

impl Direction {
    pub const ALL: [Direction; 4] = [
        Direction::RowMajor,
        Direction::ColMajor,
        Direction::RowMajorReversed,
        Direction::ColMajorReversed,
    ];
}

/// Grid position (`r·W + c`) visited at each sequence step.
pub fn direction_order(dir: Direction, h: usize, w: usize) -> Vec<usize> {
    let l = h * w;
    let row = |k: usize| k;
    let col = |k: usize| (k % h) * w + k / h;
    match dir {
        Direction::RowMajor => (0..l).map(row).collect(),
        Direction::ColMajor => (0..l).map(col).collect(),
        Direction::RowMajorReversed => (0..l).rev().map(row).collect(),
        Direction::ColMajorReversed => (0..l).rev().map(col).collect(),
    }
}

/// `[H, W, C]` to the sequence `[H·W, C]` for one direction.
pub fn scan_expand<T: Scalar>(x: &Tensor<T>, dir: Direction) -> Result<Tensor<T>> {
    let (h, w, c) = x.dims3("scan_expand")?;
    let src = x.data();
    let mut out = Vec::with_capacity(x.len());
    for p in direction_order(dir, h, w) {
        out.extend_from_slice(&src[p * c..(p + 1) * c]);
    }
    Tensor::new([h * w, c], out)
}

/// All four sequences in [`Direction::ALL`] order.
pub fn scan_expand_all<T: Scalar>(x: &Tensor<T>) -> Result<[Tensor<T>; 4]> {
    let [a, b, c, d] = Direction::ALL.map(|dir| scan_expand(x, dir));
    Ok([a?, b?, c?, d?])
}

/// Inverse of [`scan_expand`] applied to each sequence, then summed.
pub fn scan_merge<T: Scalar>(seqs: &[Tensor<T>; 4], h: usize, w: usize) -> Result<Tensor<T>> {
    let c = seqs[0].last_dim();
    let mut acc = vec![0.0f64; h * w * c];
    for (dir, seq) in Direction::ALL.into_iter().zip(seqs) {
        if seq.shape() != [h * w, c] {
            return Err(Error::shape(
                "scan_merge",
                format!("expected [{}, {c}], got {:?}", h * w, seq.shape()),
            ));
        }
        let data = seq.data();
        for (k, p) in direction_order(dir, h, w).into_iter().enumerate() {
            for (a, v) in acc[p * c..(p + 1) * c].iter_mut().zip(&data[k * c..(k + 1) * c]) {
                *a += v.as_f64();
            }
        }
    }
    Tensor::from_f64([h, w, c], &acc)?.ensure_finite("scan_merge")
}

/// Expand, run `mixer(direction_index, sequence)` on each direction in
/// parallel, merge.
pub fn ss2d_with<T, F>(x: &Tensor<T>, mixer: F) -> Result<Tensor<T>>
where
    T: Scalar,
    F: Fn(usize, &Tensor<T>) -> Result<Tensor<T>> + Sync,
{
    let (h, w, _) = x.dims3("ss2d")?;
    let outs: Vec<Tensor<T>> = Direction::ALL
        .par_iter()
        .enumerate()
        .map(|(i, &dir)| mixer(i, &scan_expand(x, dir)?))
        .collect::<Result<_>>()?;
    let seqs: [Tensor<T>; 4] = outs.try_into().expect("four directions");
    scan_merge(&seqs, h, w)
}

/// How the recurrence is evaluated. Both give the same result up to
/// rounding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ScanMode {
    #[default]
    Sequential,
    Chunked(usize),
}


pub fn ss2d_forward<T: Scalar>(
    x: &Tensor<T>,
    params: &[S6Params<T>],
    mode: ScanMode,
) -> Result<Tensor<T>> {
    if params.len() != 4 {
        return Err(Error::invalid(
            "ss2d",
            format!("need 4 direction parameter sets, got {}", params.len()),
        ));
    }
    ss2d_with(x, |i, seq| match mode {
        ScanMode::Sequential => ssm::s6_forward_sequential(seq, &params[i]),
        ScanMode::Chunked(chunk) => ssm::s6_forward_scan(seq, &params[i], chunk),
    })
}

/// State-space hyperparameters of a VSS block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SsmConfig {
    pub n_state: usize,
    /// `None` selects `ceil(D_inner / 16)`.
    pub dt_rank: Option<usize>,
    pub expand: usize,
    pub scan: ScanMode,
}

impl Default for SsmConfig {
    fn default() -> Self {
        SsmConfig {
            n_state: ssm::DEFAULT_N_STATE,
            dt_rank: None,
            expand: 2,
            scan: ScanMode::Sequential,
        }
    }
}

impl SsmConfig {
    pub fn d_inner(&self, c: usize) -> usize {
        self.expand * c
    }

    pub fn dt_rank_for(&self, c: usize) -> usize {
        self.dt_rank.unwrap_or_else(|| default_dt_rank(self.d_inner(c)))
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_state == 0 || self.expand == 0 || self.dt_rank == Some(0) {
            return Err(Error::Config(
                "ssm.n_state, ssm.expand and ssm.dt_rank must be positive".into(),
            ));
        }
        if let ScanMode::Chunked(0) = self.scan {
            return Err(Error::Config("scan chunk must be positive".into()));
        }
        Ok(())
    }
}

/// `x + out_proj(LN(ss2d(SiLU(dwconv(s)))) ⊙ SiLU(g))` with
/// `(s, g) = in_proj(LN(x))`.
#[derive(Debug, Clone, PartialEq)]
pub struct VssBlock<T = f32> {
    pub norm1: LayerNorm<T>,
    /// `C -> 2·D_inner`, no bias.
    pub in_proj: Linear<T>,
    /// Depthwise 3×3 over `D_inner` channels, with bias.
    pub dwconv: Conv2d<T>,
    /// One parameter set per [`Direction`].
    pub ssm: Vec<S6Params<T>>,
    pub out_norm: LayerNorm<T>,
    /// `D_inner -> C`, no bias.
    pub out_proj: Linear<T>,
    pub scan: ScanMode,
}

module_fields!(VssBlock {
    norm1 => "norm1",
    in_proj => "in_proj",
    dwconv => "dwconv",
    ssm => "ssm",
    out_norm => "out_norm",
    out_proj => "out_proj",
});

fn dwconv_spec(d: usize) -> ConvSpec {
    ConvSpec::new(d, d, 3).groups(d).bias(true)
}

impl<T: Scalar> VssBlock<T> {
    pub fn zeros(c: usize, cfg: &SsmConfig) -> Self {
        let d = cfg.d_inner(c);
        let r = cfg.dt_rank_for(c);
        VssBlock {
            norm1: LayerNorm::new(c),
            in_proj: Linear::zeros(c, 2 * d, false),
            dwconv: Conv2d::zeros(dwconv_spec(d)),
            ssm: (0..4).map(|_| S6Params::zeros(d, cfg.n_state, r)).collect(),
            out_norm: LayerNorm::new(d),
            out_proj: Linear::zeros(d, c, false),
            scan: cfg.scan,
        }
    }

    pub fn init(c: usize, cfg: &SsmConfig, rng: &mut impl Rng) -> Self {
        let d = cfg.d_inner(c);
        let r = cfg.dt_rank_for(c);
        VssBlock {
            in_proj: Linear::init(c, 2 * d, false, rng),
            dwconv: Conv2d::init(dwconv_spec(d), rng),
            ssm: (0..4).map(|_| S6Params::init(d, cfg.n_state, r, rng)).collect(),
            out_proj: Linear::init(d, c, false, rng),
            ..Self::zeros(c, cfg)
        }
    }

    pub fn param_count(c: usize, cfg: &SsmConfig) -> usize {
        let d = cfg.d_inner(c);
        2 * c
            + Linear::<T>::param_count(c, 2 * d, false)
            + dwconv_spec(d).param_count()
            + 4 * S6Params::<T>::param_count(d, cfg.n_state, cfg.dt_rank_for(c))
            + 2 * d
            + Linear::<T>::param_count(d, c, false)
    }

    /// FLOPs of one block on an `h × w` grid.
    pub fn flops(c: usize, cfg: &SsmConfig, h: usize, w: usize) -> u64 {
        let d = cfg.d_inner(c);
        let l = (h * w) as u64;
        2 * l * (c * 2 * d) as u64
            + dwconv_spec(d).flops(h, w)
            + 4 * ssm::s6_flops(h * w, d, cfg.n_state, cfg.dt_rank_for(c))
            + 2 * l * (d * c) as u64
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let d = self.out_norm.gamma.len();
        let u = self.norm1.forward(x)?;
        let (s, g) = self.in_proj.forward(&u)?.split_last(d)?;
        let s = ops::silu(&self.dwconv.forward(&s)?);
        let s = self.out_norm.forward(&ss2d_forward(&s, &self.ssm, self.scan)?)?;
        let gated = s.mul(&ops::silu(&g))?;
        x.add(&self.out_proj.forward(&gated)?)?.ensure_finite("vss_block")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::init::{rng_from_seed, uniform};

    #[test]
    fn two_by_two_orders() {
        assert_eq!(direction_order(Direction::RowMajor, 2, 2), [0, 1, 2, 3]);
        assert_eq!(direction_order(Direction::ColMajor, 2, 2), [0, 2, 1, 3]);
        assert_eq!(direction_order(Direction::RowMajorReversed, 2, 2), [3, 2, 1, 0]);
        assert_eq!(direction_order(Direction::ColMajorReversed, 2, 2), [3, 1, 2, 0]);
        assert_eq!(direction_order(Direction::ColMajor, 2, 3), [0, 3, 1, 4, 2, 5]);
    }

    #[test]
    fn merge_of_expand_is_four_times_identity() {
        let mut rng = rng_from_seed(5);
        let x = uniform::<f64>(&[3, 5, 2], -1.0, 1.0, &mut rng);
        let seqs = scan_expand_all(&x).unwrap();
        let m = scan_merge(&seqs, 3, 5).unwrap();
        assert!(m.max_abs_diff(&x.scale(4.0)) < 1e-15);
        let id = ss2d_with(&x, |_, s| Ok(s.clone())).unwrap();
        assert_eq!(id, m);
    }

    #[test]
    fn vss_with_zero_out_proj_is_identity() {
        let mut rng = rng_from_seed(6);
        let cfg = SsmConfig { n_state: 4, ..Default::default() };
        let mut blk = VssBlock::<f64>::init(4, &cfg, &mut rng);
        blk.out_proj.weight = Tensor::zeros([8, 4]);
        let x = uniform::<f64>(&[3, 3, 4], -1.0, 1.0, &mut rng);
        assert_eq!(blk.forward(&x).unwrap(), x);
    }

    #[test]
    fn param_count_matches_instance() {
        let mut rng = rng_from_seed(7);
        let cfg = SsmConfig { n_state: 4, ..Default::default() };
        let blk = VssBlock::<f32>::init(12, &cfg, &mut rng);
        use crate::nn::Module;
        assert_eq!(blk.num_params(), VssBlock::<f32>::param_count(12, &cfg));
    }
}
