//! Auxiliary VSS encoder and residual main encoder.
//!
//! Both emit four feature maps at strides 4, 8, 16 and 32.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{module_fields, BatchNorm, Conv2d, ConvSpec, LayerNorm, Linear};
use crate::ss2d::{SsmConfig, VssBlock};
use crate::tensor::ops;
use crate::tensor::{Scalar, Tensor};

/// Every encoder input side must be a multiple of this.
pub const INPUT_MULTIPLE: usize = 32;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AuxEncoderConfig {
    pub patch_size: usize,
    pub dims: [usize; 4],
    pub depths: [usize; 4],
    pub ssm: SsmConfig,
}

impl Default for AuxEncoderConfig {
    fn default() -> Self {
        AuxEncoderConfig {
            patch_size: 4,
            dims: [96, 192, 384, 768],
            depths: [2, 2, 9, 2],
            ssm: SsmConfig::default(),
        }
    }
}

impl AuxEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size != 4 {
            return Err(Error::Config("aux patch size must be 4".into()));
        }
        if self.dims[0] == 0 || self.dims.windows(2).any(|p| p[1] != 2 * p[0]) {
            return Err(Error::Config(format!(
                "aux.dims must double per stage, got {:?}",
                self.dims
            )));
        }
        self.ssm.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MainEncoderConfig {
    pub stem_width: usize,
    pub dims: [usize; 4],
    pub depths: [usize; 4],
}

impl Default for MainEncoderConfig {
    fn default() -> Self {
        MainEncoderConfig {
            stem_width: 64,
            dims: [64, 128, 256, 512],
            depths: [2, 2, 2, 2],
        }
    }
}

impl MainEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stem_width == 0 || self.dims.contains(&0) || self.depths.contains(&0) {
            return Err(Error::Config(
                "main encoder widths and depths must be positive".into(),
            ));
        }
        Ok(())
    }
}

pub fn check_input_size(op: &'static str, h: usize, w: usize, multiple: usize) -> Result<()> {
    if h == 0 || w == 0 || !h.is_multiple_of(multiple) || !w.is_multiple_of(multiple) {
        return Err(Error::shape(
            op,
            format!("spatial size {h}x{w} must be a positive multiple of {multiple}"),
        ));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchEmbed<T = f32> {
    pub conv: Conv2d<T>,
    pub norm: LayerNorm<T>,
}

module_fields!(PatchEmbed { conv => "conv", norm => "norm" });

fn embed_spec(cin: usize, c: usize) -> ConvSpec {
    ConvSpec::new(cin, c, 4).stride(4).padding(0).bias(true)
}

impl<T: Scalar> PatchEmbed<T> {
    pub fn zeros(cin: usize, c: usize) -> Self {
        PatchEmbed {
            conv: Conv2d::zeros(embed_spec(cin, c)),
            norm: LayerNorm::new(c),
        }
    }

    pub fn init(cin: usize, c: usize, rng: &mut impl Rng) -> Self {
        PatchEmbed {
            conv: Conv2d::init(embed_spec(cin, c), rng),
            norm: LayerNorm::new(c),
        }
    }

    pub fn param_count(cin: usize, c: usize) -> usize {
        embed_spec(cin, c).param_count() + 2 * c
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (h, w, _) = x.dims3("patch_embed")?;
        check_input_size("patch_embed", h, w, 4)?;
        self.norm.forward(&self.conv.forward(x)?)
    }
}

/// Gather each 2×2 neighbourhood into `4C` channels, ordered
/// `(0,0), (1,0), (0,1), (1,1)` as `(row, col)` offsets.
pub fn space_to_depth<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (h, w, c) = x.dims3("patch_merge")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(
            "patch_merge",
            format!("spatial size {h}x{w} must be even"),
        ));
    }
    let src = x.data();
    let mut out = Vec::with_capacity(x.len());
    for r in (0..h).step_by(2) {
        for col in (0..w).step_by(2) {
            for (dr, dc) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                let p = (r + dr) * w + col + dc;
                out.extend_from_slice(&src[p * c..(p + 1) * c]);
            }
        }
    }
    Tensor::new([h / 2, w / 2, 4 * c], out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchMerge<T = f32> {
    pub norm: LayerNorm<T>,
    /// `4C -> 2C`, no bias.
    pub reduction: Linear<T>,
}

module_fields!(PatchMerge { norm => "norm", reduction => "reduction" });

impl<T: Scalar> PatchMerge<T> {
    pub fn zeros(c: usize) -> Self {
        PatchMerge {
            norm: LayerNorm::new(4 * c),
            reduction: Linear::zeros(4 * c, 2 * c, false),
        }
    }

    pub fn init(c: usize, rng: &mut impl Rng) -> Self {
        PatchMerge {
            norm: LayerNorm::new(4 * c),
            reduction: Linear::init(4 * c, 2 * c, false, rng),
        }
    }

    pub fn param_count(c: usize) -> usize {
        8 * c + 8 * c * c
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.reduction.forward(&self.norm.forward(&space_to_depth(x)?)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AuxStage<T = f32> {
    pub merge: Option<PatchMerge<T>>,
    pub blocks: Vec<VssBlock<T>>,
}

module_fields!(AuxStage { merge => "merge", blocks => "block" });

#[derive(Debug, Clone, PartialEq)]
pub struct AuxEncoder<T = f32> {
    pub embed: PatchEmbed<T>,
    pub stages: Vec<AuxStage<T>>,
}

module_fields!(AuxEncoder { embed => "embed", stages => "stage" });

impl<T: Scalar> AuxEncoder<T> {
    pub fn zeros(cin: usize, cfg: &AuxEncoderConfig) -> Self {
        AuxEncoder {
            embed: PatchEmbed::zeros(cin, cfg.dims[0]),
            stages: (0..4)
                .map(|i| AuxStage {
                    merge: (i > 0).then(|| PatchMerge::zeros(cfg.dims[i - 1])),
                    blocks: (0..cfg.depths[i])
                        .map(|_| VssBlock::zeros(cfg.dims[i], &cfg.ssm))
                        .collect(),
                })
                .collect(),
        }
    }

    pub fn init(cin: usize, cfg: &AuxEncoderConfig, rng: &mut impl Rng) -> Self {
        let embed = PatchEmbed::init(cin, cfg.dims[0], rng);
        let stages = (0..4)
            .map(|i| AuxStage {
                merge: (i > 0).then(|| PatchMerge::init(cfg.dims[i - 1], rng)),
                blocks: (0..cfg.depths[i])
                    .map(|_| VssBlock::init(cfg.dims[i], &cfg.ssm, rng))
                    .collect(),
            })
            .collect();
        AuxEncoder { embed, stages }
    }

    pub fn param_count(cin: usize, cfg: &AuxEncoderConfig) -> usize {
        let mut n = PatchEmbed::<T>::param_count(cin, cfg.dims[0]);
        for i in 0..4 {
            if i > 0 {
                n += PatchMerge::<T>::param_count(cfg.dims[i - 1]);
            }
            n += cfg.depths[i] * VssBlock::<T>::param_count(cfg.dims[i], &cfg.ssm);
        }
        n
    }

    pub fn flops(cin: usize, cfg: &AuxEncoderConfig, h: usize, w: usize) -> u64 {
        let mut n = embed_spec(cin, cfg.dims[0]).flops(h, w);
        let (mut hs, mut ws) = (h / 4, w / 4);
        for i in 0..4 {
            if i > 0 {
                hs /= 2;
                ws /= 2;
                let c = cfg.dims[i - 1];
                n += 2 * (hs * ws) as u64 * (4 * c * 2 * c) as u64;
            }
            n += cfg.depths[i] as u64 * VssBlock::<T>::flops(cfg.dims[i], &cfg.ssm, hs, ws);
        }
        n
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<[Tensor<T>; 4]> {
        let (h, w, _) = x.dims3("aux_encoder")?;
        check_input_size("aux_encoder", h, w, INPUT_MULTIPLE)?;
        let mut f = self.embed.forward(x)?;
        let mut outs = Vec::with_capacity(4);
        for stage in &self.stages {
            if let Some(m) = &stage.merge {
                f = m.forward(&f)?;
            }
            for b in &stage.blocks {
                f = b.forward(&f)?;
            }
            outs.push(f.clone());
        }
        Ok(outs.try_into().expect("four stages"))
    }
}

/// Two 3×3 convolutions with batch norm and an identity or projected
/// shortcut; ReLU after the sum.
#[derive(Debug, Clone, PartialEq)]
pub struct BasicBlock<T = f32> {
    pub conv1: Conv2d<T>,
    pub bn1: BatchNorm<T>,
    pub conv2: Conv2d<T>,
    pub bn2: BatchNorm<T>,
    pub downsample: Option<Downsample<T>>,
}

module_fields!(BasicBlock {
    conv1 => "conv1",
    bn1 => "bn1",
    conv2 => "conv2",
    bn2 => "bn2",
    downsample => "downsample",
});

#[derive(Debug, Clone, PartialEq)]
pub struct Downsample<T = f32> {
    pub conv: Conv2d<T>,
    pub bn: BatchNorm<T>,
}

module_fields!(Downsample { conv => "conv", bn => "bn" });

struct BlockSpecs {
    conv1: ConvSpec,
    conv2: ConvSpec,
    down: Option<ConvSpec>,
}

fn block_specs(cin: usize, cout: usize, stride: usize) -> BlockSpecs {
    BlockSpecs {
        conv1: ConvSpec::new(cin, cout, 3).stride(stride),
        conv2: ConvSpec::new(cout, cout, 3),
        down: (stride != 1 || cin != cout).then(|| ConvSpec::new(cin, cout, 1).stride(stride)),
    }
}

impl<T: Scalar> BasicBlock<T> {
    fn make(cin: usize, cout: usize, stride: usize, mut conv: impl FnMut(ConvSpec) -> Conv2d<T>) -> Self {
        let s = block_specs(cin, cout, stride);
        BasicBlock {
            conv1: conv(s.conv1),
            bn1: BatchNorm::new(cout),
            conv2: conv(s.conv2),
            bn2: BatchNorm::new(cout),
            downsample: s.down.map(|d| Downsample {
                conv: conv(d),
                bn: BatchNorm::new(cout),
            }),
        }
    }

    pub fn zeros(cin: usize, cout: usize, stride: usize) -> Self {
        Self::make(cin, cout, stride, Conv2d::zeros)
    }

    pub fn init(cin: usize, cout: usize, stride: usize, rng: &mut impl Rng) -> Self {
        Self::make(cin, cout, stride, |s| Conv2d::init(s, rng))
    }

    pub fn param_count(cin: usize, cout: usize, stride: usize) -> usize {
        let s = block_specs(cin, cout, stride);
        s.conv1.param_count()
            + s.conv2.param_count()
            + 4 * cout
            + s.down.map_or(0, |d| d.param_count() + 2 * cout)
    }

    pub fn flops(cin: usize, cout: usize, stride: usize, h: usize, w: usize) -> u64 {
        let s = block_specs(cin, cout, stride);
        let (ho, wo) = (s.conv1.out_size(h), s.conv1.out_size(w));
        s.conv1.flops(h, w) + s.conv2.flops(ho, wo) + s.down.map_or(0, |d| d.flops(h, w))
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = ops::relu(&self.bn1.forward(&self.conv1.forward(x)?)?);
        let y = self.bn2.forward(&self.conv2.forward(&y)?)?;
        let shortcut = match &self.downsample {
            Some(d) => d.bn.forward(&d.conv.forward(x)?)?,
            None => x.clone(),
        };
        Ok(ops::relu(&y.add(&shortcut)?))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stem<T = f32> {
    pub conv: Conv2d<T>,
    pub bn: BatchNorm<T>,
}

module_fields!(Stem { conv => "conv", bn => "bn" });

fn stem_spec(cin: usize, c: usize) -> ConvSpec {
    ConvSpec::new(cin, c, 7).stride(2).padding(3)
}

impl<T: Scalar> Stem<T> {
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = ops::relu(&self.bn.forward(&self.conv.forward(x)?)?);
        ops::max_pool2d(&y, 3, 2, 1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MainStage<T = f32> {
    pub blocks: Vec<BasicBlock<T>>,
}

module_fields!(MainStage { blocks => "block" });

#[derive(Debug, Clone, PartialEq)]
pub struct MainEncoder<T = f32> {
    pub stem: Stem<T>,
    pub stages: Vec<MainStage<T>>,
}

module_fields!(MainEncoder { stem => "stem", stages => "stage" });

/// `(cin, cout, stride)` of every block, stage by stage.
fn main_layout(cfg: &MainEncoderConfig) -> Vec<Vec<(usize, usize, usize)>> {
    let mut cin = cfg.stem_width;
    (0..4)
        .map(|i| {
            (0..cfg.depths[i])
                .map(|j| {
                    let stride = if i > 0 && j == 0 { 2 } else { 1 };
                    let b = (cin, cfg.dims[i], stride);
                    cin = cfg.dims[i];
                    b
                })
                .collect()
        })
        .collect()
}

impl<T: Scalar> MainEncoder<T> {
    pub fn zeros(cin: usize, cfg: &MainEncoderConfig) -> Self {
        MainEncoder {
            stem: Stem {
                conv: Conv2d::zeros(stem_spec(cin, cfg.stem_width)),
                bn: BatchNorm::new(cfg.stem_width),
            },
            stages: main_layout(cfg)
                .into_iter()
                .map(|st| MainStage {
                    blocks: st.into_iter().map(|(a, b, s)| BasicBlock::zeros(a, b, s)).collect(),
                })
                .collect(),
        }
    }

    pub fn init(cin: usize, cfg: &MainEncoderConfig, rng: &mut impl Rng) -> Self {
        MainEncoder {
            stem: Stem {
                conv: Conv2d::init(stem_spec(cin, cfg.stem_width), rng),
                bn: BatchNorm::new(cfg.stem_width),
            },
            stages: main_layout(cfg)
                .into_iter()
                .map(|st| MainStage {
                    blocks: st
                        .into_iter()
                        .map(|(a, b, s)| BasicBlock::init(a, b, s, rng))
                        .collect(),
                })
                .collect(),
        }
    }

    pub fn param_count(cin: usize, cfg: &MainEncoderConfig) -> usize {
        let stem = stem_spec(cin, cfg.stem_width).param_count() + 2 * cfg.stem_width;
        stem + main_layout(cfg)
            .iter()
            .flatten()
            .map(|&(a, b, s)| BasicBlock::<T>::param_count(a, b, s))
            .sum::<usize>()
    }

    pub fn flops(cin: usize, cfg: &MainEncoderConfig, h: usize, w: usize) -> u64 {
        let stem = stem_spec(cin, cfg.stem_width);
        let mut n = stem.flops(h, w);
        let (mut hs, mut ws) = (h / 4, w / 4);
        for &(a, b, s) in main_layout(cfg).iter().flatten() {
            n += BasicBlock::<T>::flops(a, b, s, hs, ws);
            hs /= s;
            ws /= s;
        }
        n
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<[Tensor<T>; 4]> {
        let (h, w, _) = x.dims3("main_encoder")?;
        check_input_size("main_encoder", h, w, INPUT_MULTIPLE)?;
        let mut f = self.stem.forward(x)?;
        let mut outs = Vec::with_capacity(4);
        for stage in &self.stages {
            for b in &stage.blocks {
                f = b.forward(&f)?;
            }
            outs.push(f.clone());
        }
        Ok(outs.try_into().expect("four stages"))
    }

    /// Copy with every conv/BN pair folded into one biased convolution.
    /// Each BN becomes the identity map up to rounding.
    pub fn fold_batch_norm(&self) -> Self {
        fn fold<T: Scalar>(conv: &mut Conv2d<T>, bn: &mut BatchNorm<T>) {
            *conv = bn.fold_into(conv);
            let c = bn.gamma.len();
            *bn = BatchNorm::new(c);
            bn.gamma = Tensor::full([c], T::from_f64((1.0 + crate::nn::BATCH_NORM_EPS).sqrt()));
        }
        let mut m = self.clone();
        fold(&mut m.stem.conv, &mut m.stem.bn);
        for b in m.stages.iter_mut().flat_map(|s| s.blocks.iter_mut()) {
            fold(&mut b.conv1, &mut b.bn1);
            fold(&mut b.conv2, &mut b.bn2);
            if let Some(d) = &mut b.downsample {
                fold(&mut d.conv, &mut d.bn);
            }
        }
        m
    }
}
