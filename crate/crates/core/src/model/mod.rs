//! Full network assembly: encoders, per-stage fusion, decoder.

mod archive;
mod config_file;
mod counter;
mod loss;

pub use archive::{load_weights, save_weights, ArchiveEntry, WeightArchive, ARCHIVE_MAGIC, ARCHIVE_VERSION};
pub use config_file::{format_config, parse_config, read_config};
pub use counter::{count_flops, count_params, Breakdown};
pub use loss::cross_entropy;

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::ccm::{Ccm, CcmConfig};
use crate::encoders::{check_input_size, AuxEncoder, AuxEncoderConfig, MainEncoder, MainEncoderConfig, INPUT_MULTIPLE};
use crate::error::{Error, Result};
use crate::init::rng_from_seed;
use crate::nn::{join, module_fields, Conv2d, ConvBnAct, ConvSpec, Module, ParamKind};
use crate::ss2d::{ScanMode, SsmConfig};
use crate::tensor::ops;
use crate::tensor::{Scalar, Tensor};

/// Which branches run and how their features are fused.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Ablation {
    /// Residual encoder alone.
    MainOnly,
    /// VSS encoder alone.
    AuxOnly,
    /// Both encoders, `F_m + proj(F_a)`.
    DualSum,
    /// Both encoders fused by the completion module.
    DualCcm,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [
        Ablation::MainOnly,
        Ablation::AuxOnly,
        Ablation::DualSum,
        Ablation::DualCcm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::MainOnly => "main_only",
            Ablation::AuxOnly => "aux_only",
            Ablation::DualSum => "dual_sum",
            Ablation::DualCcm => "dual_ccm",
        }
    }

    pub fn uses_main(self) -> bool {
        self != Ablation::AuxOnly
    }

    pub fn uses_aux(self) -> bool {
        self != Ablation::MainOnly
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub n_classes: usize,
    pub input_channels: usize,
    pub aux: AuxEncoderConfig,
    pub main: MainEncoderConfig,
    pub ccm: CcmConfig,
    /// Channel width of the decoder pathway.
    pub decoder_width: usize,
    pub ablation: Ablation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_classes: 6,
            input_channels: 3,
            aux: AuxEncoderConfig::default(),
            main: MainEncoderConfig::default(),
            ccm: CcmConfig::default(),
            decoder_width: 32,
            ablation: Ablation::DualCcm,
        }
    }
}

impl ModelConfig {
    /// Narrow, shallow configuration for fast checks; same topology as the
    /// default.
    pub fn small() -> Self {
        ModelConfig {
            aux: AuxEncoderConfig {
                dims: [8, 16, 32, 64],
                depths: [1, 1, 1, 1],
                ssm: SsmConfig {
                    n_state: 4,
                    ..SsmConfig::default()
                },
                ..AuxEncoderConfig::default()
            },
            main: MainEncoderConfig {
                stem_width: 8,
                dims: [8, 16, 32, 64],
                depths: [1, 1, 1, 1],
            },
            ccm: CcmConfig {
                window: 4,
                head_dim: 8,
            },
            decoder_width: 8,
            ..ModelConfig::default()
        }
    }

    pub fn with_ablation(mut self, ablation: Ablation) -> Self {
        self.ablation = ablation;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes == 0 || self.n_classes > 255 {
            return Err(Error::Config(format!(
                "n_classes must be in 1..=255, got {}",
                self.n_classes
            )));
        }
        if self.input_channels == 0 || self.decoder_width == 0 {
            return Err(Error::Config(
                "input_channels and decoder.width must be positive".into(),
            ));
        }
        self.aux.validate()?;
        self.main.validate()?;
        self.ccm.validate()?;
        if self.ablation == Ablation::DualCcm {
            for (i, &m) in self.main.dims.iter().enumerate() {
                if m % self.ccm.heads_for(m) != 0 {
                    return Err(Error::Config(format!(
                        "stage {} width {m} not divisible into {} heads",
                        i + 1,
                        self.ccm.heads_for(m)
                    )));
                }
            }
        }
        Ok(())
    }

    /// Channel widths of the features the decoder consumes.
    pub fn skip_dims(&self) -> [usize; 4] {
        match self.ablation {
            Ablation::AuxOnly => self.aux.dims,
            _ => self.main.dims,
        }
    }
}

/// Channel projection used by the plain-sum fusion.
#[derive(Debug, Clone, PartialEq)]
pub struct SumFuse<T = f32> {
    pub proj: Conv2d<T>,
}

module_fields!(SumFuse { proj => "proj" });

pub(crate) fn fuse_spec(c_aux: usize, c_main: usize) -> ConvSpec {
    ConvSpec::new(c_aux, c_main, 1).bias(true)
}

#[derive(Debug, Clone, PartialEq)]
pub enum Fusion<T = f32> {
    None,
    Sum(Vec<SumFuse<T>>),
    Ccm(Vec<Ccm<T>>),
}

impl<T: Scalar> Module<T> for Fusion<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>, ParamKind)) {
        match self {
            Fusion::None => {}
            Fusion::Sum(v) => v.visit(&join(prefix, "fuse"), f),
            Fusion::Ccm(v) => v.visit(&join(prefix, "ccm"), f),
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>, ParamKind)) {
        match self {
            Fusion::None => {}
            Fusion::Sum(v) => v.visit_mut(&join(prefix, "fuse"), f),
            Fusion::Ccm(v) => v.visit_mut(&join(prefix, "ccm"), f),
        }
    }
}

impl<T: Scalar> Fusion<T> {
    pub fn forward(&self, stage: usize, f_m: Option<&Tensor<T>>, f_a: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        match (self, f_m, f_a) {
            (Fusion::None, Some(m), None) | (Fusion::None, None, Some(m)) => Ok(m.clone()),
            (Fusion::Sum(v), Some(m), Some(a)) => m.add(&v[stage].proj.forward(a)?),
            (Fusion::Ccm(v), Some(m), Some(a)) => v[stage].forward(m, a),
            _ => Err(Error::invalid("fusion", "branch outputs do not match the fusion mode")),
        }
    }
}

/// Top-down skip decoder: project every stage to a common width, then from
/// the coarsest stage upsample ×2, add the next projected skip and refine.
/// A 1×1 head maps to class logits at stride 4, upsampled ×4.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoder<T = f32> {
    /// 1×1 with bias, one per stage.
    pub proj: Vec<Conv2d<T>>,
    /// 3×3 conv + BN + SiLU after merging stages 1..=3.
    pub refine: Vec<ConvBnAct<T>>,
    pub head: Conv2d<T>,
}

module_fields!(Decoder { proj => "proj", refine => "refine", head => "head" });

pub(crate) struct DecoderSpecs {
    pub proj: Vec<ConvSpec>,
    pub refine: ConvSpec,
    pub head: ConvSpec,
}

pub(crate) fn decoder_specs(skip_dims: [usize; 4], width: usize, classes: usize) -> DecoderSpecs {
    DecoderSpecs {
        proj: skip_dims.iter().map(|&c| ConvSpec::new(c, width, 1).bias(true)).collect(),
        refine: ConvSpec::new(width, width, 3),
        head: ConvSpec::new(width, classes, 1).bias(true),
    }
}

impl<T: Scalar> Decoder<T> {
    pub fn zeros(skip_dims: [usize; 4], width: usize, classes: usize) -> Self {
        let s = decoder_specs(skip_dims, width, classes);
        Decoder {
            proj: s.proj.into_iter().map(Conv2d::zeros).collect(),
            refine: (0..3).map(|_| ConvBnAct::zeros(s.refine)).collect(),
            head: Conv2d::zeros(s.head),
        }
    }

    pub fn init(skip_dims: [usize; 4], width: usize, classes: usize, rng: &mut impl Rng) -> Self {
        let s = decoder_specs(skip_dims, width, classes);
        Decoder {
            proj: s.proj.into_iter().map(|p| Conv2d::init(p, rng)).collect(),
            refine: (0..3).map(|_| ConvBnAct::init(s.refine, rng)).collect(),
            head: Conv2d::init(s.head, rng),
        }
    }

    pub fn forward(&self, skips: &[Tensor<T>; 4]) -> Result<Tensor<T>> {
        let mut x = self.proj[3].forward(&skips[3])?;
        for i in (0..3).rev() {
            let up = ops::upsample_bilinear(&x, 2)?;
            let skip = self.proj[i].forward(&skips[i])?;
            if up.shape() != skip.shape() {
                return Err(Error::shape(
                    "decoder",
                    format!("stage {} skip {:?} vs upsampled {:?}", i + 1, skip.shape(), up.shape()),
                ));
            }
            x = self.refine[i].forward(&up.add(&skip)?)?;
        }
        ops::upsample_bilinear(&self.head.forward(&x)?, 4)
    }
}

/// A complete network with weights. Immutable after construction; forward
/// passes may run concurrently.
#[derive(Debug, Clone, PartialEq)]
pub struct Rs3Mamba<T = f32> {
    pub config: ModelConfig,
    pub aux: Option<AuxEncoder<T>>,
    pub main: Option<MainEncoder<T>>,
    pub fusion: Fusion<T>,
    pub decoder: Decoder<T>,
}

impl<T: Scalar> Module<T> for Rs3Mamba<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>, ParamKind)) {
        self.main.visit(&join(prefix, "main"), f);
        self.aux.visit(&join(prefix, "aux"), f);
        self.fusion.visit(prefix, f);
        self.decoder.visit(&join(prefix, "decoder"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>, ParamKind)) {
        self.main.visit_mut(&join(prefix, "main"), f);
        self.aux.visit_mut(&join(prefix, "aux"), f);
        self.fusion.visit_mut(prefix, f);
        self.decoder.visit_mut(&join(prefix, "decoder"), f);
    }
}

impl<T: Scalar> Rs3Mamba<T> {
    /// Parameter skeleton with zero weights and identity norms, the target
    /// for weight loading.
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let c = config;
        let fusion = match c.ablation {
            Ablation::MainOnly | Ablation::AuxOnly => Fusion::None,
            Ablation::DualSum => Fusion::Sum(
                (0..4)
                    .map(|i| SumFuse {
                        proj: Conv2d::zeros(fuse_spec(c.aux.dims[i], c.main.dims[i])),
                    })
                    .collect(),
            ),
            Ablation::DualCcm => Fusion::Ccm(
                (0..4)
                    .map(|i| Ccm::zeros(c.main.dims[i], c.aux.dims[i], &c.ccm))
                    .collect(),
            ),
        };
        Ok(Rs3Mamba {
            config: c.clone(),
            aux: c.ablation.uses_aux().then(|| AuxEncoder::zeros(c.input_channels, &c.aux)),
            main: c.ablation.uses_main().then(|| MainEncoder::zeros(c.input_channels, &c.main)),
            fusion,
            decoder: Decoder::zeros(c.skip_dims(), c.decoder_width, c.n_classes),
        })
    }

    /// Randomly initialised model; identical seeds give identical weights.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = config;
        let mut rng = rng_from_seed(seed);
        let main = c
            .ablation
            .uses_main()
            .then(|| MainEncoder::init(c.input_channels, &c.main, &mut rng));
        let aux = c
            .ablation
            .uses_aux()
            .then(|| AuxEncoder::init(c.input_channels, &c.aux, &mut rng));
        let fusion = match c.ablation {
            Ablation::MainOnly | Ablation::AuxOnly => Fusion::None,
            Ablation::DualSum => Fusion::Sum(
                (0..4)
                    .map(|i| SumFuse {
                        proj: Conv2d::init(fuse_spec(c.aux.dims[i], c.main.dims[i]), &mut rng),
                    })
                    .collect(),
            ),
            Ablation::DualCcm => Fusion::Ccm(
                (0..4)
                    .map(|i| Ccm::init(c.main.dims[i], c.aux.dims[i], &c.ccm, &mut rng))
                    .collect(),
            ),
        };
        let decoder = Decoder::init(c.skip_dims(), c.decoder_width, c.n_classes, &mut rng);
        Ok(Rs3Mamba {
            config: c.clone(),
            aux,
            main,
            fusion,
            decoder,
        })
    }

    /// Switch every VSS block to the given scan evaluation.
    pub fn set_scan_mode(&mut self, mode: ScanMode) {
        self.config.aux.ssm.scan = mode;
        if let Some(aux) = &mut self.aux {
            for b in aux.stages.iter_mut().flat_map(|s| s.blocks.iter_mut()) {
                b.scan = mode;
            }
        }
    }

    /// Encoder features after fusion, one per stage.
    pub fn skips(&self, image: &Tensor<T>) -> Result<[Tensor<T>; 4]> {
        let (h, w, z) = image.dims3("model")?;
        if z != self.config.input_channels {
            return Err(Error::shape(
                "model",
                format!("image has {z} channels, model expects {}", self.config.input_channels),
            ));
        }
        check_input_size("model", h, w, INPUT_MULTIPLE)?;
        let (fm, fa) = rayon::join(
            || self.main.as_ref().map(|m| m.forward(image)).transpose(),
            || self.aux.as_ref().map(|a| a.forward(image)).transpose(),
        );
        let (fm, fa) = (fm?, fa?);
        let mut out = Vec::with_capacity(4);
        for i in 0..4 {
            out.push(self.fusion.forward(
                i,
                fm.as_ref().map(|f| &f[i]),
                fa.as_ref().map(|f| &f[i]),
            )?);
        }
        Ok(out.try_into().expect("four stages"))
    }

    /// `[H, W, Z]` image to `[H, W, K]` logits.
    pub fn forward(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        self.decoder.forward(&self.skips(image)?)?.ensure_finite("model")
    }
}
