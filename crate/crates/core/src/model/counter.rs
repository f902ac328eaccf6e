//! Analytic parameter and FLOP counts from a configuration alone.
//!
//! FLOPs are 2 × multiply-accumulates of convolutions, linear layers,
//! attention products and the scan's state update and readout. Elementwise
//! work (norms, activations, softmax, exp, upsampling, bias adds) is not
//! counted.

use std::fmt;

use super::{decoder_specs, fuse_spec, Ablation, ModelConfig};
use crate::ccm::Ccm;
use crate::encoders::{check_input_size, AuxEncoder, MainEncoder, INPUT_MULTIPLE};
use crate::error::Result;
use crate::nn::ConvBnAct;

/// Per-component totals. `fusion` covers the completion modules or the
/// plain-sum projections.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Breakdown {
    pub main: u64,
    pub aux: u64,
    pub fusion: u64,
    pub decoder: u64,
}

impl Breakdown {
    pub fn total(&self) -> u64 {
        self.main + self.aux + self.fusion + self.decoder
    }

    fn scaled(self, k: u64) -> Self {
        Breakdown {
            main: self.main * k,
            aux: self.aux * k,
            fusion: self.fusion * k,
            decoder: self.decoder * k,
        }
    }
}

impl fmt::Display for Breakdown {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (name, v) in [
            ("main", self.main),
            ("aux", self.aux),
            ("fusion", self.fusion),
            ("decoder", self.decoder),
            ("total", self.total()),
        ] {
            writeln!(f, "{name:<8} {v:>16}")?;
        }
        Ok(())
    }
}

/// Trainable parameters; batch-norm running statistics are excluded.
pub fn count_params(cfg: &ModelConfig) -> Result<Breakdown> {
    cfg.validate()?;
    let z = cfg.input_channels;
    let mut b = Breakdown::default();
    if cfg.ablation.uses_main() {
        b.main = MainEncoder::<f32>::param_count(z, &cfg.main) as u64;
    }
    if cfg.ablation.uses_aux() {
        b.aux = AuxEncoder::<f32>::param_count(z, &cfg.aux) as u64;
    }
    b.fusion = (0..4)
        .map(|i| {
            let (m, a) = (cfg.main.dims[i], cfg.aux.dims[i]);
            match cfg.ablation {
                Ablation::DualCcm => Ccm::<f32>::param_count(m, a, &cfg.ccm),
                Ablation::DualSum => fuse_spec(a, m).param_count(),
                _ => 0,
            }
        })
        .sum::<usize>() as u64;
    let d = decoder_specs(cfg.skip_dims(), cfg.decoder_width, cfg.n_classes);
    b.decoder = (d.proj.iter().map(|p| p.param_count()).sum::<usize>()
        + 3 * ConvBnAct::<f32>::param_count(d.refine)
        + d.head.param_count()) as u64;
    Ok(b)
}

/// FLOPs of `batch` forward passes on `h × w` inputs.
pub fn count_flops(cfg: &ModelConfig, h: usize, w: usize, batch: usize) -> Result<Breakdown> {
    cfg.validate()?;
    check_input_size("count_flops", h, w, INPUT_MULTIPLE)?;
    let z = cfg.input_channels;
    let stage = |i: usize| (h >> (i + 2), w >> (i + 2));
    let mut b = Breakdown::default();
    if cfg.ablation.uses_main() {
        b.main = MainEncoder::<f32>::flops(z, &cfg.main, h, w);
    }
    if cfg.ablation.uses_aux() {
        b.aux = AuxEncoder::<f32>::flops(z, &cfg.aux, h, w);
    }
    b.fusion = (0..4)
        .map(|i| {
            let (m, a) = (cfg.main.dims[i], cfg.aux.dims[i]);
            let (hs, ws) = stage(i);
            match cfg.ablation {
                Ablation::DualCcm => Ccm::<f32>::flops(m, a, &cfg.ccm, hs, ws),
                Ablation::DualSum => fuse_spec(a, m).flops(hs, ws),
                _ => 0,
            }
        })
        .sum();
    let d = decoder_specs(cfg.skip_dims(), cfg.decoder_width, cfg.n_classes);
    b.decoder = (0..4)
        .map(|i| {
            let (hs, ws) = stage(i);
            d.proj[i].flops(hs, ws) + if i < 3 { d.refine.flops(hs, ws) } else { 0 }
        })
        .sum::<u64>()
        + d.head.flops(stage(0).0, stage(0).1);
    Ok(b.scaled(batch as u64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{ConvSpec, Module};
    use crate::model::Rs3Mamba;

    #[test]
    fn pointwise_conv_is_two_flops() {
        assert_eq!(ConvSpec::new(1, 1, 1).flops(1, 1), 2);
    }

    #[test]
    fn analytic_matches_instantiated() {
        for a in Ablation::ALL {
            let cfg = ModelConfig::small().with_ablation(a);
            let m = Rs3Mamba::<f32>::zeros(&cfg).unwrap();
            assert_eq!(count_params(&cfg).unwrap().total(), m.num_params() as u64, "{a}");
        }
    }

    #[test]
    fn components_add_up_across_ablations() {
        let full = count_params(&ModelConfig::default()).unwrap();
        let main = count_params(&ModelConfig::default().with_ablation(Ablation::MainOnly)).unwrap();
        let aux = count_params(&ModelConfig::default().with_ablation(Ablation::AuxOnly)).unwrap();
        assert_eq!(main.main, full.main);
        assert_eq!(aux.aux, full.aux);
        assert_eq!(main.decoder, full.decoder);
        assert_eq!(full.total(), main.main + aux.aux + full.fusion + full.decoder);
    }
}
