//! Parameter initialisers. All randomness flows through a caller-supplied
//! seeded RNG.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::{Scalar, Tensor};

pub type ModelRng = ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> ModelRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Standard deviation used for projection weights.
pub const PROJ_STD: f64 = 0.02;

/// Normal(0, std) truncated to ±2·std by rejection.
pub fn trunc_normal<T: Scalar>(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor<T> {
    Tensor::from_fn(shape.to_vec(), |_| loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            break T::from_f64(z * std);
        }
    })
}

pub fn uniform<T: Scalar>(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor<T> {
    Tensor::from_fn(shape.to_vec(), |_| T::from_f64(rng.random_range(lo..hi)))
}

/// He-normal initialisation for a conv kernel `[Kh, Kw, Cin_g, Cout]`
/// (fan-out mode, as used for ResNet backbones).
pub fn kaiming_conv<T: Scalar>(shape: &[usize], rng: &mut impl Rng) -> Tensor<T> {
    let fan_out = shape[0] * shape[1] * shape[3];
    let std = (2.0 / fan_out as f64).sqrt();
    Tensor::from_fn(shape.to_vec(), |_| {
        let z: f64 = StandardNormal.sample(rng);
        T::from_f64(z * std)
    })
}
