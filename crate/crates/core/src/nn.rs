//! Parameterised layers and named-parameter traversal.
//!
//! Every parameter container implements [`Module`], which walks its tensors
//! in a fixed order under dotted names (`main.stage1.block1.conv1.weight`).
//! The same walk drives parameter counting, archive save and strict load.

use rand::Rng;

use crate::error::Result;
use crate::init;
use crate::ssm::S6Params;
use crate::tensor::ops;
use crate::tensor::{Scalar, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-6;
pub const BATCH_NORM_EPS: f64 = 1e-5;

/// Whether a tensor is a trainable parameter or a stored statistic.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Buffer,
}

pub trait Module<T: Scalar> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>, ParamKind));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>, ParamKind));

    /// Number of trainable scalars.
    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t, kind| {
            if kind == ParamKind::Weight {
                n += t.len();
            }
        });
        n
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

impl<T: Scalar> Module<T> for Tensor<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>, ParamKind)) {
        f(prefix, self, ParamKind::Weight)
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>, ParamKind)) {
        f(prefix, self, ParamKind::Weight)
    }
}

impl<T: Scalar, M: Module<T>> Module<T> for Option<M> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>, ParamKind)) {
        if let Some(m) = self {
            m.visit(prefix, f)
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>, ParamKind)) {
        if let Some(m) = self {
            m.visit_mut(prefix, f)
        }
    }
}

/// Elements are named `{prefix}{i}` with `i` starting at 1.
impl<T: Scalar, M: Module<T>> Module<T> for Vec<M> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>, ParamKind)) {
        for (i, m) in self.iter().enumerate() {
            m.visit(&format!("{prefix}{}", i + 1), f)
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>, ParamKind)) {
        for (i, m) in self.iter_mut().enumerate() {
            m.visit_mut(&format!("{prefix}{}", i + 1), f)
        }
    }
}

/// Implements [`Module`] by visiting the listed fields under the given names.
macro_rules! module_fields {
    ($ty:ident { $($field:ident => $name:literal),* $(,)? }) => {
        impl<T: $crate::tensor::Scalar> $crate::nn::Module<T> for $ty<T> {
            fn visit(
                &self,
                prefix: &str,
                f: &mut dyn FnMut(&str, &$crate::tensor::Tensor<T>, $crate::nn::ParamKind),
            ) {
                $( $crate::nn::Module::visit(&self.$field, &$crate::nn::join(prefix, $name), f); )*
            }
            fn visit_mut(
                &mut self,
                prefix: &str,
                f: &mut dyn FnMut(&str, &mut $crate::tensor::Tensor<T>, $crate::nn::ParamKind),
            ) {
                $( $crate::nn::Module::visit_mut(&mut self.$field, &$crate::nn::join(prefix, $name), f); )*
            }
        }
    };
}
pub(crate) use module_fields;

module_fields!(S6Params {
    a_log => "a_log",
    d_skip => "d_skip",
    x_proj => "x_proj",
    dt_proj => "dt_proj",
    dt_bias => "dt_bias",
});

#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T = f32> {
    /// `[Din, Dout]`
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

module_fields!(Linear { weight => "weight", bias => "bias" });

impl<T: Scalar> Linear<T> {
    pub fn zeros(din: usize, dout: usize, bias: bool) -> Self {
        Linear {
            weight: Tensor::zeros([din, dout]),
            bias: bias.then(|| Tensor::zeros([dout])),
        }
    }

    pub fn init(din: usize, dout: usize, bias: bool, rng: &mut impl Rng) -> Self {
        Linear {
            weight: init::trunc_normal(&[din, dout], init::PROJ_STD, rng),
            bias: bias.then(|| Tensor::zeros([dout])),
        }
    }

    pub fn param_count(din: usize, dout: usize, bias: bool) -> usize {
        din * dout + if bias { dout } else { 0 }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        ops::linear(x, &self.weight, self.bias.as_ref())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<T = f32> {
    /// `[Kh, Kw, Cin / groups, Cout]`
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

module_fields!(Conv2d { weight => "weight", bias => "bias" });

/// Geometry of a convolution, independent of its weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub bias: bool,
}

impl ConvSpec {
    pub fn new(cin: usize, cout: usize, kernel: usize) -> Self {
        ConvSpec {
            cin,
            cout,
            kernel,
            stride: 1,
            padding: kernel / 2,
            groups: 1,
            bias: false,
        }
    }

    pub fn stride(mut self, s: usize) -> Self {
        self.stride = s;
        self
    }

    pub fn padding(mut self, p: usize) -> Self {
        self.padding = p;
        self
    }

    pub fn groups(mut self, g: usize) -> Self {
        self.groups = g;
        self
    }

    pub fn bias(mut self, b: bool) -> Self {
        self.bias = b;
        self
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.kernel, self.kernel, self.cin / self.groups, self.cout]
    }

    pub fn param_count(&self) -> usize {
        self.kernel * self.kernel * (self.cin / self.groups) * self.cout
            + if self.bias { self.cout } else { 0 }
    }

    pub fn out_size(&self, h: usize) -> usize {
        (h + 2 * self.padding - self.kernel) / self.stride + 1
    }

    /// 2 × MACs for an `h × w` input.
    pub fn flops(&self, h: usize, w: usize) -> u64 {
        let (ho, wo) = (self.out_size(h), self.out_size(w));
        2 * (self.kernel * self.kernel * (self.cin / self.groups) * self.cout) as u64
            * (ho * wo) as u64
    }
}

impl<T: Scalar> Conv2d<T> {
    pub fn zeros(spec: ConvSpec) -> Self {
        Conv2d {
            weight: Tensor::zeros(spec.weight_shape()),
            bias: spec.bias.then(|| Tensor::zeros([spec.cout])),
            stride: spec.stride,
            padding: spec.padding,
            groups: spec.groups,
        }
    }

    pub fn init(spec: ConvSpec, rng: &mut impl Rng) -> Self {
        Conv2d {
            weight: init::kaiming_conv(&spec.weight_shape(), rng),
            ..Self::zeros(spec)
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        ops::conv2d(
            x,
            &self.weight,
            self.bias.as_ref(),
            self.stride,
            self.padding,
            self.groups,
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm<T = f32> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

module_fields!(LayerNorm { gamma => "weight", beta => "bias" });

impl<T: Scalar> LayerNorm<T> {
    pub fn new(c: usize) -> Self {
        LayerNorm {
            gamma: Tensor::ones([c]),
            beta: Tensor::zeros([c]),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        ops::layer_norm(x, &self.gamma, &self.beta, LAYER_NORM_EPS)
    }
}

/// Inference-mode batch normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm<T = f32> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
}

impl<T: Scalar> Module<T> for BatchNorm<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>, ParamKind)) {
        f(&join(prefix, "weight"), &self.gamma, ParamKind::Weight);
        f(&join(prefix, "bias"), &self.beta, ParamKind::Weight);
        f(&join(prefix, "running_mean"), &self.running_mean, ParamKind::Buffer);
        f(&join(prefix, "running_var"), &self.running_var, ParamKind::Buffer);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>, ParamKind)) {
        f(&join(prefix, "weight"), &mut self.gamma, ParamKind::Weight);
        f(&join(prefix, "bias"), &mut self.beta, ParamKind::Weight);
        f(&join(prefix, "running_mean"), &mut self.running_mean, ParamKind::Buffer);
        f(&join(prefix, "running_var"), &mut self.running_var, ParamKind::Buffer);
    }
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(c: usize) -> Self {
        BatchNorm {
            gamma: Tensor::ones([c]),
            beta: Tensor::zeros([c]),
            running_mean: Tensor::zeros([c]),
            running_var: Tensor::ones([c]),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        ops::batch_norm(
            x,
            &self.gamma,
            &self.beta,
            &self.running_mean,
            &self.running_var,
            BATCH_NORM_EPS,
        )
    }

    /// Fold this normalization into the preceding convolution, returning a
    /// single biased convolution with identical inference output.
    pub fn fold_into(&self, conv: &Conv2d<T>) -> Conv2d<T> {
        let (scale, shift) = ops::batch_norm_affine(
            &self.gamma,
            &self.beta,
            &self.running_mean,
            &self.running_var,
            BATCH_NORM_EPS,
        );
        let cout = scale.len();
        let weight = Tensor::from_fn(conv.weight.shape().to_vec(), |i| {
            T::from_f64(conv.weight.data()[i].as_f64() * scale[i % cout])
        });
        let bias = Tensor::from_fn([cout], |c| {
            let b = conv.bias.as_ref().map_or(0.0, |b| b.data()[c].as_f64());
            T::from_f64(b * scale[c] + shift[c])
        });
        Conv2d {
            weight,
            bias: Some(bias),
            stride: conv.stride,
            padding: conv.padding,
            groups: conv.groups,
        }
    }
}

/// Convolution, batch norm and SiLU, with an optional bypass of the
/// normalisation and activation (a test seam for linear-path checks).
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBnAct<T = f32> {
    pub conv: Conv2d<T>,
    pub bn: BatchNorm<T>,
    pub bypass_norm_act: bool,
}

module_fields!(ConvBnAct { conv => "conv", bn => "bn" });

impl<T: Scalar> ConvBnAct<T> {
    pub fn zeros(spec: ConvSpec) -> Self {
        ConvBnAct {
            conv: Conv2d::zeros(spec),
            bn: BatchNorm::new(spec.cout),
            bypass_norm_act: false,
        }
    }

    pub fn init(spec: ConvSpec, rng: &mut impl Rng) -> Self {
        ConvBnAct {
            conv: Conv2d::init(spec, rng),
            ..Self::zeros(spec)
        }
    }

    pub fn param_count(spec: ConvSpec) -> usize {
        spec.param_count() + 2 * spec.cout
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = self.conv.forward(x)?;
        if self.bypass_norm_act {
            return Ok(y);
        }
        Ok(ops::silu(&self.bn.forward(&y)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::init::rng_from_seed;

    #[test]
    fn names_and_counts() {
        let mut rng = rng_from_seed(1);
        let m = ConvBnAct::<f32>::init(ConvSpec::new(3, 4, 3), &mut rng);
        let mut names = Vec::new();
        m.visit("x", &mut |n, _, k| names.push((n.to_string(), k)));
        assert_eq!(names[0].0, "x.conv.weight");
        assert_eq!(names.last().unwrap(), &("x.bn.running_var".to_string(), ParamKind::Buffer));
        assert_eq!(m.num_params(), ConvBnAct::<f32>::param_count(ConvSpec::new(3, 4, 3)));
        assert_eq!(Linear::<f32>::param_count(4, 3, true), 15);
        assert_eq!(Linear::<f32>::zeros(4, 3, true).num_params(), 15);
        let v: Vec<Linear<f32>> = vec![Linear::zeros(1, 1, false); 2];
        let mut names = Vec::new();
        v.visit("p.block", &mut |n, _, _| names.push(n.to_string()));
        assert_eq!(names, ["p.block1.weight", "p.block2.weight"]);
    }

    #[test]
    fn batch_norm_folding_is_exact_enough() {
        let mut rng = rng_from_seed(2);
        let conv = Conv2d::<f64>::init(ConvSpec::new(3, 5, 3), &mut rng);
        let bn = BatchNorm {
            gamma: init::uniform(&[5], 0.5, 1.5, &mut rng),
            beta: init::uniform(&[5], -0.5, 0.5, &mut rng),
            running_mean: init::uniform(&[5], -0.5, 0.5, &mut rng),
            running_var: init::uniform(&[5], 0.5, 2.0, &mut rng),
        };
        let x = init::uniform::<f64>(&[6, 7, 3], -1.0, 1.0, &mut rng);
        let a = bn.forward(&conv.forward(&x).unwrap()).unwrap();
        let b = bn.fold_into(&conv).forward(&x).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-12);
    }
}
