//! Parameter containers shared by the trainable models.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};
use surfgan_grad::{Adam, Tensor, Var};

use crate::error::{Error, Result};

/// A tree of named learnable tensors.
pub trait Module {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Var)>);
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Var)>);

    fn named_params(&self) -> Vec<(String, &Var)> {
        let mut out = Vec::new();
        self.visit("", &mut out);
        out
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Var)> {
        let mut out = Vec::new();
        self.visit_mut("", &mut out);
        out
    }

    /// Handles to every parameter, in visiting order.
    fn params(&self) -> Vec<Var> {
        self.named_params().into_iter().map(|(_, v)| v.clone()).collect()
    }

    fn tensors(&self) -> Vec<(String, Tensor)> {
        self.named_params()
            .into_iter()
            .map(|(n, v)| (n, v.value().clone()))
            .collect()
    }

    /// Replaces every parameter by the tensor of the same name and shape.
    fn load_tensors(&mut self, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, var) in self.named_params_mut() {
            let t = tensors
                .get(&name)
                .ok_or_else(|| Error::Data(format!("missing tensor `{name}`")))?;
            if t.shape() != var.shape() {
                return Err(Error::Data(format!(
                    "tensor `{name}` has shape {:?}, expected {:?}",
                    t.shape(),
                    var.shape()
                )));
            }
            *var = Var::param(t.clone());
        }
        Ok(())
    }

    fn num_params(&self) -> usize {
        self.named_params().iter().map(|(_, v)| v.numel()).sum()
    }

    /// Hash of every parameter's name, shape and bits.
    fn fingerprint(&self) -> u64 {
        fingerprint_tensors(self.tensors().iter().map(|(n, t)| (n.as_str(), t)))
    }
}

pub fn fingerprint_tensors<'a>(items: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> u64 {
    let mut h = Sha256::new();
    for (name, t) in items {
        h.update(name.as_bytes());
        for d in t.shape() {
            h.update((*d as u64).to_le_bytes());
        }
        for v in t.data() {
            h.update(v.to_bits().to_le_bytes());
        }
    }
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("sha256 has 32 bytes"))
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

impl Module for Var {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Var)>) {
        out.push((prefix.to_string(), self));
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Var)>) {
        out.push((prefix.to_string(), self));
    }
}

impl<T: Module> Module for Vec<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Var)>) {
        for (i, m) in self.iter().enumerate() {
            m.visit(&join(prefix, &i.to_string()), out);
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Var)>) {
        for (i, m) in self.iter_mut().enumerate() {
            m.visit_mut(&join(prefix, &i.to_string()), out);
        }
    }
}

impl<T: Module> Module for Option<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Var)>) {
        if let Some(m) = self {
            m.visit(prefix, out);
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Var)>) {
        if let Some(m) = self {
            m.visit_mut(prefix, out);
        }
    }
}

/// Implements [`Module`] by visiting the listed fields in order.
macro_rules! module_fields {
    ($ty:ty { $($field:ident),* $(,)? }) => {
        impl $crate::nn::Module for $ty {
            fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a surfgan_grad::Var)>) {
                $( $crate::nn::Module::visit(&self.$field, &$crate::nn::join(prefix, stringify!($field)), out); )*
            }
            fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut surfgan_grad::Var)>) {
                $( $crate::nn::Module::visit_mut(&mut self.$field, &$crate::nn::join(prefix, stringify!($field)), out); )*
            }
        }
    };
}
pub(crate) use module_fields;

/// Applies one optimizer update to every parameter of `module`.
pub fn adam_step<M: Module + ?Sized>(opt: &mut Adam, module: &mut M, grads: &[Tensor]) {
    let mut params: Vec<&mut Var> = module
        .named_params_mut()
        .into_iter()
        .map(|(_, v)| v)
        .collect();
    opt.step(&mut params, grads);
}

/// Fully connected layer, `y = x W + b` with `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Var,
    pub bias: Var,
}

module_fields!(Linear { weight, bias });

impl Linear {
    pub fn new(weight: Tensor, bias: Tensor) -> Self {
        assert_eq!(weight.shape()[1], bias.numel(), "bias length must match output width");
        Self {
            weight: Var::param(weight),
            bias: Var::param(bias),
        }
    }

    /// Weights uniform in `±bound`, zero bias.
    pub fn uniform<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, fan_out: usize, bound: f64) -> Self {
        Self::new(uniform(rng, &[fan_in, fan_out], bound), Tensor::zeros(&[fan_out]))
    }

    /// Weights normal with standard deviation `std`, zero bias.
    pub fn normal<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, fan_out: usize, std: f64) -> Self {
        Self::new(normal(rng, &[fan_in, fan_out], std), Tensor::zeros(&[fan_out]))
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self::new(Tensor::zeros(&[fan_in, fan_out]), Tensor::zeros(&[fan_out]))
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    /// Acts on the last axis of `x`.
    pub fn forward(&self, x: &Var) -> Var {
        let shape = x.shape().to_vec();
        let rows = shape[..shape.len() - 1].iter().product::<usize>();
        let y = x
            .reshape(&[rows, self.in_dim()])
            .matmul(&self.weight)
            .add(&self.bias);
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = self.out_dim();
        y.reshape(&out_shape)
    }
}

pub fn uniform<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], bound: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-bound..=bound))
}

pub fn normal<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], std: f64) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let v: f64 = StandardNormal.sample(rng);
        v * std
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    struct Pair {
        a: Linear,
        b: Vec<Linear>,
    }
    module_fields!(Pair { a, b });

    #[test]
    fn names_follow_structure() {
        let p = Pair {
            a: Linear::zeros(2, 3),
            b: vec![Linear::zeros(3, 1)],
        };
        let names: Vec<_> = p.named_params().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, ["a.weight", "a.bias", "b.0.weight", "b.0.bias"]);
        assert_eq!(p.num_params(), 6 + 3 + 3 + 1);
    }

    #[test]
    fn load_roundtrip_and_shape_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let src = Linear::uniform(&mut rng, 3, 2, 1.0);
        let mut dst = Linear::zeros(3, 2);
        assert_ne!(src.fingerprint(), dst.fingerprint());
        let map: BTreeMap<_, _> = src.tensors().into_iter().collect();
        dst.load_tensors(&map).unwrap();
        assert_eq!(src.fingerprint(), dst.fingerprint());
        let mut wrong = Linear::zeros(2, 2);
        assert!(wrong.load_tensors(&map).is_err());
    }

    #[test]
    fn linear_acts_on_last_axis() {
        let l = Linear::new(
            Tensor::new(&[2, 1], vec![1.0, 2.0]),
            Tensor::new(&[1], vec![0.5]),
        );
        let x = Var::constant(Tensor::new(&[2, 1, 2], vec![1.0, 1.0, 0.0, 3.0]));
        let y = l.forward(&x);
        assert_eq!(y.shape(), &[2, 1, 1]);
        assert_eq!(y.value().data(), &[3.5, 6.5]);
    }
}
