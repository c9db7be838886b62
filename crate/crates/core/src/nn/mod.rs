//! Minimal CPU tensor layers with hand-written backward passes.
//!
//! Layers are generic over [`Real`] so the same code trains in `f32` and is
//! gradient-checked in `f64`. Activations use NCHW layout throughout.

mod activation;
mod conv;
mod linear;
mod loss;
mod norm;
mod optim;
mod pool;
pub mod resize;
mod sequential;

pub use activation::{Activation, Dropout};
pub use conv::{im2col_into, output_size, Conv2d};
pub use linear::Linear;
pub use loss::{cross_entropy_2d, mse, rmse, softmax_channels};
pub use norm::BatchNorm2d;
pub use optim::{Adam, Optimizer, Sgd};
pub use pool::{avg_pool2d, MaxPool2d};
pub use sequential::{ConvLayer, Sequential};

use std::collections::BTreeMap;

use ndarray::{ArrayD, IxDyn, NdFloat};
use num_traits::FromPrimitive;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::checkpoint::NamedTensor;
use crate::{Error, Result};

/// Floating-point element type accepted by every layer.
pub trait Real: NdFloat + FromPrimitive + Default {}

impl<T: NdFloat + FromPrimitive + Default> Real for T {}

#[inline]
pub fn real<F: Real>(x: f64) -> F {
    F::from_f64(x).expect("finite constant")
}

/// A learnable array with its accumulated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<F> {
    pub value: ArrayD<F>,
    pub grad: ArrayD<F>,
}

impl<F: Real> Param<F> {
    pub fn new(value: ArrayD<F>) -> Self {
        let grad = ArrayD::zeros(value.raw_dim());
        Self { value, grad }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::new(ArrayD::zeros(IxDyn(shape)))
    }

    /// He-normal initialisation for a layer with `fan_in` inputs.
    pub fn he_normal<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Self {
        let std = (2.0 / fan_in.max(1) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("valid std");
        let n: usize = shape.iter().product();
        let data: Vec<F> = (0..n).map(|_| real(normal.sample(rng))).collect();
        Self::new(ArrayD::from_shape_vec(IxDyn(shape), data).expect("shape matches"))
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(F::zero());
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// Anything that owns named parameters.
pub trait Parameterized<F: Real> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<F>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>));

    fn zero_grad(&mut self) {
        self.visit_mut("", &mut |_, p| p.zero_grad());
    }

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, p| n += p.len());
        n
    }

    /// Snapshot of every parameter as `f32` tensors.
    fn export(&self, prefix: &str) -> Vec<NamedTensor> {
        let mut out = Vec::new();
        self.visit(prefix, &mut |name, p| {
            out.push(NamedTensor {
                name: name.to_string(),
                shape: p.value.shape().to_vec(),
                data: p.value.iter().map(|v| v.to_f32().unwrap_or(f32::NAN)).collect(),
            })
        });
        out
    }

    /// Overwrite parameters from named tensors; every parameter must be present.
    fn import(&mut self, prefix: &str, tensors: &BTreeMap<String, NamedTensor>) -> Result<()> {
        let mut failure = None;
        self.visit_mut(prefix, &mut |name, p| {
            if failure.is_some() {
                return;
            }
            match tensors.get(name) {
                None => failure = Some(format!("missing tensor {name}")),
                Some(t) if t.shape != p.value.shape() => {
                    failure = Some(format!(
                        "tensor {name} has shape {:?}, expected {:?}",
                        t.shape,
                        p.value.shape()
                    ))
                }
                Some(t) => {
                    for (dst, src) in p.value.iter_mut().zip(&t.data) {
                        *dst = real(f64::from(*src));
                    }
                }
            }
        });
        match failure {
            Some(msg) => Err(Error::Checkpoint(msg)),
            None => Ok(()),
        }
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}
