//! Minimal reverse-mode layer set: exactly what the dual-stream model
//! needs, nothing more. Each layer owns its parameters and exposes
//! `forward` returning a cache, plus `backward` consuming that cache.
//!
//! Parameter gradients are accumulated only when the owning module's
//! trainable flag is set; gradients with respect to inputs are always
//! produced so frozen heads still pass gradients through to encoders.

pub mod adam;
pub mod batchnorm;
pub mod conv;
pub mod linalg;
pub mod linear;
pub mod loss;
pub mod pool;

pub use adam::{Adam, AdamConfig};
pub use batchnorm::{BatchNorm, BnCache};
pub use conv::{Conv2d, ConvCache};
pub use linear::{Linear, LinearCache};

use crate::tensor::{Scalar, Tensor};
use crate::util::Digest;
use rand::Rng;

/// Statistics mode for a forward pass.
///
/// `Train` normalizes with batch statistics and updates running stats.
/// `TrainFrozenStats` normalizes with batch statistics but leaves running
/// stats untouched; gradient checking uses it so repeated perturbed
/// evaluations do not mutate module state. `Eval` normalizes with running
/// statistics and never mutates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Train,
    TrainFrozenStats,
    Eval,
}

impl Phase {
    pub fn uses_batch_stats(self) -> bool {
        matches!(self, Phase::Train | Phase::TrainFrozenStats)
    }

    pub fn updates_running_stats(self) -> bool {
        matches!(self, Phase::Train)
    }
}

/// Named parameter tensor with its gradient accumulator.
#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

impl<T: Scalar> Param<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.shape());
        Param {
            name: name.into(),
            value,
            grad,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }

    pub fn numel(&self) -> usize {
        self.value.numel()
    }
}

/// A named group of parameters updated together by one optimizer.
pub trait ParamModule<T: Scalar> {
    fn module_name(&self) -> &str;
    fn params(&self) -> Vec<&Param<T>>;
    fn params_mut(&mut self) -> Vec<&mut Param<T>>;
    /// Non-learned state (batch-norm running statistics).
    fn buffers(&self) -> Vec<(String, &Tensor<T>)>;
    fn trainable(&self) -> bool;
    fn set_trainable(&mut self, on: bool);

    fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }

    /// Bit-exact digest over parameter values and buffers. Two states
    /// digest equal iff every float is bit-identical (up to hash
    /// collisions, which the update-isolation tests accept).
    fn state_digest(&self) -> u64 {
        let mut d = Digest::new();
        for p in self.params() {
            d.push_bytes(p.name.as_bytes());
            for v in p.value.data() {
                d.push_u64(v.to_bits_u64());
            }
        }
        for (name, buf) in self.buffers() {
            d.push_bytes(name.as_bytes());
            for v in buf.data() {
                d.push_u64(v.to_bits_u64());
            }
        }
        d.value()
    }
}

/// Kaiming-uniform init for ReLU fan-in: U(-b, b) with b = sqrt(6 / fan_in).
pub fn kaiming_uniform<T: Scalar>(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| T::from_f64(rng.gen_range(-bound..bound)))
        .collect();
    Tensor::from_vec(shape, data).expect("shape/data length agree by construction")
}

/// Elementwise max(0, x).
pub fn relu_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let data = x.data().iter().map(|&v| v.max(T::zero())).collect();
    Tensor::from_vec(x.shape(), data).expect("same shape")
}

/// Gradient of relu: passes where the forward input was strictly positive.
/// The subgradient at exactly zero is taken as zero.
pub fn relu_backward<T: Scalar>(x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let data = x
        .data()
        .iter()
        .zip(dy.data().iter())
        .map(|(&xi, &di)| if xi > T::zero() { di } else { T::zero() })
        .collect();
    Tensor::from_vec(x.shape(), data).expect("same shape")
}
