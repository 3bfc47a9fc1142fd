//! Seeded parameter initializers.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::scalar::{s, Scalar};
use super::tensor::Tensor;

pub fn uniform<S: Scalar>(shape: &[usize], limit: f64, rng: &mut impl Rng) -> Tensor<S> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| s(rng.random_range(-limit..=limit))).collect();
    Tensor::from_vec(shape, data).expect("initializer shape")
}

pub fn normal<S: Scalar>(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor<S> {
    let dist = Normal::new(0.0, std).expect("std is finite and non-negative");
    let n = shape.iter().product();
    let data = (0..n).map(|_| s(dist.sample(rng))).collect();
    Tensor::from_vec(shape, data).expect("initializer shape")
}

/// Glorot/Xavier uniform for a `fan_in × fan_out` weight.
pub fn glorot_uniform<S: Scalar>(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Tensor<S> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    uniform(&[fan_in, fan_out], limit, rng)
}
