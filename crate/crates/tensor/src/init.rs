//! Seeded parameter initializers.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::shape::numel;
use crate::tensor::Tensor;

/// Gaussian values with standard deviation `sqrt(2 / fan_in)`, scaled by `gain`.
pub fn he_normal<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, gain: f64, rng: &mut R) -> Tensor {
    let std = gain * (2.0 / fan_in as f64).sqrt();
    let data = (0..numel(shape))
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            std * z
        })
        .collect();
    Tensor::param(shape.to_vec(), data)
}

pub fn uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Tensor {
    let data = (0..numel(shape)).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::param(shape.to_vec(), data)
}

pub fn zeros_param(shape: &[usize]) -> Tensor {
    Tensor::param(shape.to_vec(), vec![0.0; numel(shape)])
}
