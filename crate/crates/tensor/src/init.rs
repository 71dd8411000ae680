//! Seeded parameter initialisation.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::real::Real;
use crate::tensor::Tensor;

/// Kaiming-uniform weights for a layer followed by a leaky ReLU:
/// `U(-b, b)` with `b = gain * sqrt(3 / fan_in)`, `gain = sqrt(2 / (1 + slope^2))`.
pub fn kaiming_uniform<T: Real>(
    shape: &[usize],
    fan_in: usize,
    negative_slope: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor<T>> {
    let gain = (2.0 / (1.0 + negative_slope * negative_slope)).sqrt();
    let bound = gain * (3.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| T::of(rng.gen_range(-bound..bound)))
        .collect();
    Tensor::param(shape, data)
}

/// Uniform `U(-bound, bound)` parameters.
pub fn uniform<T: Real>(shape: &[usize], bound: f64, rng: &mut ChaCha8Rng) -> Result<Tensor<T>> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            if bound > 0.0 {
                T::of(rng.gen_range(-bound..bound))
            } else {
                T::zero()
            }
        })
        .collect();
    Tensor::param(shape, data)
}

pub fn zeros<T: Real>(shape: &[usize]) -> Result<Tensor<T>> {
    let n: usize = shape.iter().product();
    Tensor::param(shape, vec![T::zero(); n])
}
