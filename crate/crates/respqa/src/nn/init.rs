//! Seeded parameter initialization.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

/// Box-Muller normal sample; avoids a rand_distr dependency and keeps the
/// byte stream consumption explicit and stable.
pub fn normal_sample(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

pub fn normal(rng: &mut ChaCha8Rng, shape: Vec<usize>, std: f64, trainable: bool) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| normal_sample(rng) * std).collect();
    Tensor::from_vec(shape, data, trainable)
}

pub fn zeros(shape: Vec<usize>, trainable: bool) -> Tensor {
    Tensor::zeros(shape, trainable)
}

pub fn ones(shape: Vec<usize>, trainable: bool) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, vec![1.0; n], trainable)
}
