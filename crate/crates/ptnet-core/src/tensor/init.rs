//! Deterministic parameter initializers.
//!
//! All sampling happens in f64 and is cast to the element type afterwards, so
//! an f32 run and an f64 gradient-check run draw the same underlying values.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{Element, Tensor};

pub fn uniform<E: Element>(shape: Vec<usize>, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<E> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| E::from_f64(rng.gen_range(lo..hi))).collect();
    Tensor::raw(shape, data)
}

/// Standard normal via Box-Muller (rand_distr not needed for this).
pub fn normal<E: Element>(shape: Vec<usize>, mean: f64, std: f64, rng: &mut ChaCha8Rng) -> Tensor<E> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| E::from_f64(mean + std * sample_standard_normal(rng))).collect();
    Tensor::raw(shape, data)
}

pub fn sample_standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Xavier/Glorot uniform for a `[fan_in, fan_out]` projection.
pub fn xavier<E: Element>(fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Tensor<E> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    uniform(vec![fan_in, fan_out], -bound, bound, rng)
}
