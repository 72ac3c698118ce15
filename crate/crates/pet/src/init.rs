//! Seeded weight initialization helpers.

use rand::Rng;

use crate::numerics::Tensor;

/// Standard normal via Box-Muller on the rng's uniform stream.
pub(crate) fn standard_normal(rng: &mut impl Rng) -> f64 {
    let u1: f64 = rng.random::<f64>().max(1e-12);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

pub(crate) fn normal(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| standard_normal(rng) * std).collect();
    Tensor::new(shape.to_vec(), data).expect("init shape")
}

/// He-style init for layers followed by ReLU.
pub(crate) fn he_normal(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor {
    normal(rng, shape, (2.0 / fan_in as f64).sqrt())
}

/// Gentler init for plain linear projections.
pub(crate) fn linear_normal(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor {
    normal(rng, shape, (1.0 / fan_in as f64).sqrt())
}
