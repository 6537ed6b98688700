//! Weight initialization.

use ndarray::ArrayD;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Initialization law for a weight tensor.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// Gaussian with std `sqrt(2 / fan_in)`.
    He,
    /// Gaussian with std `scale / sqrt(fan_in)`.
    Scaled(f64),
    /// All zeros. Used for the closing projection of residual and attention
    /// blocks so a fresh network starts as (near) identity.
    Zero,
}

impl Init {
    pub fn tensor(&self, shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> ArrayD<f32> {
        let std = match self {
            Init::He => (2.0 / fan_in as f64).sqrt(),
            Init::Scaled(s) => s / (fan_in as f64).sqrt(),
            Init::Zero => return ArrayD::zeros(shape.to_vec()),
        };
        ArrayD::from_shape_simple_fn(shape.to_vec(), || {
            let v: f64 = StandardNormal.sample(rng);
            (v * std) as f32
        })
    }
}
