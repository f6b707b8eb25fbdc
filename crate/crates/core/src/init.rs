//! Seeded parameter initializers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

pub type SeedRng = ChaCha8Rng;

pub fn rng(seed: u64) -> SeedRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `U(-bound, bound)` entries.
pub fn uniform(rng: &mut SeedRng, shape: &[usize], bound: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-bound..=bound))
}

/// Uniform with the `1/sqrt(fan_in)` bound used for linear and conv weights.
pub fn fan_in_uniform(rng: &mut SeedRng, shape: &[usize], fan_in: usize) -> Tensor {
    uniform(rng, shape, 1.0 / (fan_in.max(1) as f64).sqrt())
}
