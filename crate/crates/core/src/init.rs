//! Seeded parameter initializers.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::Array;

pub type SeededRng = ChaCha8Rng;

pub fn rng(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Normal(0, std) resampled until it falls within two standard deviations.
pub fn trunc_normal(rng: &mut impl Rng, shape: &[usize], std: f64) -> Array {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let z: f64 = StandardNormal.sample(rng);
            if z.abs() <= 2.0 {
                break z * std;
            }
        })
        .collect();
    Array::new(shape.to_vec(), data).expect("shape product")
}

pub fn normal(rng: &mut impl Rng, shape: &[usize], std: f64) -> Array {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
        .collect();
    Array::new(shape.to_vec(), data).expect("shape product")
}

pub fn uniform(rng: &mut impl Rng, shape: &[usize], bound: f64) -> Array {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Array::new(shape.to_vec(), data).expect("shape product")
}

/// He/Kaiming uniform for a `[fan_in, fan_out]` weight: bound `sqrt(6 / fan_in)`.
pub fn kaiming_uniform(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Array {
    uniform(rng, &[fan_in, fan_out], (6.0 / fan_in as f64).sqrt())
}
