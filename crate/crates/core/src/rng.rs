//! Seeded randomness.
//!
//! Every stochastic routine takes an explicit seed and draws from ChaCha8,
//! a counter-based generator. Independent sub-streams (per band, per noise
//! component, per training step) are addressed through the ChaCha stream id,
//! so the values a component sees do not depend on how many draws other
//! components made.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::numerics::Tensor;

pub type SeededRng = ChaCha8Rng;

/// Generator for `(seed, stream)`.
pub fn stream(seed: u64, stream: u64) -> SeededRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Packs a domain tag and an index into a stream id.
pub fn stream_id(domain: u32, index: u64) -> u64 {
    (u64::from(domain) << 40) | (index & ((1 << 40) - 1))
}

pub fn standard_normal(rng: &mut SeededRng) -> f64 {
    rng.sample(StandardNormal)
}

/// Standard normal truncated to `[-2, 2]` by rejection.
pub fn truncated_normal(rng: &mut SeededRng) -> f64 {
    loop {
        let z = standard_normal(rng);
        if z.abs() <= 2.0 {
            return z;
        }
    }
}

pub fn uniform(rng: &mut SeededRng, lo: f64, hi: f64) -> f64 {
    if lo == hi {
        return lo;
    }
    rng.random_range(lo..hi)
}

pub fn normal_tensor(rng: &mut SeededRng, shape: &[usize], std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| standard_normal(rng) * std).collect();
    Tensor::new(shape.to_vec(), data).expect("finite samples")
}

pub fn uniform_tensor(rng: &mut SeededRng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| uniform(rng, lo, hi)).collect();
    Tensor::new(shape.to_vec(), data).expect("finite samples")
}

/// Fisher-Yates shuffle of `0..n`.
pub fn permutation(rng: &mut SeededRng, n: usize) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        p.swap(i, j);
    }
    p
}
