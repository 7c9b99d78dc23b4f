//! Seeded randomness. Every stochastic routine in the crate draws from a
//! [`ChaCha8Rng`] derived from an explicit seed.

use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
pub use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::scalar::Real;
use crate::tensor::Tensor;

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives an independent seed for a named sub-task.
pub fn derive(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn permutation(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}

/// Tensor of `N(mean, std^2)` draws; `std == 0` yields `mean` exactly.
pub fn normal_tensor<T: Real>(shape: &[usize], mean: f64, std: f64, rng: &mut ChaCha8Rng) -> Tensor<T> {
    if std == 0.0 {
        return Tensor::full(shape, T::lit(mean));
    }
    let normal = Normal::new(mean, std).expect("standard deviation is finite and positive");
    Tensor::from_fn(shape, |_| T::lit(normal.sample(rng)))
}
