//! Seed handling and random initialization helpers.
//!
//! Every stochastic component (data generation, weight init, mask sampling)
//! draws from its own [`ChaCha8Rng`] stream, derived from the run seed and a
//! fixed stream index. Streams never share state, so adding draws to one
//! component cannot shift the values another component sees.

use ndarray::ArrayD;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Stream indices for the independent RNG streams of a run.
pub mod stream {
    pub const DATA: u64 = 1;
    pub const INIT: u64 = 2;
    pub const MASK: u64 = 3;
    pub const BATCH: u64 = 4;
    pub const GRADCHECK: u64 = 5;
}

/// Mixes a run seed and a stream index into an independent 64-bit seed.
///
/// Uses the splitmix64 finalizer, which maps distinct inputs to well-spread
/// outputs even when seeds and stream indices are small consecutive integers.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(index)
        .wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// A reproducible generator for one (seed, stream) pair.
pub fn stream_rng(seed: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, index))
}

/// Samples from N(0, std^2) truncated to [-2*std, 2*std] by rejection.
pub fn truncated_normal(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

/// Fills a freshly allocated tensor with truncated-normal values.
pub fn truncated_normal_tensor(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> ArrayD<f64> {
    let mut out = ArrayD::zeros(ndarray::IxDyn(shape));
    for v in out.iter_mut() {
        *v = truncated_normal(rng, std);
    }
    out
}

/// Samples a value uniformly from [lo, hi).
pub fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    rng.gen_range(lo..hi)
}
