//! Seeded random number generation.
//!
//! Every stochastic component (initialization, augmentation, sampling) draws
//! from an [`Rng`] built from an explicit `u64` seed, so runs are reproducible.

use rand::{Rng as _, SeedableRng};
use rand_distr::StandardNormal;
use rand_xoshiro::Xoshiro256PlusPlus;

pub type Rng = Xoshiro256PlusPlus;

pub fn seeded(seed: u64) -> Rng {
    Xoshiro256PlusPlus::seed_from_u64(seed)
}

/// Derives an independent stream for `(seed, stream)` pairs, e.g. a per-record
/// augmentation seed that does not depend on worker scheduling.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    // splitmix64 finalizer over the combined key
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn normal(rng: &mut Rng) -> f32 {
    let v: f64 = rng.sample(StandardNormal);
    v as f32
}

/// Normal(0, std) truncated to two standard deviations by rejection.
pub fn trunc_normal(rng: &mut Rng, std: f32) -> f32 {
    loop {
        let v = normal(rng);
        if v.abs() <= 2.0 {
            return v * std;
        }
    }
}

pub fn uniform(rng: &mut Rng, lo: f32, hi: f32) -> f32 {
    if hi <= lo {
        return lo;
    }
    rng.random_range(lo..hi)
}

pub fn uniform_f64(rng: &mut Rng, lo: f64, hi: f64) -> f64 {
    if hi <= lo {
        return lo;
    }
    rng.random_range(lo..hi)
}

/// Uniform integer in `lo..=hi`.
pub fn int_inclusive(rng: &mut Rng, lo: usize, hi: usize) -> usize {
    if hi <= lo {
        return lo;
    }
    rng.random_range(lo..=hi)
}

pub fn bernoulli(rng: &mut Rng, p: f64) -> bool {
    if p <= 0.0 {
        return false;
    }
    if p >= 1.0 {
        return true;
    }
    rng.random_bool(p)
}

pub fn shuffle<T>(rng: &mut Rng, items: &mut [T]) {
    use rand::seq::SliceRandom;
    items.shuffle(rng);
}
