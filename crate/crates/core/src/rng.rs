//! Seeded Gaussian noise.
//!
//! Every path owns a ChaCha8 stream selected by `(seed, path)`, so the noise
//! of a path never depends on how paths are scheduled across threads.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const TWO_POW_53: f64 = 9_007_199_254_740_992.0;

/// SplitMix64 finalizer, used to derive independent sub-seeds.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Child seed for sub-task `index` of a run seeded with `seed`.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    mix64(mix64(seed) ^ mix64(index.wrapping_add(0x632b_e59b_d9b4_e019)))
}

/// Gaussian noise for one path.
#[derive(Debug, Clone)]
pub struct PathNoise {
    rng: ChaCha8Rng,
    dim: usize,
}

impl PathNoise {
    pub fn new(seed: u64, path: u64, dim: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(path);
        Self { rng, dim }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Fills `out` (length `dim`) with independent standard normals.
    pub fn fill_step(&mut self, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.dim);
        for v in out.iter_mut() {
            *v = self.rng.sample(StandardNormal);
        }
    }
}

/// Uniform variate in `[0, 1)` from any generator.
pub fn uniform(rng: &mut impl RngCore) -> f64 {
    (rng.next_u64() >> 11) as f64 / TWO_POW_53
}

/// Standard normal from any generator.
pub fn standard_normal(rng: &mut impl RngCore) -> f64 {
    rng.sample(StandardNormal)
}

/// Independent generator for sample `index` of a seeded sampling protocol.
pub fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}
