//! Shared fixtures for the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sgvl_core::synth::{gen_image_text_pair, SyntheticConfig};
use sgvl_core::ImageTextPair;

/// Row-major `n x n` matrix of uniform costs in `[0, 1)`.
pub fn cost_matrix(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n * n).map(|_| rng.random::<f64>()).collect()
}

pub fn image_text_pairs(n: usize, seed: u64) -> Vec<ImageTextPair> {
    let cfg = SyntheticConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| gen_image_text_pair(&cfg, &mut rng)).collect()
}
