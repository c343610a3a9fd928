//! Fixtures shared by the benchmarks.

use ndarray::Array2;
use neurocache::CacheBuffer;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_states(rows: usize, dim: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((rows, dim), |_| rng.random_range(-1.0..1.0))
}

/// A cache of capacity `m` filled to the brim with random states.
pub fn full_cache(m: usize, dim: usize, seed: u64) -> CacheBuffer {
    let mut cache = CacheBuffer::new(m, dim).expect("m, dim >= 1");
    cache
        .update(random_states(m, dim, seed).view())
        .expect("rows fit the capacity");
    cache
}

pub fn random_tokens(len: usize, vocab: usize, seed: u64) -> Vec<u32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.random_range(0..vocab as u32)).collect()
}
