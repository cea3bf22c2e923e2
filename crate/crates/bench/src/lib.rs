//! Shared fixtures for the criterion benchmarks.

use lecb::numerics::Tensor;
use lecb::tokenizer::TokenSeq;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Uniform `[-1, 1)` matrix from a fixed seed.
pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::matrix(rows, cols, data).expect("finite values")
}

/// `n` random phrases of 1..=`max_len` tokens drawn from `vocab` ids.
pub fn random_phrases(n: usize, max_len: usize, vocab: u32, seed: u64) -> Vec<TokenSeq> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let len = rng.random_range(1..=max_len);
            let ids: Vec<u32> = (0..len).map(|_| rng.random_range(4..vocab)).collect();
            let mut word_start = vec![false; len];
            word_start[0] = true;
            TokenSeq {
                ids,
                word_start,
                text: String::new(),
            }
        })
        .collect()
}
