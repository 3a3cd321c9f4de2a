//! Seeded, splittable random streams.
//!
//! All randomness in the crate flows from one `u64` seed. Each consumer takes
//! its own ChaCha stream so that adding draws in one place never shifts the
//! draws seen by another.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::numerics::Matrix;

pub type StreamRng = ChaCha8Rng;

/// Well-known stream identifiers.
pub mod streams {
    pub const MODEL_INIT: u64 = 1;
    pub const DATASET: u64 = 2;
    pub const BATCHES: u64 = 3;
    pub const EVAL_SPLIT: u64 = 4;
    pub const ALIGNER: u64 = 5;
    pub const TEST: u64 = 99;
}

/// A generator for `(seed, stream)`; distinct streams are independent.
pub fn stream(seed: u64, stream: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Uniform draw in `[-a, a)`.
pub fn symmetric(rng: &mut StreamRng, a: f64) -> f64 {
    (rng.random::<f64>() * 2.0 - 1.0) * a
}

/// `rows × cols` matrix with entries uniform in `[-a, a)`.
pub fn uniform_matrix(rng: &mut StreamRng, rows: usize, cols: usize, a: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| symmetric(rng, a))
}
