//! Seeded random streams.
//!
//! Every experiment derives its randomness from a 64-bit seed plus a stream
//! index. Streams with different indices are independent, so trials and
//! Monte-Carlo chunks can run in any order (or in parallel) and still produce
//! bit-identical results.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_distr::StandardNormal;

pub type StreamRng = ChaCha8Rng;

/// Random stream `stream` derived from `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[inline]
pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

pub fn normal_vector<R: Rng + ?Sized>(len: usize, rng: &mut R) -> DVector<f64> {
    DVector::from_fn(len, |_, _| standard_normal(rng))
}

/// Matrix with i.i.d. N(0, 1) entries, filled column by column.
pub fn normal_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> DMatrix<f64> {
    let data: Vec<f64> = (0..rows * cols).map(|_| standard_normal(rng)).collect();
    DMatrix::from_vec(rows, cols, data)
}
