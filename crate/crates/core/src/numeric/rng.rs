//! Seeded, platform-independent random generation.
//!
//! All randomness in the crate flows through [`Rng`], a ChaCha8 generator
//! with an explicit 64-bit seed. ChaCha produces the same stream on every
//! platform, and its 64-bit stream counter gives cheap independent
//! sub-streams: `(seed, stream)` fully determines the output.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::numeric::Matrix;

/// Deterministic random generator: identical seeds yield identical streams.
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    /// A generator positioned at the start of the given sub-stream.
    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Rng { seed, stream, inner }
    }

    /// A fresh generator for sub-stream `stream` of the same seed,
    /// independent of how much of this stream has been consumed.
    pub fn substream(&self, stream: u64) -> Rng {
        Self::with_stream(self.seed, stream)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Standard normal draw, computed in f64.
    pub fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(self)
    }

    /// Uniform draw in `[-0.5, 0.5)`.
    pub fn unit_dither(&mut self) -> f64 {
        rand::Rng::random::<f64>(self) - 0.5
    }
}

impl RngCore for Rng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.inner.fill_bytes(dest)
    }
}

/// Matrix with entry `(i, j) ~ Normal(0, per_col_std[j]^2)`, deterministic
/// given the generator state. Draws are consumed in row-major order.
///
/// Panics if `per_col_std.len() != cols` or any std is negative.
pub fn gaussian_matrix(rng: &mut Rng, rows: usize, cols: usize, per_col_std: &[f32]) -> Matrix {
    assert_eq!(per_col_std.len(), cols, "gaussian_matrix: std vector length");
    assert!(per_col_std.iter().all(|s| *s >= 0.0), "gaussian_matrix: negative std");
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows {
        for &std in per_col_std {
            let z = rng.standard_normal();
            data.push((z * std as f64) as f32);
        }
    }
    Matrix::from_vec(rows, cols, data).expect("length is rows*cols by construction")
}
