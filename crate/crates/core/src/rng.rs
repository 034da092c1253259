//! Seeded counter-based random streams.
//!
//! Every stochastic operation takes an explicit seed and draws from a ChaCha8
//! stream keyed by that seed; independent sub-streams are selected with the
//! stream counter instead of by reseeding.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::linalg::DenseMatrix;

pub type Stream = ChaCha8Rng;

pub fn stream(seed: u64, substream: u64) -> Stream {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(substream);
    rng
}

pub fn gaussian(rng: &mut Stream) -> f64 {
    StandardNormal.sample(rng)
}

pub fn gaussian_vec(rng: &mut Stream, n: usize) -> Vec<f64> {
    (0..n).map(|_| gaussian(rng)).collect()
}

pub fn gaussian_matrix(rng: &mut Stream, rows: usize, cols: usize) -> DenseMatrix {
    DenseMatrix::from_fn(rows, cols, |_, _| gaussian(rng))
}

/// Uniform random unit vector.
pub fn unit_vec(rng: &mut Stream, n: usize) -> Vec<f64> {
    loop {
        let v = gaussian_vec(rng, n);
        let nrm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if nrm > 1e-12 {
            return v.into_iter().map(|x| x / nrm).collect();
        }
    }
}
