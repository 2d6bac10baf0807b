//! Seeded synthetic weights and calibration activations.
//!
//! Activations are Gaussian with a per-column scale profile in which a few
//! outlier channels are amplified, emulating the column-wise deviations seen
//! in real transformer activations. Weights carry lognormal row and column
//! magnitudes on top of Gaussian entries.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, StandardNormal};

use crate::tensor::Matrix;

/// Shape and outlier profile of synthetic calibration batches.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthCalib {
    /// Number of batches (sequences).
    pub samples: usize,
    /// Rows (tokens) per batch.
    pub seq_len: usize,
    /// Fraction of input channels that are amplified.
    pub outlier_fraction: f64,
    /// Scale of the amplified channels relative to the rest.
    pub outlier_scale: f64,
}

impl Default for SynthCalib {
    fn default() -> Self {
        Self {
            samples: 128,
            seq_len: 8,
            outlier_fraction: 0.02,
            outlier_scale: 8.0,
        }
    }
}

/// Generator seeded by `(seed, stream)`, so layers of equal width share data.
pub fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Per-channel activation scales: mild lognormal jitter, with
/// `ceil(outlier_fraction * m)` channels multiplied by `outlier_scale`.
pub fn channel_profile(m: usize, calib: &SynthCalib, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let jitter = LogNormal::new(0.0, 0.25).expect("valid lognormal");
    let mut scales: Vec<f64> = (0..m).map(|_| jitter.sample(rng)).collect();
    let outliers = ((calib.outlier_fraction * m as f64).ceil() as usize).min(m);
    for j in sample(rng, m, outliers) {
        scales[j] *= calib.outlier_scale;
    }
    scales
}

/// Calibration batches (`seq_len x m` each) for input width `m`.
pub fn synthetic_batches(m: usize, calib: &SynthCalib, seed: u64) -> Vec<Matrix> {
    let mut rng = rng_for(seed, m as u64);
    let scales = channel_profile(m, calib, &mut rng);
    (0..calib.samples)
        .map(|_| {
            Matrix::from_fn(calib.seq_len, m, |_, c| {
                let g: f64 = rng.sample(StandardNormal);
                g * scales[c]
            })
        })
        .collect()
}

/// `n x m` weights `W_ij = u_i v_j g_ij` with lognormal `u`, `v` (the planted
/// column deviations) and standard normal `g`.
pub fn planted_layer(n: usize, m: usize, seed: u64) -> Matrix {
    let mut rng = rng_for(seed, 1 << 32 | m as u64);
    let row = LogNormal::new(0.0, 0.2).expect("valid lognormal");
    let col = LogNormal::new(0.0, 0.6).expect("valid lognormal");
    let u: Vec<f64> = (0..n).map(|_| row.sample(&mut rng)).collect();
    let v: Vec<f64> = (0..m).map(|_| col.sample(&mut rng)).collect();
    Matrix::from_fn(n, m, |r, c| {
        let g: f64 = rng.sample(StandardNormal);
        0.02 * u[r] * v[c] * g
    })
}
