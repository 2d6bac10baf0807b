//! Cost of evaluating the calibration-weighted error during refinement.
//!
//! The direct path recomputes `||R Xᵀ||²` from raw activations at every
//! refinement step; the reformulated path builds `S = XᵀX` once per column
//! block and evaluates `Tr(R S Rᵀ)` per step. Both kernels count their
//! multiply-accumulates (matrix products only) and are timed.

use std::hint::black_box;
use std::time::Instant;

use crate::binarize::{binary_first_order, Reconstruct};
use crate::error::{Error, Result};
use crate::synth::{channel_profile, planted_layer, rng_for, SynthCalib};
use crate::tensor::{dot, BitMask, Matrix};
use rand::Rng;
use rand_distr::StandardNormal;

/// Multiply-accumulate counter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct OpCounter {
    pub macs: u64,
}

impl OpCounter {
    fn add(&mut self, macs: u64) {
        self.macs += macs;
    }
}

/// `Σ_s ||R x_s||²` over the rows of `X`; `n·k·L` MACs.
pub fn direct_l2(r: &Matrix, x: &Matrix, ops: &mut OpCounter) -> Result<f64> {
    if r.cols() != x.cols() {
        return Err(Error::shape("direct_l2", r.cols(), x.cols()));
    }
    let mut acc = 0.0;
    for s in 0..x.rows() {
        let xs = x.row(s);
        for i in 0..r.rows() {
            let y = dot(r.row(i), xs);
            acc += y * y;
        }
    }
    ops.add((r.rows() * r.cols() * x.rows()) as u64);
    Ok(acc)
}

/// `XᵀX`; `k²·L` MACs.
pub fn gram(x: &Matrix, ops: &mut OpCounter) -> Matrix {
    let k = x.cols();
    let mut s = Matrix::zeros(k, k);
    for t in 0..x.rows() {
        let xt = x.row(t);
        for (a, &xa) in xt.iter().enumerate() {
            for (dst, &xb) in s.row_mut(a).iter_mut().zip(xt) {
                *dst += xa * xb;
            }
        }
    }
    ops.add((k * k * x.rows()) as u64);
    s
}

/// `Tr(R S Rᵀ)`; `n·k²` MACs.
pub fn reformulated_l2(r: &Matrix, s: &Matrix, ops: &mut OpCounter) -> Result<f64> {
    if s.rows() != r.cols() || s.cols() != r.cols() {
        return Err(Error::shape("reformulated_l2", r.cols(), s.rows()));
    }
    let mut acc = 0.0;
    for i in 0..r.rows() {
        let ri = r.row(i);
        for (j, &rj) in ri.iter().enumerate() {
            acc += rj * dot(s.row(j), ri);
        }
    }
    ops.add((r.rows() * r.cols() * r.cols()) as u64);
    Ok(acc)
}

/// `1 / (k (1/(nT) + 1/(BL)))`.
pub fn eta_formula(n: usize, samples: usize, iterations: usize, block: usize) -> f64 {
    1.0 / (block as f64 * (1.0 / (n * iterations) as f64 + 1.0 / samples as f64))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchConfig {
    pub n: usize,
    pub m: usize,
    /// Calibration rows `B·L`.
    pub samples: usize,
    pub iterations: usize,
    pub block: usize,
    pub seed: u64,
    /// When set below `samples`, the direct path runs on this many rows of
    /// one step per block and its time and count are scaled up linearly.
    pub direct_sample_rows: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchResult {
    pub config: BenchConfig,
    pub direct: OpCounter,
    pub reformulated: OpCounter,
    pub eta_counted: f64,
    pub eta_formula: f64,
    pub direct_seconds: f64,
    pub reformulated_seconds: f64,
    pub eta_wall: f64,
    /// Largest relative disagreement between the two paths' error values.
    pub l2_rel_diff: f64,
}

/// Runs both error-evaluation paths over a full `n x m` layer of `m/k`
/// column blocks and `T` refinement steps.
pub fn bench_l2_paths(cfg: &BenchConfig) -> Result<BenchResult> {
    let BenchConfig {
        n,
        m,
        samples,
        iterations,
        block,
        seed,
        direct_sample_rows,
    } = *cfg;
    if n == 0 || m == 0 || samples == 0 || iterations == 0 || block == 0 {
        return Err(Error::InvalidValue("bench sizes must all be at least 1".into()));
    }
    let k = block.min(m);
    let sampled = direct_sample_rows.filter(|&s| s > 0 && s < samples);
    let w = planted_layer(n, m, seed);
    let mut rng = rng_for(seed, 2 << 32 | m as u64);
    let profile = channel_profile(m, &SynthCalib::default(), &mut rng);

    let mut direct = OpCounter::default();
    let mut reformulated = OpCounter::default();
    let (mut direct_seconds, mut reformulated_seconds) = (0.0, 0.0);
    let mut l2_rel_diff: f64 = 0.0;
    let mut b0 = 0;
    while b0 < m {
        let b1 = (b0 + k).min(m);
        let wb = w.columns(b0..b1);
        let r = wb.sub(&binary_first_order(&wb, &BitMask::full(n, b1 - b0))?.reconstruct())?;
        let x = Matrix::from_fn(samples, b1 - b0, |_, c| {
            let g: f64 = rng.sample(StandardNormal);
            g * profile[b0 + c]
        });

        let start = Instant::now();
        let s = gram(&x, &mut reformulated);
        let mut reform_value = 0.0;
        for _ in 0..iterations {
            reform_value = black_box(reformulated_l2(&r, &s, &mut reformulated)?);
        }
        reformulated_seconds += start.elapsed().as_secs_f64();

        match sampled {
            None => {
                let start = Instant::now();
                let mut direct_value = 0.0;
                for _ in 0..iterations {
                    direct_value = black_box(direct_l2(&r, &x, &mut direct)?);
                }
                direct_seconds += start.elapsed().as_secs_f64();
                l2_rel_diff = l2_rel_diff.max(rel_diff(direct_value, reform_value));
            }
            Some(rows) => {
                let sub = Matrix::from_fn(rows, b1 - b0, |i, c| x.get(i, c));
                let mut step = OpCounter::default();
                let start = Instant::now();
                let direct_value = black_box(direct_l2(&r, &sub, &mut step)?);
                let scale = samples as f64 / rows as f64 * iterations as f64;
                direct_seconds += start.elapsed().as_secs_f64() * scale;
                direct.add((step.macs as u128 * samples as u128 * iterations as u128 / rows as u128) as u64);
                let s_sub = gram(&sub, &mut OpCounter::default());
                let check = reformulated_l2(&r, &s_sub, &mut OpCounter::default())?;
                l2_rel_diff = l2_rel_diff.max(rel_diff(direct_value, check));
            }
        }
        b0 = b1;
    }
    Ok(BenchResult {
        config: *cfg,
        direct,
        reformulated,
        eta_counted: direct.macs as f64 / reformulated.macs as f64,
        eta_formula: eta_formula(n, samples, iterations, k),
        direct_seconds,
        reformulated_seconds,
        eta_wall: direct_seconds / reformulated_seconds.max(f64::MIN_POSITIVE),
        l2_rel_diff,
    })
}

fn rel_diff(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(n: usize, m: usize, samples: usize, iterations: usize, block: usize) -> BenchConfig {
        BenchConfig {
            n,
            m,
            samples,
            iterations,
            block,
            seed: 1,
            direct_sample_rows: None,
        }
    }

    #[test]
    fn counted_ops_follow_the_closed_form() {
        let r = bench_l2_paths(&cfg(16, 32, 200, 3, 8)).unwrap();
        assert_eq!(r.direct.macs, 3 * 4 * 16 * 8 * 200);
        assert_eq!(r.reformulated.macs, 4 * 64 * 200 + 3 * 4 * 16 * 64);
        assert!((r.eta_counted - r.eta_formula).abs() < 1e-12 * r.eta_formula);
        assert!(r.l2_rel_diff < 1e-9);
    }

    #[test]
    fn doubling_block_halves_eta() {
        let a = bench_l2_paths(&cfg(16, 32, 256, 2, 4)).unwrap();
        let b = bench_l2_paths(&cfg(16, 32, 256, 2, 8)).unwrap();
        assert!((a.eta_counted / b.eta_counted - 2.0).abs() < 1e-12);
    }

    #[test]
    fn sampled_direct_path_extrapolates_counts() {
        let full = bench_l2_paths(&cfg(8, 16, 64, 2, 8)).unwrap();
        let sampled = bench_l2_paths(&BenchConfig {
            direct_sample_rows: Some(16),
            ..cfg(8, 16, 64, 2, 8)
        })
        .unwrap();
        assert_eq!(full.direct, sampled.direct);
        assert_eq!(full.reformulated, sampled.reformulated);
        assert!(sampled.l2_rel_diff < 1e-9);
    }
}
