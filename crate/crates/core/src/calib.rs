//! Calibration-aware binarization.
//!
//! The output error `||W X - Ŵ X||²` over calibration activations collapses
//! to `Tr(R S Rᵀ)` with `S = Σ_b X_bᵀ X_b` precomputed once. Because the sign
//! planes stay fixed during ARB-X refinement, every update only needs a few
//! bilinear forms per row, which are computed once up front.

use crate::binarize::{
    binary_first_order, binary_second_order, ArbStep, ArbTrace, FirstOrderQuant, SecondOrderQuant,
};
use crate::error::{Error, Result};
use crate::tensor::{dot, BitMask, Matrix, RowParams, SignPlane};

/// Denominator guard for the calibration-weighted updates.
pub const CALIB_EPS: f64 = 1e-12;

/// Accumulated second-moment matrix of calibration activations.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibStats {
    s: Matrix,
    sample_count: usize,
}

impl CalibStats {
    /// Wraps an existing second-moment matrix (must be square).
    pub fn from_second_moment(s: Matrix, sample_count: usize) -> Result<Self> {
        if s.rows() != s.cols() {
            return Err(Error::shape("CalibStats", "square matrix", format!("{:?}", s.shape())));
        }
        s.ensure_finite()?;
        Ok(Self { s, sample_count })
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            s: Matrix::identity(dim),
            sample_count: dim,
        }
    }

    pub fn dim(&self) -> usize {
        self.s.rows()
    }

    pub fn second_moment(&self) -> &Matrix {
        &self.s
    }

    pub fn sample_count(&self) -> usize {
        self.sample_count
    }

    /// Statistics of the input columns in `range` (the diagonal block of `S`).
    pub fn restrict(&self, range: std::ops::Range<usize>) -> CalibStats {
        CalibStats {
            s: self.s.principal_block(range),
            sample_count: self.sample_count,
        }
    }

    /// `1ᵀ S 1`.
    pub fn total(&self) -> f64 {
        self.s.data().iter().sum()
    }

    fn check_dim(&self, op: &'static str, cols: usize) -> Result<()> {
        if cols != self.dim() {
            return Err(Error::shape(op, self.dim(), cols));
        }
        Ok(())
    }
}

/// `S = Σ_b X_bᵀ X_b` over `L x m` activation batches, in batch order.
pub fn accumulate_second_moment(batches: &[Matrix]) -> Result<CalibStats> {
    let first = batches
        .first()
        .ok_or(Error::EmptyCandidates("calibration batches"))?;
    let m = first.cols();
    let mut s = Matrix::zeros(m, m);
    let mut count = 0;
    for batch in batches {
        if batch.cols() != m {
            return Err(Error::shape("accumulate_second_moment", m, batch.cols()));
        }
        for r in 0..batch.rows() {
            let x = batch.row(r);
            for (a, &xa) in x.iter().enumerate() {
                if xa == 0.0 {
                    continue;
                }
                for (dst, &xb) in s.row_mut(a).iter_mut().zip(x) {
                    *dst += xa * xb;
                }
            }
        }
        count += batch.rows();
    }
    Ok(CalibStats {
        s,
        sample_count: count,
    })
}

/// `r S rᵀ` for every row of `R`.
pub fn row_l2(r: &Matrix, stats: &CalibStats) -> Result<Vec<f64>> {
    stats.check_dim("l2_error", r.cols())?;
    let s = &stats.s;
    Ok((0..r.rows())
        .map(|i| {
            let ri = r.row(i);
            let mut acc = 0.0;
            for (j, &rj) in ri.iter().enumerate() {
                if rj != 0.0 {
                    acc += rj * dot(s.row(j), ri);
                }
            }
            acc
        })
        .collect())
}

/// Calibration-weighted error `Tr(R S Rᵀ)`.
pub fn l2_error(r: &Matrix, stats: &CalibStats) -> Result<f64> {
    Ok(row_l2(r, stats)?.iter().sum())
}

/// Per-row Gram matrices of the masked vectors `[w, 1, b1, b2]` under `S`.
///
/// Entry `(a, b)` of row `i` is `y_aᵀ S y_b` where every `y` is zeroed
/// off the row's mask.
struct RowGrams {
    basis: usize,
    grams: Vec<f64>,
}

const W: usize = 0;
const ONE: usize = 1;
const B1: usize = 2;
const B2: usize = 3;

impl RowGrams {
    fn build(w: &Matrix, mask: &BitMask, planes: &[&SignPlane], stats: &CalibStats) -> Self {
        let basis = 2 + planes.len();
        let s = &stats.s;
        let mut grams = vec![0.0; w.rows() * basis * basis];
        let mut idx = Vec::new();
        let mut ys: Vec<Vec<f64>> = vec![Vec::new(); basis];
        let mut sy = Vec::new();
        for i in 0..w.rows() {
            idx.clear();
            idx.extend((0..w.cols()).filter(|&c| mask.get(i, c)));
            for y in ys.iter_mut() {
                y.clear();
            }
            for &c in &idx {
                ys[W].push(w.get(i, c));
                ys[ONE].push(1.0);
                for (p, plane) in planes.iter().enumerate() {
                    ys[B1 + p].push(plane.sign(i, c));
                }
            }
            let g = &mut grams[i * basis * basis..(i + 1) * basis * basis];
            for b in 0..basis {
                // S y_b restricted to the masked indices
                sy.clear();
                for &cj in &idx {
                    let srow = s.row(cj);
                    let mut acc = 0.0;
                    for (l, &cl) in idx.iter().enumerate() {
                        acc += srow[cl] * ys[b][l];
                    }
                    sy.push(acc);
                }
                for a in 0..=b {
                    let v = dot(&ys[a], &sy);
                    g[a * basis + b] = v;
                    g[b * basis + a] = v;
                }
            }
        }
        Self { basis, grams }
    }

    #[inline]
    fn g(&self, row: usize, a: usize, b: usize) -> f64 {
        self.grams[row * self.basis * self.basis + a * self.basis + b]
    }

    /// `cᵀ G c` for coefficients over the basis.
    fn quadratic(&self, row: usize, coef: &[f64]) -> f64 {
        let mut acc = 0.0;
        for a in 0..self.basis {
            for b in 0..self.basis {
                acc += coef[a] * coef[b] * self.g(row, a, b);
            }
        }
        acc.max(0.0)
    }
}

fn check_degenerate(stats: &CalibStats) -> Result<()> {
    if stats.total() <= 0.0 {
        return Err(Error::DegenerateCalibration("1ᵀ S 1 is zero".into()));
    }
    Ok(())
}

fn guarded(num: f64, den: f64) -> Option<f64> {
    (den > CALIB_EPS).then(|| num / den)
}

fn check_inputs(op: &'static str, w: &Matrix, mask: &BitMask, stats: &CalibStats) -> Result<()> {
    w.check_mask(op, mask)?;
    stats.check_dim(op, w.cols())
}

/// Calibration-weighted mean for fixed scale and signs:
/// `mu_i = mᵀ S (w_i - alpha_i b_i) / mᵀ S m` with `m` the row mask.
pub fn refine_mu_x(
    w: &Matrix,
    mask: &BitMask,
    alpha: &[f64],
    plane: &SignPlane,
    stats: &CalibStats,
) -> Result<Vec<f64>> {
    check_inputs("refine_mu_x", w, mask, stats)?;
    check_degenerate(stats)?;
    let grams = RowGrams::build(w, mask, &[plane], stats);
    Ok((0..w.rows())
        .map(|i| mu_update(&grams, i, &[alpha[i]]))
        .collect())
}

/// Calibration-weighted scale for fixed mean and signs:
/// `alpha_i = bᵀ S (w_i - mu_i) / bᵀ S b`.
pub fn refine_alpha_x(
    w: &Matrix,
    mask: &BitMask,
    mu: &[f64],
    plane: &SignPlane,
    stats: &CalibStats,
) -> Result<Vec<f64>> {
    check_inputs("refine_alpha_x", w, mask, stats)?;
    let grams = RowGrams::build(w, mask, &[plane], stats);
    let mut degenerate = 0usize;
    let alpha = (0..w.rows())
        .map(|i| {
            alpha_update(&grams, i, B1, mu[i], &[]).unwrap_or_else(|| {
                degenerate += usize::from(mask.count_row(i) > 0);
                0.0
            })
        })
        .collect();
    if degenerate > 0 {
        log::warn!("refine_alpha_x: {degenerate} rows with vanishing bᵀSb, scale set to 0");
    }
    Ok(alpha)
}

fn mu_update(grams: &RowGrams, i: usize, alphas: &[f64]) -> f64 {
    let mut num = grams.g(i, ONE, W);
    for (p, a) in alphas.iter().enumerate() {
        num -= a * grams.g(i, ONE, B1 + p);
    }
    guarded(num, grams.g(i, ONE, ONE)).unwrap_or(0.0)
}

/// Scale of plane `target` with the other planes' `(index, scale)` held fixed.
fn alpha_update(grams: &RowGrams, i: usize, target: usize, mu: f64, others: &[(usize, f64)]) -> Option<f64> {
    let mut num = grams.g(i, target, W) - mu * grams.g(i, target, ONE);
    for &(p, a) in others {
        num -= a * grams.g(i, target, p);
    }
    guarded(num, grams.g(i, target, target))
}

fn first_order_l2(grams: &RowGrams, params: &RowParams) -> Vec<f64> {
    (0..params.mu.len())
        .map(|i| grams.quadratic(i, &[1.0, -params.mu[i], -params.alpha[i]]))
        .collect()
}

/// ARB-X, first order: closed-form init, then `iterations` rounds of
/// calibration-weighted mean and scale updates with the signs fixed.
/// The trace records per-row `L2`.
pub fn arbx_first_order(
    w: &Matrix,
    mask: &BitMask,
    stats: &CalibStats,
    iterations: usize,
) -> Result<(FirstOrderQuant, ArbTrace)> {
    check_inputs("arbx_first_order", w, mask, stats)?;
    let mut quant = binary_first_order(w, mask)?;
    if iterations > 0 {
        check_degenerate(stats)?;
    }
    let grams = RowGrams::build(w, mask, &[&quant.plane], stats);
    let step = |q: &FirstOrderQuant| {
        let e = first_order_l2(&grams, &q.params);
        ArbStep {
            alpha: q.params.alpha.clone(),
            alpha2: Vec::new(),
            mu: q.params.mu.clone(),
            row_error_before_signs: e.clone(),
            row_error: e,
        }
    };
    let mut trace = ArbTrace {
        steps: vec![step(&quant)],
    };
    for _ in 0..iterations {
        for i in 0..w.rows() {
            let mu = mu_update(&grams, i, &[quant.params.alpha[i]]);
            quant.params.mu[i] = mu;
            if let Some(a) = alpha_update(&grams, i, B1, mu, &[]) {
                quant.params.alpha[i] = a;
            } else {
                quant.params.alpha[i] = 0.0;
            }
        }
        trace.steps.push(step(&quant));
    }
    Ok((quant, trace))
}

/// ARB-X, second order: the mean is refined once against the combined
/// residual, then `alpha1` and `alpha2` sequentially, each with the other
/// plane subtracted. Both sign planes stay fixed.
pub fn arbx_second_order(
    w: &Matrix,
    mask: &BitMask,
    stats: &CalibStats,
    iterations: usize,
) -> Result<(SecondOrderQuant, ArbTrace)> {
    check_inputs("arbx_second_order", w, mask, stats)?;
    let mut quant = binary_second_order(w, mask)?;
    if iterations > 0 {
        check_degenerate(stats)?;
    }
    let grams = RowGrams::build(w, mask, &[&quant.plane1, &quant.plane2], stats);
    let step = |q: &SecondOrderQuant| {
        let e: Vec<f64> = (0..q.mu.len())
            .map(|i| grams.quadratic(i, &[1.0, -q.mu[i], -q.alpha1[i], -q.alpha2[i]]))
            .collect();
        ArbStep {
            alpha: q.alpha1.clone(),
            alpha2: q.alpha2.clone(),
            mu: q.mu.clone(),
            row_error_before_signs: e.clone(),
            row_error: e,
        }
    };
    let mut trace = ArbTrace {
        steps: vec![step(&quant)],
    };
    for _ in 0..iterations {
        for i in 0..w.rows() {
            let mu = mu_update(&grams, i, &[quant.alpha1[i], quant.alpha2[i]]);
            quant.mu[i] = mu;
            quant.alpha1[i] = alpha_update(&grams, i, B1, mu, &[(B2, quant.alpha2[i])]).unwrap_or(0.0);
            quant.alpha2[i] = alpha_update(&grams, i, B2, mu, &[(B1, quant.alpha1[i])]).unwrap_or(0.0);
        }
        trace.steps.push(step(&quant));
    }
    Ok((quant, trace))
}
