//! Block-wise error compensation.
//!
//! Columns are quantized one block at a time. After a block is fixed, the
//! quantization error of each of its columns is pushed onto the columns to
//! its right through the upper Cholesky factor `U` of `H⁻¹` (`H⁻¹ = UᵀU`),
//! which is the optimal least-squares correction of the remaining columns
//! under the output-error metric `Tr(R H Rᵀ)`.

use crate::calib::{l2_error, CalibStats};
use crate::error::{Error, Result};
use crate::partition::{from_dmatrix, inverse_spd, to_dmatrix};
use crate::tensor::Matrix;

/// Relative floor applied to the squared pivots `U_jj²` (that is, to the
/// conditional diagonal of `H⁻¹`).
pub const PIVOT_FLOOR: f64 = 1e-12;

/// Upper Cholesky factor of `H⁻¹`.
fn inverse_factor(h: &Matrix) -> Result<Matrix> {
    if h.rows() != h.cols() {
        return Err(Error::shape("compensate", "square Hessian", format!("{:?}", h.shape())));
    }
    h.ensure_finite()?;
    let inv = inverse_spd(h)?;
    let chol = to_dmatrix(&inv).cholesky().ok_or(Error::SingularHessian)?;
    Ok(from_dmatrix(&chol.l().transpose()))
}

/// Sweep state: columns left of `cursor` are frozen at their quantized
/// values, the rest are still real-valued and absorb compensation.
#[derive(Debug, Clone)]
pub struct CompensationState {
    work: Matrix,
    quantized: Matrix,
    u: Matrix,
    pivots: Vec<f64>,
    cursor: usize,
    block: usize,
    steps: usize,
}

impl CompensationState {
    /// Factorizes `H⁻¹` once. `block` is clamped to `[1, m]`.
    pub fn new(w: &Matrix, h: &Matrix, block: usize) -> Result<Self> {
        w.ensure_finite()?;
        if h.rows() != w.cols() {
            return Err(Error::shape("CompensationState::new", w.cols(), h.rows()));
        }
        let u = inverse_factor(h)?;
        let m = w.cols();
        let mean_diag = (0..m).map(|j| u.get(j, j).powi(2)).sum::<f64>() / m as f64;
        let floor = (PIVOT_FLOOR * mean_diag).sqrt();
        let pivots = (0..m).map(|j| u.get(j, j).max(floor)).collect();
        Ok(Self {
            work: w.clone(),
            quantized: Matrix::zeros(w.rows(), m),
            u,
            pivots,
            cursor: 0,
            block: block.clamp(1, m),
            steps: 0,
        })
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    pub fn is_done(&self) -> bool {
        self.cursor >= self.work.cols()
    }

    /// Block steps taken so far.
    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Current working weights (compensated, not yet quantized right of the cursor).
    pub fn working(&self) -> &Matrix {
        &self.work
    }

    /// Quantizes the next block and propagates its error. Returns the
    /// column range that was frozen.
    pub fn step<F>(&mut self, quantizer: &mut F) -> Result<std::ops::Range<usize>>
    where
        F: FnMut(usize, &Matrix) -> Result<Matrix>,
    {
        let m = self.work.cols();
        let n = self.work.rows();
        let b0 = self.cursor;
        let b1 = (b0 + self.block).min(m);
        if b0 >= m {
            return Ok(m..m);
        }
        let q = quantizer(b0, &self.work.columns(b0..b1))?;
        if q.shape() != (n, b1 - b0) {
            return Err(Error::shape(
                "quantizer output",
                format!("{}x{}", n, b1 - b0),
                format!("{}x{}", q.rows(), q.cols()),
            ));
        }
        q.ensure_finite()?;

        // Scaled errors of the block, one row per weight row.
        let kb = b1 - b0;
        let mut err = Matrix::zeros(n, kb);
        for r in 0..n {
            let row = self.work.row_mut(r);
            let qrow = q.row(r);
            let erow = err.row_mut(r);
            for j in 0..kb {
                let col = b0 + j;
                let e = (row[col] - qrow[j]) / self.pivots[col];
                erow[j] = e;
                let urow = &self.u.row(col)[col + 1..b1];
                for (dst, &u) in row[col + 1..b1].iter_mut().zip(urow) {
                    *dst -= e * u;
                }
            }
        }
        if b1 < m {
            for r in 0..n {
                let erow = err.row(r);
                let row = self.work.row_mut(r);
                for (j, &e) in erow.iter().enumerate() {
                    if e == 0.0 {
                        continue;
                    }
                    let urow = &self.u.row(b0 + j)[b1..];
                    for (dst, &u) in row[b1..].iter_mut().zip(urow) {
                        *dst -= e * u;
                    }
                }
            }
        }
        self.quantized.write_columns(b0, &q);
        self.cursor = b1;
        self.steps += 1;
        Ok(b0..b1)
    }

    /// The quantized matrix; errors if blocks remain.
    pub fn finish(self) -> Result<Matrix> {
        if !self.is_done() {
            return Err(Error::InvalidValue(format!(
                "compensation stopped at column {} of {}",
                self.cursor,
                self.work.cols()
            )));
        }
        Ok(self.quantized)
    }
}

/// `Tr(R (H/2) Rᵀ)` for `R = W - Ŵ`.
fn half_hessian_l2(w: &Matrix, q: &Matrix, h: &Matrix) -> Result<f64> {
    let stats = CalibStats::from_second_moment(h.scaled(0.5), 0)?;
    l2_error(&w.sub(q)?, &stats)
}

/// Runs the full compensated sweep. `quantizer(start, block)` must return
/// the quantized values of the `n x kb` block whose first column is `start`.
/// Returns `Ŵ` and its error against the original `W` under `S = H/2`.
pub fn compensated_quantize<F>(w: &Matrix, h: &Matrix, block: usize, mut quantizer: F) -> Result<(Matrix, f64)>
where
    F: FnMut(usize, &Matrix) -> Result<Matrix>,
{
    let mut state = CompensationState::new(w, h, block)?;
    while !state.is_done() {
        state.step(&mut quantizer)?;
    }
    let q = state.finish()?;
    let l2 = half_hessian_l2(w, &q, h)?;
    Ok((q, l2))
}

/// Block-by-block quantization of the original weights, no compensation.
pub fn direct_quantize<F>(w: &Matrix, block: usize, mut quantizer: F) -> Result<Matrix>
where
    F: FnMut(usize, &Matrix) -> Result<Matrix>,
{
    let m = w.cols();
    let k = block.clamp(1, m);
    let mut out = Matrix::zeros(w.rows(), m);
    let mut b0 = 0;
    while b0 < m {
        let b1 = (b0 + k).min(m);
        let q = quantizer(b0, &w.columns(b0..b1))?;
        if q.shape() != (w.rows(), b1 - b0) {
            return Err(Error::shape("quantizer output", b1 - b0, q.cols()));
        }
        out.write_columns(b0, &q);
        b0 = b1;
    }
    Ok(out)
}

/// `(L2 with compensation, L2 without)` on identical inputs.
pub fn compensation_gain<F>(w: &Matrix, h: &Matrix, block: usize, mut quantizer: F) -> Result<(f64, f64)>
where
    F: FnMut(usize, &Matrix) -> Result<Matrix>,
{
    let (_, with) = compensated_quantize(w, h, block, &mut quantizer)?;
    let direct = direct_quantize(w, block, &mut quantizer)?;
    Ok((with, half_hessian_l2(w, &direct, h)?))
}
