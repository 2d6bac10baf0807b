//! First- and second-order binarization with alternating refinement.
//!
//! A first-order quant reconstructs `W ≈ alpha * B + mu` row-wise on the
//! entries of a mask; a second-order quant adds a second sign plane that
//! binarizes the residual of the first. Refinement cycles through
//! closed-form conditional minimizers in the order mean, scale(s), signs.

use crate::error::{Error, Result};
use crate::tensor::{masked_row_mean, BitMask, Matrix, RowParams, SignPlane};

/// Guards the scale denominator of rows whose mask is empty.
pub const ALPHA_EPS: f64 = 1e-12;

/// Anything that reconstructs weights on the entries of a mask.
pub trait Reconstruct {
    fn mask(&self) -> &BitMask;

    /// Reconstructed value at `(r, c)`; meaningful only where the mask is set.
    fn value_at(&self, r: usize, c: usize) -> f64;

    /// Reconstruction on masked entries, zero elsewhere.
    fn reconstruct(&self) -> Matrix {
        let mask = self.mask();
        Matrix::from_fn(mask.rows(), mask.cols(), |r, c| {
            if mask.get(r, c) {
                self.value_at(r, c)
            } else {
                0.0
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FirstOrderQuant {
    pub params: RowParams,
    pub plane: SignPlane,
    pub mask: BitMask,
}

impl Reconstruct for FirstOrderQuant {
    fn mask(&self) -> &BitMask {
        &self.mask
    }

    #[inline]
    fn value_at(&self, r: usize, c: usize) -> f64 {
        self.params.alpha[r] * self.plane.sign(r, c) + self.params.mu[r]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SecondOrderQuant {
    pub alpha1: Vec<f64>,
    pub alpha2: Vec<f64>,
    /// Combined mean of both constituent binarizations.
    pub mu: Vec<f64>,
    pub plane1: SignPlane,
    pub plane2: SignPlane,
    pub mask: BitMask,
}

impl Reconstruct for SecondOrderQuant {
    fn mask(&self) -> &BitMask {
        &self.mask
    }

    #[inline]
    fn value_at(&self, r: usize, c: usize) -> f64 {
        self.alpha1[r] * self.plane1.sign(r, c) + self.alpha2[r] * self.plane2.sign(r, c) + self.mu[r]
    }
}

/// Snapshot of the parameters after one refinement step (step 0 is the
/// closed-form initialization).
#[derive(Debug, Clone, PartialEq)]
pub struct ArbStep {
    /// Row scale (first plane; `alpha^r` for row-column quants).
    pub alpha: Vec<f64>,
    /// Second-plane row scale, empty for first-order quants.
    pub alpha2: Vec<f64>,
    /// Row mean, empty for methods without one.
    pub mu: Vec<f64>,
    /// Per-row error after the full step.
    pub row_error: Vec<f64>,
    /// Per-row error after the continuous updates, before any sign refresh.
    /// Equals `row_error` for methods that keep the signs fixed.
    pub row_error_before_signs: Vec<f64>,
}

impl ArbStep {
    pub fn error(&self) -> f64 {
        self.row_error.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ArbTrace {
    pub steps: Vec<ArbStep>,
}

impl ArbTrace {
    /// Number of refinement iterations recorded (excluding the initialization).
    pub fn iterations(&self) -> usize {
        self.steps.len().saturating_sub(1)
    }

    pub fn errors(&self) -> Vec<f64> {
        self.steps.iter().map(ArbStep::error).collect()
    }

    pub fn initial_error(&self) -> f64 {
        self.steps.first().map_or(0.0, ArbStep::error)
    }

    pub fn final_error(&self) -> f64 {
        self.steps.last().map_or(0.0, ArbStep::error)
    }
}

fn check_finite(w: &Matrix) -> Result<()> {
    w.ensure_finite()
}

/// Plane of `sign(W - mu)` on masked entries, `+1` elsewhere.
fn sign_plane(w: &Matrix, mask: &BitMask, mu: &[f64]) -> SignPlane {
    SignPlane::from_fn(w.rows(), w.cols(), |r, c| {
        !mask.get(r, c) || w.get(r, c) - mu[r] >= 0.0
    })
}

/// Closed-form first-order binarization restricted to `mask`.
pub fn binary_first_order(w: &Matrix, mask: &BitMask) -> Result<FirstOrderQuant> {
    w.check_mask("binary_first_order", mask)?;
    check_finite(w)?;
    let mu = masked_row_mean(w, mask)?;
    let alpha = (0..w.rows())
        .map(|r| {
            let mut sum = 0.0;
            let mut count = 0usize;
            for (c, &v) in w.row(r).iter().enumerate() {
                if mask.get(r, c) {
                    sum += (v - mu[r]).abs();
                    count += 1;
                }
            }
            sum / count.max(1) as f64
        })
        .collect();
    let plane = sign_plane(w, mask, &mu);
    Ok(FirstOrderQuant {
        params: RowParams { alpha, mu },
        plane,
        mask: mask.clone(),
    })
}

/// `W - reconstruct(Q)` on the quant's mask, zero elsewhere.
pub fn residual<Q: Reconstruct + ?Sized>(w: &Matrix, quant: &Q) -> Result<Matrix> {
    let mask = quant.mask();
    w.check_mask("residual", mask)?;
    Ok(Matrix::from_fn(w.rows(), w.cols(), |r, c| {
        if mask.get(r, c) {
            w.get(r, c) - quant.value_at(r, c)
        } else {
            0.0
        }
    }))
}

/// Per-row squared error over the entries of `mask`.
pub fn row_l1<Q: Reconstruct + ?Sized>(w: &Matrix, quant: &Q, mask: &BitMask) -> Result<Vec<f64>> {
    w.check_mask("quant_error_l1", mask)?;
    w.check_mask("quant_error_l1", quant.mask())?;
    Ok((0..w.rows())
        .map(|r| {
            let mut acc = 0.0;
            for (c, &v) in w.row(r).iter().enumerate() {
                if mask.get(r, c) {
                    let d = v - quant.value_at(r, c);
                    acc += d * d;
                }
            }
            acc
        })
        .collect())
}

/// Squared reconstruction error summed over the entries of `mask`.
pub fn quant_error_l1<Q: Reconstruct + ?Sized>(w: &Matrix, quant: &Q, mask: &BitMask) -> Result<f64> {
    Ok(row_l1(w, quant, mask)?.iter().sum())
}

/// Shifts the mean by the masked row mean of the residual.
pub fn refine_mu(mu: &[f64], residual: &Matrix, mask: &BitMask) -> Result<Vec<f64>> {
    if mu.len() != residual.rows() {
        return Err(Error::shape("refine_mu", residual.rows(), mu.len()));
    }
    let delta = masked_row_mean(residual, mask)?;
    Ok(mu.iter().zip(&delta).map(|(m, d)| m + d).collect())
}

/// Masked least-squares row scale for fixed signs and mean.
pub fn refine_alpha(plane: &SignPlane, w: &Matrix, mask: &BitMask, mu: &[f64]) -> Result<Vec<f64>> {
    w.check_mask("refine_alpha", mask)?;
    if plane.shape() != w.shape() {
        return Err(Error::shape("refine_alpha", format!("{:?}", w.shape()), format!("{:?}", plane.shape())));
    }
    if mu.len() != w.rows() {
        return Err(Error::shape("refine_alpha", w.rows(), mu.len()));
    }
    Ok((0..w.rows())
        .map(|r| {
            let mut num = 0.0;
            let mut den = 0.0;
            for (c, &v) in w.row(r).iter().enumerate() {
                if mask.get(r, c) {
                    let b = plane.sign(r, c);
                    num += b * (v - mu[r]);
                    den += b * b;
                }
            }
            num / (den + ALPHA_EPS)
        })
        .collect())
}

fn first_order_step(w: &Matrix, quant: &FirstOrderQuant, before: Vec<f64>) -> Result<ArbStep> {
    Ok(ArbStep {
        alpha: quant.params.alpha.clone(),
        alpha2: Vec::new(),
        mu: quant.params.mu.clone(),
        row_error: row_l1(w, quant, &quant.mask)?,
        row_error_before_signs: before,
    })
}

/// First-order alternating refined binarization with `iterations` cycles of
/// mean, scale and sign updates.
pub fn arb_first_order(
    w: &Matrix,
    mask: &BitMask,
    iterations: usize,
) -> Result<(FirstOrderQuant, ArbTrace)> {
    let mut quant = binary_first_order(w, mask)?;
    let init = row_l1(w, &quant, mask)?;
    let mut trace = ArbTrace {
        steps: vec![first_order_step(w, &quant, init)?],
    };
    for _ in 0..iterations {
        let r = residual(w, &quant)?;
        let mu = refine_mu(&quant.params.mu, &r, mask)?;
        let alpha = refine_alpha(&quant.plane, w, mask, &mu)?;
        quant.params = RowParams { alpha, mu };
        let before = row_l1(w, &quant, mask)?;
        quant.plane = sign_plane(w, mask, &quant.params.mu);
        trace.steps.push(first_order_step(w, &quant, before)?);
    }
    Ok((quant, trace))
}

/// Second-order binarization initialized by binarizing the residual of the
/// first plane; the two means are combined.
pub fn binary_second_order(w: &Matrix, mask: &BitMask) -> Result<SecondOrderQuant> {
    let first = binary_first_order(w, mask)?;
    let r = residual(w, &first)?;
    let second = binary_first_order(&r, mask)?;
    let mu = first
        .params
        .mu
        .iter()
        .zip(&second.params.mu)
        .map(|(a, b)| a + b)
        .collect();
    Ok(SecondOrderQuant {
        alpha1: first.params.alpha,
        alpha2: second.params.alpha,
        mu,
        plane1: first.plane,
        plane2: second.plane,
        mask: mask.clone(),
    })
}

/// Sequential conditional updates of both plane scales: `alpha1` against
/// `W - mu - alpha2 B2`, then `alpha2` against `W - mu - alpha1' B1`.
pub fn refine_alphas_second(
    quant: &SecondOrderQuant,
    w: &Matrix,
    mask: &BitMask,
    mu: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    w.check_mask("refine_alphas_second", mask)?;
    if mu.len() != w.rows() || quant.plane1.shape() != w.shape() {
        return Err(Error::shape("refine_alphas_second", w.rows(), mu.len()));
    }
    let n = w.rows();
    let mut a1 = vec![0.0; n];
    let mut a2 = vec![0.0; n];
    for r in 0..n {
        let (mut num, mut den) = (0.0, 0.0);
        for (c, &v) in w.row(r).iter().enumerate() {
            if mask.get(r, c) {
                let b1 = quant.plane1.sign(r, c);
                num += b1 * (v - mu[r] - quant.alpha2[r] * quant.plane2.sign(r, c));
                den += 1.0;
            }
        }
        a1[r] = num / (den + ALPHA_EPS);
        let (mut num, mut den) = (0.0, 0.0);
        for (c, &v) in w.row(r).iter().enumerate() {
            if mask.get(r, c) {
                let b2 = quant.plane2.sign(r, c);
                num += b2 * (v - mu[r] - a1[r] * quant.plane1.sign(r, c));
                den += 1.0;
            }
        }
        a2[r] = num / (den + ALPHA_EPS);
    }
    Ok((a1, a2))
}

/// Nearest of `±a1 ± a2` to `target`, as `(b1 positive, b2 positive)`.
///
/// The four candidates are sorted and the insertion point of `target` is
/// found by binary search. Equidistant candidates resolve to the larger
/// value; coinciding values resolve to the combination with more `+` signs,
/// first by `b1`.
pub fn nearest_sign_pair(target: f64, a1: f64, a2: f64) -> (bool, bool) {
    // (value, combination index); index bits: 2 = b1 positive, 1 = b2 positive
    let mut cands = [
        (-a1 - a2, 0u8),
        (-a1 + a2, 1u8),
        (a1 - a2, 2u8),
        (a1 + a2, 3u8),
    ];
    cands.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
    let upper = cands.partition_point(|c| c.0 <= target);
    let mut best = match upper {
        0 => 0,
        4 => 3,
        p => {
            let below = (target - cands[p - 1].0).abs();
            let above = (cands[p].0 - target).abs();
            if above <= below {
                p
            } else {
                p - 1
            }
        }
    };
    // Later candidates at the same rounded distance win (larger value, or
    // same value with more positive signs).
    let best_dist = (target - cands[best].0).abs();
    while best + 1 < 4 && (target - cands[best + 1].0).abs() <= best_dist {
        best += 1;
    }
    let idx = cands[best].1;
    (idx & 2 != 0, idx & 1 != 0)
}

/// Jointly re-selects both sign planes element-wise for fixed scales.
pub fn refine_sign_pair(
    w: &Matrix,
    mask: &BitMask,
    mu: &[f64],
    alpha1: &[f64],
    alpha2: &[f64],
) -> Result<(SignPlane, SignPlane)> {
    w.check_mask("refine_sign_pair", mask)?;
    let n = w.rows();
    if mu.len() != n || alpha1.len() != n || alpha2.len() != n {
        return Err(Error::shape("refine_sign_pair", n, mu.len()));
    }
    let m = w.cols();
    let mut pairs = vec![(true, true); n * m];
    for r in 0..n {
        for c in 0..m {
            if mask.get(r, c) {
                pairs[r * m + c] = nearest_sign_pair(w.get(r, c) - mu[r], alpha1[r], alpha2[r]);
            }
        }
    }
    Ok((
        SignPlane::from_fn(n, m, |r, c| pairs[r * m + c].0),
        SignPlane::from_fn(n, m, |r, c| pairs[r * m + c].1),
    ))
}

fn second_order_step(w: &Matrix, quant: &SecondOrderQuant, before: Vec<f64>) -> Result<ArbStep> {
    Ok(ArbStep {
        alpha: quant.alpha1.clone(),
        alpha2: quant.alpha2.clone(),
        mu: quant.mu.clone(),
        row_error: row_l1(w, quant, &quant.mask)?,
        row_error_before_signs: before,
    })
}

/// Second-order alternating refined binarization.
///
/// Each iteration refines the combined mean against the full two-plane
/// residual, then both scales sequentially, then both sign planes jointly.
pub fn arb_second_order(
    w: &Matrix,
    mask: &BitMask,
    iterations: usize,
) -> Result<(SecondOrderQuant, ArbTrace)> {
    let mut quant = binary_second_order(w, mask)?;
    let init = row_l1(w, &quant, mask)?;
    let mut trace = ArbTrace {
        steps: vec![second_order_step(w, &quant, init)?],
    };
    for _ in 0..iterations {
        let r = residual(w, &quant)?;
        quant.mu = refine_mu(&quant.mu, &r, mask)?;
        let (a1, a2) = refine_alphas_second(&quant, w, mask, &quant.mu)?;
        quant.alpha1 = a1;
        quant.alpha2 = a2;
        let before = row_l1(w, &quant, mask)?;
        let (p1, p2) = refine_sign_pair(w, mask, &quant.mu, &quant.alpha1, &quant.alpha2)?;
        quant.plane1 = p1;
        quant.plane2 = p2;
        trace.steps.push(second_order_step(w, &quant, before)?);
    }
    Ok((quant, trace))
}
