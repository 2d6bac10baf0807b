//! Row-column binarization: `Ŵ = alpha^r alpha^cᵀ ⊙ B` with no mean term.
//!
//! Signs are fixed at `sign(W)`; refinement alternates the two closed-form
//! least-squares scale updates, row scales first. Only the outer product of
//! the scales is identified, so reconstructions are what get compared.

use crate::binarize::{residual, row_l1, ArbStep, ArbTrace, Reconstruct, ALPHA_EPS};
use crate::error::{Error, Result};
use crate::tensor::{BitMask, Matrix, SignPlane};

/// One sign plane with its row and column scales.
#[derive(Debug, Clone, PartialEq)]
pub struct RowColPlane {
    pub alpha_r: Vec<f64>,
    pub alpha_c: Vec<f64>,
    pub signs: SignPlane,
}

impl RowColPlane {
    #[inline]
    pub fn value_at(&self, r: usize, c: usize) -> f64 {
        self.alpha_r[r] * self.alpha_c[c] * self.signs.sign(r, c)
    }

    /// Rescales `alpha_c` so the mean of `|alpha_c|` over columns touched by
    /// `mask` is 1, folding the factor into `alpha_r`. The reconstruction is
    /// unchanged up to rounding.
    pub fn normalize_gauge(&mut self, mask: &BitMask) {
        let cols: Vec<usize> = (0..mask.cols())
            .filter(|&c| (0..mask.rows()).any(|r| mask.get(r, c)))
            .collect();
        if cols.is_empty() {
            return;
        }
        let g = cols.iter().map(|&c| self.alpha_c[c].abs()).sum::<f64>() / cols.len() as f64;
        if g > 0.0 && g.is_finite() {
            for a in &mut self.alpha_c {
                *a /= g;
            }
            for a in &mut self.alpha_r {
                *a *= g;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RowColQuant {
    pub first: RowColPlane,
    pub second: Option<RowColPlane>,
    pub mask: BitMask,
}

impl RowColQuant {
    pub fn planes(&self) -> impl Iterator<Item = &RowColPlane> {
        std::iter::once(&self.first).chain(self.second.as_ref())
    }
}

impl Reconstruct for RowColQuant {
    fn mask(&self) -> &BitMask {
        &self.mask
    }

    #[inline]
    fn value_at(&self, r: usize, c: usize) -> f64 {
        let mut v = self.first.value_at(r, c);
        if let Some(p) = &self.second {
            v += p.value_at(r, c);
        }
        v
    }
}

/// Closed-form row and column scales with `B = sign(W)` on the mask.
/// Rows whose scale vanishes are skipped when averaging column scales.
pub fn rc_init(w: &Matrix, mask: &BitMask) -> Result<RowColQuant> {
    w.check_mask("rc_init", mask)?;
    w.ensure_finite()?;
    let (n, m) = w.shape();
    let alpha_r: Vec<f64> = (0..n)
        .map(|r| {
            let mut sum = 0.0;
            let mut count = 0usize;
            for (c, &v) in w.row(r).iter().enumerate() {
                if mask.get(r, c) {
                    sum += v.abs();
                    count += 1;
                }
            }
            sum / count.max(1) as f64
        })
        .collect();
    let mut col_sum = vec![0.0; m];
    let mut col_count = vec![0usize; m];
    for (r, &ar) in alpha_r.iter().enumerate() {
        if ar <= ALPHA_EPS {
            continue;
        }
        for (c, &v) in w.row(r).iter().enumerate() {
            if mask.get(r, c) {
                col_sum[c] += (v / ar).abs();
                col_count[c] += 1;
            }
        }
    }
    let alpha_c = col_sum
        .iter()
        .zip(&col_count)
        .map(|(s, &k)| s / k.max(1) as f64)
        .collect();
    let signs = SignPlane::from_fn(n, m, |r, c| !mask.get(r, c) || w.get(r, c) >= 0.0);
    Ok(RowColQuant {
        first: RowColPlane {
            alpha_r,
            alpha_c,
            signs,
        },
        second: None,
        mask: mask.clone(),
    })
}

/// `alpha^r_i = Σ_j W_ij alpha^c_j B_ij / (Σ_j (alpha^c_j)² + eps)` over the mask.
pub fn refine_alpha_r(target: &Matrix, plane: &RowColPlane, mask: &BitMask) -> Result<Vec<f64>> {
    target.check_mask("refine_alpha_r", mask)?;
    let mut degenerate = 0usize;
    let out = (0..target.rows())
        .map(|r| {
            let (mut num, mut den) = (0.0, 0.0);
            for (c, &v) in target.row(r).iter().enumerate() {
                if mask.get(r, c) {
                    let x = plane.alpha_c[c] * plane.signs.sign(r, c);
                    num += v * x;
                    den += x * x;
                }
            }
            if den <= ALPHA_EPS && mask.count_row(r) > 0 {
                degenerate += 1;
            }
            num / (den + ALPHA_EPS)
        })
        .collect();
    if degenerate > 0 {
        log::debug!("refine_alpha_r: {degenerate} rows with vanishing column scales");
    }
    Ok(out)
}

/// Column-wise mirror of [`refine_alpha_r`].
pub fn refine_alpha_c(target: &Matrix, plane: &RowColPlane, mask: &BitMask) -> Result<Vec<f64>> {
    target.check_mask("refine_alpha_c", mask)?;
    let m = target.cols();
    let mut num = vec![0.0; m];
    let mut den = vec![0.0; m];
    for r in 0..target.rows() {
        let ar = plane.alpha_r[r];
        for (c, &v) in target.row(r).iter().enumerate() {
            if mask.get(r, c) {
                let x = ar * plane.signs.sign(r, c);
                num[c] += v * x;
                den[c] += x * x;
            }
        }
    }
    Ok(num.iter().zip(&den).map(|(a, b)| a / (b + ALPHA_EPS)).collect())
}

fn rc_step(w: &Matrix, quant: &RowColQuant) -> Result<ArbStep> {
    let e = row_l1(w, quant, &quant.mask)?;
    Ok(ArbStep {
        alpha: quant.first.alpha_r.clone(),
        alpha2: quant
            .second
            .as_ref()
            .map(|p| p.alpha_r.clone())
            .unwrap_or_default(),
        mu: Vec::new(),
        row_error_before_signs: e.clone(),
        row_error: e,
    })
}

/// First-order ARB-RC.
pub fn arbrc_first_order(w: &Matrix, mask: &BitMask, iterations: usize) -> Result<(RowColQuant, ArbTrace)> {
    let mut quant = rc_init(w, mask)?;
    let mut trace = ArbTrace {
        steps: vec![rc_step(w, &quant)?],
    };
    for _ in 0..iterations {
        quant.first.alpha_r = refine_alpha_r(w, &quant.first, mask)?;
        quant.first.alpha_c = refine_alpha_c(w, &quant.first, mask)?;
        trace.steps.push(rc_step(w, &quant)?);
    }
    Ok((quant, trace))
}

/// `W` minus one plane's reconstruction on the mask.
fn without_plane(w: &Matrix, plane: &RowColPlane, mask: &BitMask) -> Matrix {
    Matrix::from_fn(w.rows(), w.cols(), |r, c| {
        if mask.get(r, c) {
            w.get(r, c) - plane.value_at(r, c)
        } else {
            0.0
        }
    })
}

/// Second-order ARB-RC: the second plane is initialized on the first
/// plane's residual; each iteration refines `(alpha^r_1, alpha^c_1)` against
/// `W` minus plane two, then `(alpha^r_2, alpha^c_2)` against `W` minus plane one.
pub fn arbrc_second_order(
    w: &Matrix,
    mask: &BitMask,
    iterations: usize,
) -> Result<(RowColQuant, ArbTrace)> {
    let mut quant = rc_init(w, mask)?;
    let r1 = residual(w, &quant)?;
    quant.second = Some(rc_init(&r1, mask)?.first);
    let mut trace = ArbTrace {
        steps: vec![rc_step(w, &quant)?],
    };
    for _ in 0..iterations {
        let second = quant.second.as_mut().ok_or_else(|| Error::InvalidValue("missing plane".into()))?;
        let t1 = without_plane(w, second, mask);
        quant.first.alpha_r = refine_alpha_r(&t1, &quant.first, mask)?;
        quant.first.alpha_c = refine_alpha_c(&t1, &quant.first, mask)?;
        let t2 = without_plane(w, &quant.first, mask);
        second.alpha_r = refine_alpha_r(&t2, second, mask)?;
        second.alpha_c = refine_alpha_c(&t2, second, mask)?;
        trace.steps.push(rc_step(w, &quant)?);
    }
    Ok((quant, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::binarize::{arb_first_order, quant_error_l1};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn gaussian(n: usize, m: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(n, m, |_, _| rng.sample(StandardNormal))
    }

    /// `|W_ij| = u_i v_j` with random signs.
    fn rank_one_magnitude(n: usize, m: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u: Vec<f64> = (0..n).map(|_| rng.gen_range(0.5..2.0)).collect();
        let v: Vec<f64> = (0..m)
            .map(|j| rng.gen_range(0.5..2.0) * if j % 7 == 0 { 10.0 } else { 1.0 })
            .collect();
        Matrix::from_fn(n, m, |i, j| {
            let s = if rng.gen::<bool>() { 1.0 } else { -1.0 };
            s * u[i] * v[j]
        })
    }

    #[test]
    fn init_exact_rank_one_example() {
        let w = Matrix::from_rows(&[vec![1.0, 2.0], vec![-1.0, -2.0]]).unwrap();
        let q = rc_init(&w, &BitMask::full(2, 2)).unwrap();
        assert_eq!(q.first.alpha_r, vec![1.5, 1.5]);
        assert!((q.first.alpha_c[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((q.first.alpha_c[1] - 4.0 / 3.0).abs() < 1e-15);
        let rec = q.reconstruct();
        for (a, b) in rec.data().iter().zip(w.data()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn init_scalar() {
        let w = Matrix::from_rows(&[vec![-3.5]]).unwrap();
        let q = rc_init(&w, &BitMask::full(1, 1)).unwrap();
        assert_eq!(q.first.alpha_r, vec![3.5]);
        assert_eq!(q.first.alpha_c, vec![1.0]);
        assert_eq!(q.reconstruct().data(), &[-3.5]);
    }

    #[test]
    fn init_is_homogeneous() {
        let w = gaussian(6, 9, 1);
        let mask = BitMask::full(6, 9);
        let q = rc_init(&w, &mask).unwrap();
        let qt = rc_init(&w.scaled(3.0), &mask).unwrap();
        assert_eq!(q.first.signs, qt.first.signs);
        for (a, b) in q.first.alpha_c.iter().zip(&qt.first.alpha_c) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in q.first.alpha_r.iter().zip(&qt.first.alpha_r) {
            assert!((3.0 * a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn refine_examples() {
        let mask = BitMask::full(1, 2);
        let w = Matrix::from_rows(&[vec![1.0, 3.0]]).unwrap();
        let plane = RowColPlane {
            alpha_r: vec![1.0],
            alpha_c: vec![1.0, 1.0],
            signs: SignPlane::from_fn(1, 2, |_, _| true),
        };
        let ar = refine_alpha_r(&w, &plane, &mask).unwrap();
        assert!((ar[0] - 2.0).abs() < 1e-11);

        let w = Matrix::from_rows(&[vec![1.0], vec![3.0]]).unwrap();
        let plane = RowColPlane {
            alpha_r: vec![1.0, 1.0],
            alpha_c: vec![1.0],
            signs: SignPlane::from_fn(2, 1, |_, _| true),
        };
        let ac = refine_alpha_c(&w, &plane, &BitMask::full(2, 1)).unwrap();
        assert!((ac[0] - 2.0).abs() < 1e-11);

        let zero = RowColPlane {
            alpha_r: vec![1.0],
            alpha_c: vec![0.0, 0.0],
            signs: SignPlane::from_fn(1, 2, |_, _| true),
        };
        let w = Matrix::from_rows(&[vec![1.0, 3.0]]).unwrap();
        assert_eq!(refine_alpha_r(&w, &zero, &mask).unwrap(), vec![0.0]);
    }

    #[test]
    fn exact_fit_is_a_fixed_point() {
        let w = Matrix::from_rows(&[vec![1.0, 2.0], vec![-1.0, -2.0]]).unwrap();
        let mask = BitMask::full(2, 2);
        let q = rc_init(&w, &mask).unwrap();
        let ar = refine_alpha_r(&w, &q.first, &mask).unwrap();
        for (a, b) in ar.iter().zip(&q.first.alpha_r) {
            assert!((a - b).abs() < 1e-10);
        }
        let ac = refine_alpha_c(&w, &q.first, &mask).unwrap();
        for (a, b) in ac.iter().zip(&q.first.alpha_c) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn single_row_column_scales_fit_exactly() {
        let w = Matrix::from_rows(&[vec![0.5, -2.0, 3.0, -0.25]]).unwrap();
        let mask = BitMask::full(1, 4);
        let (q, trace) = arbrc_first_order(&w, &mask, 1).unwrap();
        assert!(trace.final_error() < 1e-18);
        assert!(quant_error_l1(&w, &q, &mask).unwrap() < 1e-18);
    }

    #[test]
    fn rank_one_magnitude_stays_exact() {
        let w = rank_one_magnitude(12, 20, 3);
        let (_, trace) = arbrc_first_order(&w, &BitMask::full(12, 20), 15).unwrap();
        assert!(trace.errors().iter().all(|&e| e < 1e-18));
    }

    #[test]
    fn zero_iterations_is_init() {
        let w = gaussian(5, 7, 4);
        let mask = BitMask::full(5, 7);
        let (q, t) = arbrc_first_order(&w, &mask, 0).unwrap();
        assert_eq!(q, rc_init(&w, &mask).unwrap());
        assert_eq!(t.iterations(), 0);
    }

    #[test]
    fn second_plane_on_zero_residual_reduces_to_first_order() {
        let w = rank_one_magnitude(6, 8, 5);
        let mask = BitMask::full(6, 8);
        let (q, t) = arbrc_second_order(&w, &mask, 3).unwrap();
        let second = q.second.unwrap();
        assert!(second.alpha_r.iter().all(|a| a.abs() < 1e-9));
        assert!(t.final_error() < 1e-18);
    }

    #[test]
    fn second_order_exactly_representable() {
        // |W_ij| = u_i (1 + s_ij / 4) with s a checkerboard: row and column
        // sums of s vanish, so plane one recovers u_i B_ij and the residual
        // u_i s_ij B_ij / 4 is itself rank-1 in magnitude.
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (n, m) = (6, 8);
        let u: Vec<f64> = (0..n).map(|_| rng.gen_range(1.0..2.0)).collect();
        let w = Matrix::from_fn(n, m, |i, j| {
            let b = if rng.gen::<bool>() { 1.0 } else { -1.0 };
            let s = if (i + j) % 2 == 0 { 1.0 } else { -1.0 };
            b * u[i] * (1.0 + 0.25 * s)
        });
        let (_, t) = arbrc_second_order(&w, &BitMask::full(n, m), 15).unwrap();
        assert!(t.initial_error() < 1e-20);
        assert!(t.final_error() < 1e-20);
    }

    #[test]
    fn descends_and_second_beats_first() {
        for seed in 0..20 {
            let w = gaussian(16, 16, 100 + seed);
            let mask = BitMask::full(16, 16);
            let (_, t1) = arbrc_first_order(&w, &mask, 15).unwrap();
            let (_, t2) = arbrc_second_order(&w, &mask, 15).unwrap();
            for t in [&t1, &t2] {
                let e = t.errors();
                for p in e.windows(2) {
                    assert!(p[1] <= p[0] + 1e-9 * (e[0] + 1.0));
                }
            }
            assert!(t2.final_error() <= t1.final_error() + 1e-12);
        }
    }

    #[test]
    fn beats_row_only_on_column_deviation() {
        let mut wins = 0;
        let seeds = 500;
        for seed in 0..seeds {
            let mut w = gaussian(64, 64, 1_000 + seed);
            let col = (seed as usize * 13) % 64;
            for r in 0..64 {
                let v = w.get(r, col) * 10.0;
                w.set(r, col, v);
            }
            let mask = BitMask::full(64, 64);
            let (_, rc) = arbrc_first_order(&w, &mask, 15).unwrap();
            let (_, arb) = arb_first_order(&w, &mask, 15).unwrap();
            if rc.final_error() < arb.final_error() {
                wins += 1;
            }
        }
        assert!(wins * 10 >= seeds * 9, "ARB-RC won {wins}/{seeds}");
    }

    #[test]
    fn gauge_normalization_preserves_reconstruction() {
        let w = gaussian(6, 10, 8);
        let mask = BitMask::full(6, 10);
        let (mut q, _) = arbrc_first_order(&w, &mask, 5).unwrap();
        let before = q.reconstruct();
        q.first.normalize_gauge(&mask);
        let mean = q.first.alpha_c.iter().map(|a| a.abs()).sum::<f64>() / 10.0;
        assert!((mean - 1.0).abs() < 1e-12);
        for (a, b) in q.reconstruct().data().iter().zip(before.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
