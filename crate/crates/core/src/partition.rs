//! Saliency, salient-column selection, magnitude group splitting, the
//! column-group bitmap (CGB) and storage accounting.

use nalgebra::DMatrix;

use crate::binarize::{binary_first_order, quant_error_l1};
use crate::calib::CalibStats;
use crate::error::{Error, Result};
use crate::tensor::{BitMask, Matrix};

// ── Hessian ─────────────────────────────────────────────────────────────────

pub(crate) fn to_dmatrix(m: &Matrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.data())
}

pub(crate) fn from_dmatrix(d: &DMatrix<f64>) -> Matrix {
    Matrix::from_fn(d.nrows(), d.ncols(), |r, c| d[(r, c)])
}

/// `H = 2S + λI` with `λ = damping_fraction * mean(diag S)`.
pub fn hessian_from_stats(stats: &CalibStats, damping_fraction: f64) -> Result<Matrix> {
    if !(damping_fraction >= 0.0 && damping_fraction.is_finite()) {
        return Err(Error::InvalidValue(format!("damping fraction {damping_fraction}")));
    }
    let s = stats.second_moment();
    s.ensure_finite()?;
    let m = s.rows();
    let mean_diag = (0..m).map(|j| s.get(j, j)).sum::<f64>() / m as f64;
    let lambda = damping_fraction * mean_diag;
    let h = Matrix::from_fn(m, m, |r, c| 2.0 * s.get(r, c) + if r == c { lambda } else { 0.0 });
    if (0..m).any(|j| h.get(j, j) <= 0.0) {
        return Err(Error::SingularHessian);
    }
    Ok(h)
}

/// `H⁻¹` through a Cholesky factorization.
pub fn inverse_spd(h: &Matrix) -> Result<Matrix> {
    let chol = to_dmatrix(h).cholesky().ok_or(Error::SingularHessian)?;
    Ok(from_dmatrix(&chol.inverse()))
}

/// Diagonal of `H⁻¹`.
pub fn inverse_diag(h: &Matrix) -> Result<Vec<f64>> {
    let inv = inverse_spd(h)?;
    Ok((0..inv.rows()).map(|j| inv.get(j, j)).collect())
}

// ── Saliency ────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityScores {
    /// `s_ij = W_ij² / [H⁻¹]_jj²`.
    pub element: Matrix,
    /// Column sums of `element`.
    pub column: Vec<f64>,
}

pub fn sensitivity(w: &Matrix, inv_diag: &[f64]) -> Result<SensitivityScores> {
    if inv_diag.len() != w.cols() {
        return Err(Error::shape("sensitivity", w.cols(), inv_diag.len()));
    }
    if let Some(j) = inv_diag.iter().position(|&d| d.is_nan() || d <= 0.0) {
        return Err(Error::InvalidValue(format!("inverse-Hessian diagonal entry {j} is not positive")));
    }
    let element = Matrix::from_fn(w.rows(), w.cols(), |r, c| {
        let v = w.get(r, c);
        v * v / (inv_diag[c] * inv_diag[c])
    });
    let mut column = vec![0.0; w.cols()];
    for r in 0..w.rows() {
        for (acc, v) in column.iter_mut().zip(element.row(r)) {
            *acc += v;
        }
    }
    Ok(SensitivityScores { element, column })
}

/// Number of columns marked for a salient fraction `r` of `m` columns.
pub fn salient_count(fraction: f64, m: usize) -> usize {
    ((fraction * m as f64 - 1e-9).ceil().max(0.0) as usize).min(m)
}

/// Column indices ordered by descending score, lower index first on ties.
pub fn rank_columns(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

#[derive(Debug, Clone, PartialEq)]
pub struct SalientChoice {
    /// `1 x m` salient-column mask.
    pub columns: BitMask,
    pub fraction: f64,
    pub error: f64,
    /// Error of every candidate, in candidate order.
    pub candidate_errors: Vec<f64>,
}

/// Grid search over salient fractions: each candidate marks the top
/// `ceil(r m)` columns by aggregate score and is scored by `eval`; the
/// lowest error wins, earliest candidate on ties.
pub fn select_salient_columns<F>(column_scores: &[f64], fractions: &[f64], mut eval: F) -> Result<SalientChoice>
where
    F: FnMut(&BitMask) -> Result<f64>,
{
    if fractions.is_empty() {
        return Err(Error::EmptyCandidates("salient fractions"));
    }
    if let Some(f) = fractions.iter().find(|&&f| !(f > 0.0 && f <= 0.5)) {
        return Err(Error::InvalidValue(format!("salient fraction {f} outside (0, 0.5]")));
    }
    let m = column_scores.len();
    let ranked = rank_columns(column_scores);
    let mut best: Option<(usize, BitMask, f64)> = None;
    let mut errors = Vec::with_capacity(fractions.len());
    for (i, &f) in fractions.iter().enumerate() {
        let cols = BitMask::from_indices(m, &ranked[..salient_count(f, m)]);
        let e = eval(&cols)?;
        errors.push(e);
        if best.as_ref().is_none_or(|(_, _, be)| e < *be) {
            best = Some((i, cols, e));
        }
    }
    let (i, columns, error) = best.expect("non-empty candidates");
    Ok(SalientChoice {
        columns,
        fraction: fractions[i],
        error,
        candidate_errors: errors,
    })
}

// ── Group split ─────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct GroupSplit {
    /// Sparse (large-magnitude) group within the scope.
    pub group: BitMask,
    /// Winning grid percentile, `None` when the single-group sentinel won.
    pub percentile: Option<f64>,
    pub error: f64,
}

/// Lower-interpolated `p`-quantile of sorted values.
pub fn quantile_lower(sorted: &[f64], p: f64) -> f64 {
    let idx = (p * (sorted.len() - 1) as f64).floor() as usize;
    sorted[idx.min(sorted.len() - 1)]
}

/// Splits the scope into concentrated and sparse groups by a magnitude
/// threshold chosen from `grid`.
///
/// Each candidate percentile `p` puts `|W| > quantile_p(|W| over scope)` into
/// the sparse group and is scored as `zone_error(concentrated) +
/// zone_error(sparse)`. A single-group sentinel is evaluated after the grid,
/// so the search never does worse than not splitting. Ties go to the
/// earliest candidate.
pub fn split_groups<F>(w: &Matrix, scope: &BitMask, grid: &[f64], mut zone_error: F) -> Result<GroupSplit>
where
    F: FnMut(&BitMask) -> Result<f64>,
{
    w.check_mask("split_groups", scope)?;
    if grid.is_empty() {
        return Err(Error::EmptyCandidates("percentile grid"));
    }
    if let Some(p) = grid.iter().find(|&&p| !(p > 0.0 && p < 1.0)) {
        return Err(Error::InvalidValue(format!("percentile {p} outside (0, 1)")));
    }
    let mut mags: Vec<f64> = Vec::with_capacity(scope.count());
    for r in 0..w.rows() {
        let row = w.row(r);
        scope.for_each_in_row(r, |c| mags.push(row[c].abs()));
    }
    if mags.is_empty() {
        return Err(Error::EmptyScope);
    }
    mags.sort_unstable_by(f64::total_cmp);

    let mut best: Option<GroupSplit> = None;
    let mut last: Option<(f64, f64)> = None;
    for &p in grid {
        let t = quantile_lower(&mags, p);
        let group = scope.filter(|r, c| w.get(r, c).abs() > t);
        let error = match last {
            Some((lt, le)) if lt == t => le,
            _ => zone_error(&scope.and_not(&group)?)? + zone_error(&group)?,
        };
        last = Some((t, error));
        if best.as_ref().is_none_or(|b| error < b.error) {
            best = Some(GroupSplit {
                group,
                percentile: Some(p),
                error,
            });
        }
    }
    let single = zone_error(scope)?;
    let best = best.expect("non-empty grid");
    if single < best.error {
        return Ok(GroupSplit {
            group: BitMask::empty(w.rows(), w.cols()),
            percentile: None,
            error: single,
        });
    }
    Ok(best)
}

/// Zone error of closed-form first-order binarization.
pub fn first_order_zone_error(w: &Matrix) -> impl FnMut(&BitMask) -> Result<f64> + '_ {
    move |mask| {
        let q = binary_first_order(w, mask)?;
        quant_error_l1(w, &q, mask)
    }
}

// ── Column-group bitmap ─────────────────────────────────────────────────────

/// The four disjoint quantization zones.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Zone {
    SalientSparse,
    SalientDense,
    PlainSparse,
    PlainDense,
}

impl Zone {
    pub const ALL: [Zone; 4] = [Zone::SalientSparse, Zone::SalientDense, Zone::PlainSparse, Zone::PlainDense];

    pub fn is_salient(self) -> bool {
        matches!(self, Zone::SalientSparse | Zone::SalientDense)
    }

    /// Zones stored for a layout; without CGB the salient columns are undivided.
    pub fn layout(cgb: bool) -> &'static [Zone] {
        if cgb {
            &Zone::ALL
        } else {
            &Zone::ALL[1..]
        }
    }
}

/// `G_s = 1_n C_sᵀ ⊙ G` and `G_ns = 1_n C_nsᵀ ⊙ G`.
pub fn build_cgb(salient_cols: &BitMask, group: &BitMask) -> Result<(BitMask, BitMask)> {
    if salient_cols.rows() != 1 || salient_cols.cols() != group.cols() {
        return Err(Error::shape(
            "build_cgb",
            format!("1x{}", group.cols()),
            format!("{}x{}", salient_cols.rows(), salient_cols.cols()),
        ));
    }
    let cs = salient_cols.broadcast_rows(group.rows())?;
    Ok((cs.and(group)?, cs.not().and(group)?))
}

/// Salient columns plus group bitmap, from which all zones derive.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionMaps {
    pub salient_cols: BitMask,
    pub group: BitMask,
}

impl PartitionMaps {
    pub fn new(salient_cols: BitMask, group: BitMask) -> Result<Self> {
        build_cgb(&salient_cols, &group)?;
        Ok(Self { salient_cols, group })
    }

    pub fn non_salient_cols(&self) -> BitMask {
        self.salient_cols.not()
    }

    pub fn g_s(&self) -> BitMask {
        build_cgb(&self.salient_cols, &self.group).expect("validated").0
    }

    pub fn g_ns(&self) -> BitMask {
        build_cgb(&self.salient_cols, &self.group).expect("validated").1
    }

    pub fn zone(&self, zone: Zone) -> BitMask {
        let (n, m) = self.group.shape();
        BitMask::from_fn(n, m, |r, c| {
            let salient = self.salient_cols.get(0, c);
            let sparse = self.group.get(r, c);
            match zone {
                Zone::SalientSparse => salient && sparse,
                Zone::SalientDense => salient && !sparse,
                Zone::PlainSparse => !salient && sparse,
                Zone::PlainDense => !salient && !sparse,
            }
        })
    }

    #[inline]
    pub fn zone_of(&self, r: usize, c: usize) -> Zone {
        match (self.salient_cols.get(0, c), self.group.get(r, c)) {
            (true, true) => Zone::SalientSparse,
            (true, false) => Zone::SalientDense,
            (false, true) => Zone::PlainSparse,
            (false, false) => Zone::PlainDense,
        }
    }
}

// ── Accounting ──────────────────────────────────────────────────────────────

/// Average weight bits under the `1 + r` convention: one sign plane
/// everywhere plus a second plane on the salient fraction.
pub fn avg_bits(salient_fraction: f64) -> f64 {
    1.0 + salient_fraction
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BitBudget {
    pub plane_bits: u64,
    pub bitmap_bits: u64,
    pub scale_bits: u64,
    /// Tensors kept at 16-bit (embeddings, head).
    pub dense_bits: u64,
    pub avg_weight_bits: f64,
    pub total_bytes: u64,
}

impl BitBudget {
    pub fn total_bits(&self) -> u64 {
        self.plane_bits + self.bitmap_bits + self.scale_bits + self.dense_bits
    }

    /// Sum of two budgets; the average is re-weighted by binarized weights.
    pub fn merge(&self, other: &BitBudget, weights_self: u64, weights_other: u64) -> BitBudget {
        let mut out = BitBudget {
            plane_bits: self.plane_bits + other.plane_bits,
            bitmap_bits: self.bitmap_bits + other.bitmap_bits,
            scale_bits: self.scale_bits + other.scale_bits,
            dense_bits: self.dense_bits + other.dense_bits,
            ..Default::default()
        };
        let w = weights_self + weights_other;
        out.avg_weight_bits = if w == 0 { 0.0 } else { out.plane_bits as f64 / w as f64 };
        out.total_bytes = out.total_bits().div_ceil(8);
        out
    }
}

/// Which scale family a layout stores.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScaleStyle {
    /// Row scale per plane plus a row mean per zone.
    MeanScale,
    /// Row and column scales per plane, no mean.
    RowColumn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Binarized,
    Dense16,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerShape {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub kind: LayerKind,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LedgerConfig {
    pub style: ScaleStyle,
    pub cgb: bool,
    pub block_size: usize,
    pub salient_fraction: f64,
    pub second_order_salient: bool,
    /// Width of each stored scale: 32 matches the on-disk container, 16
    /// matches half-precision deployment artifacts.
    pub scale_width: u32,
}

/// Scale slots stored per (row, block): `(row scales, means)`.
pub fn row_slots(style: ScaleStyle, cgb: bool, second_order_salient: bool) -> (u64, u64) {
    let mut alphas = 0;
    let mut means = 0;
    for &z in Zone::layout(cgb) {
        alphas += if z.is_salient() && second_order_salient { 2 } else { 1 };
        means += 1;
    }
    match style {
        ScaleStyle::MeanScale => (alphas, means),
        ScaleStyle::RowColumn => (alphas, 0),
    }
}

/// Budget of one binarized layer with `salient` salient columns.
pub fn layer_budget(n: usize, m: usize, salient: usize, cfg: &LedgerConfig) -> BitBudget {
    let (n64, m64) = (n as u64, m as u64);
    let k = cfg.block_size.clamp(1, m);
    let blocks = m.div_ceil(k) as u64;
    let plane_bits = n64 * m64 + if cfg.second_order_salient { n64 * salient as u64 } else { 0 };
    let bitmap_bits = n64 * m64 + m64;
    let (alphas, means) = row_slots(cfg.style, cfg.cgb, cfg.second_order_salient);
    let mut slots = n64 * blocks * (alphas + means);
    if cfg.style == ScaleStyle::RowColumn {
        // one column scale per column for every row-scale slot of its block
        slots += m64 * alphas;
    }
    let scale_bits = slots * cfg.scale_width as u64;
    let budget = BitBudget {
        plane_bits,
        bitmap_bits,
        scale_bits,
        dense_bits: 0,
        avg_weight_bits: plane_bits as f64 / (n64 * m64) as f64,
        total_bytes: 0,
    };
    BitBudget {
        total_bytes: budget.total_bits().div_ceil(8),
        ..budget
    }
}

/// Storage ledger over a set of layer shapes.
pub fn memory_estimate(shapes: &[LayerShape], cfg: &LedgerConfig) -> BitBudget {
    let mut total = BitBudget::default();
    let mut weights = 0u64;
    for s in shapes {
        let (b, w) = match s.kind {
            LayerKind::Binarized => (
                layer_budget(s.rows, s.cols, salient_count(cfg.salient_fraction, s.cols), cfg),
                (s.rows * s.cols) as u64,
            ),
            LayerKind::Dense16 => (
                BitBudget {
                    dense_bits: 16 * (s.rows * s.cols) as u64,
                    ..Default::default()
                },
                0,
            ),
        };
        total = total.merge(&b, weights, w);
        weights += w;
    }
    total
}
