//! Layer and model quantization: calibration statistics, saliency,
//! per-block partitioning, compensated zone-wise binarization and the
//! diagnostics reported for every layer.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;

use crate::binarize::{
    arb_first_order, arb_second_order, binary_first_order, residual, ArbTrace, Reconstruct, ALPHA_EPS,
};
use crate::calib::{accumulate_second_moment, arbx_first_order, arbx_second_order, l2_error, CalibStats};
use crate::compensate::{compensated_quantize, direct_quantize};
use crate::error::{Error, Result};
use crate::partition::{
    hessian_from_stats, inverse_diag, layer_budget, select_salient_columns, sensitivity, split_groups, BitBudget,
    LedgerConfig, PartitionMaps, ScaleStyle, Zone,
};
use crate::rowcol::{arbrc_first_order, arbrc_second_order};
use crate::synth::{synthetic_batches, SynthCalib};
use crate::tensor::{masked_row_mean, BitMask, Matrix, SignPlane};

// ── Configuration ───────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    /// Closed-form binarization without refinement and without CGB.
    Baseline,
    Arb,
    ArbX,
    ArbRc,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Baseline, Method::Arb, Method::ArbX, Method::ArbRc];

    pub fn name(self) -> &'static str {
        match self {
            Method::Baseline => "baseline",
            Method::Arb => "arb",
            Method::ArbX => "arb-x",
            Method::ArbRc => "arb-rc",
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            Method::Baseline => 0,
            Method::Arb => 1,
            Method::ArbX => 2,
            Method::ArbRc => 3,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Method> {
        Method::ALL.into_iter().find(|m| m.tag() == tag)
    }

    pub fn style(self) -> ScaleStyle {
        match self {
            Method::ArbRc => ScaleStyle::RowColumn,
            _ => ScaleStyle::MeanScale,
        }
    }

    /// Metric the method's refinement descends.
    pub fn objective(self) -> Objective {
        match self {
            Method::ArbX => Objective::L2,
            _ => Objective::L1,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown method `{s}` (expected baseline, arb, arb-x or arb-rc)"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    /// `||W - Ŵ||²`
    L1,
    /// `Tr(R S Rᵀ)`
    L2,
}

impl Objective {
    pub fn name(self) -> &'static str {
        match self {
            Objective::L1 => "l1",
            Objective::L2 => "l2",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantConfig {
    pub method: Method,
    /// Order of the salient zones (1 or 2); other zones are first order.
    pub salient_order: u8,
    pub iterations: usize,
    pub block_size: usize,
    pub salient_fractions: Vec<f64>,
    pub percentile_grid: Vec<f64>,
    /// Hessian damping as a fraction of `mean(diag S)`.
    pub damping: f64,
    pub cgb: bool,
    pub compensate: bool,
    pub seed: u64,
    /// Share of calibration batches withheld for the output MSE.
    pub holdout_fraction: f64,
    pub synth: SynthCalib,
}

impl Default for QuantConfig {
    fn default() -> Self {
        Self {
            method: Method::ArbRc,
            salient_order: 2,
            iterations: 15,
            block_size: 128,
            salient_fractions: vec![1.0 / 32.0, 2.0 / 32.0, 3.0 / 32.0, 4.0 / 32.0, 5.0 / 32.0],
            percentile_grid: (1..20).map(|i| i as f64 / 20.0).collect(),
            damping: 0.01,
            cgb: true,
            compensate: true,
            seed: 0,
            holdout_fraction: 0.25,
            synth: SynthCalib::default(),
        }
    }
}

impl QuantConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |message: String| Err(Error::Config { line: 0, message });
        if !matches!(self.salient_order, 1 | 2) {
            return bad(format!("salient_order must be 1 or 2, got {}", self.salient_order));
        }
        if self.block_size == 0 {
            return bad("block_size must be at least 1".into());
        }
        if self.salient_fractions.is_empty() || self.salient_fractions.iter().any(|f| !(*f > 0.0 && *f <= 0.5)) {
            return bad("salient_fractions must be non-empty and within (0, 0.5]".into());
        }
        if self.percentile_grid.is_empty() || self.percentile_grid.iter().any(|p| !(*p > 0.0 && *p < 1.0)) {
            return bad("percentile_grid must be non-empty and within (0, 1)".into());
        }
        if !(self.damping >= 0.0 && self.damping.is_finite()) {
            return bad(format!("damping must be finite and non-negative, got {}", self.damping));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return bad(format!("holdout_fraction must be in [0, 1), got {}", self.holdout_fraction));
        }
        if self.synth.samples == 0 || self.synth.seq_len == 0 {
            return bad("calib_samples and calib_seq_len must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.synth.outlier_fraction) || self.synth.outlier_scale.is_nan()
            || self.synth.outlier_scale <= 0.0 {
            return bad("calibration outlier profile out of range".into());
        }
        Ok(())
    }

    /// Refinement iterations actually run (the baseline never refines).
    pub fn effective_iterations(&self) -> usize {
        match self.method {
            Method::Baseline => 0,
            _ => self.iterations,
        }
    }

    /// Whether salient columns are split into two groups.
    pub fn effective_cgb(&self) -> bool {
        self.cgb && self.method != Method::Baseline
    }
}

// ── Quantized layer ─────────────────────────────────────────────────────────

/// Scales of one zone within one block, stored at single precision.
#[derive(Debug, Clone, PartialEq)]
pub struct ZoneParams {
    /// Row scale per plane (`n` each).
    pub alpha: Vec<Vec<f32>>,
    /// Column scale per plane (block width each); row-column layouts only.
    pub alpha_c: Vec<Vec<f32>>,
    /// Row mean (`n`); mean-scale layouts only.
    pub mu: Option<Vec<f32>>,
}

impl ZoneParams {
    fn zeros(style: ScaleStyle, planes: usize, n: usize, width: usize) -> Self {
        Self {
            alpha: vec![vec![0.0; n]; planes],
            alpha_c: match style {
                ScaleStyle::RowColumn => vec![vec![0.0; width]; planes],
                ScaleStyle::MeanScale => Vec::new(),
            },
            mu: match style {
                ScaleStyle::MeanScale => Some(vec![0.0; n]),
                ScaleStyle::RowColumn => None,
            },
        }
    }

    /// Value at row `r`, block-local column `c`, for plane signs `s1`, `s2`.
    #[inline]
    pub fn value(&self, r: usize, c: usize, s1: f64, s2: f64) -> f64 {
        let mut v = 0.0;
        for (p, a) in self.alpha.iter().enumerate() {
            let mut t = a[r] as f64 * if p == 0 { s1 } else { s2 };
            if let Some(ac) = self.alpha_c.get(p) {
                t *= ac[c] as f64;
            }
            v += t;
        }
        if let Some(mu) = &self.mu {
            v += mu[r] as f64;
        }
        v
    }
}

/// Zone parameters of one column block, in [`Zone::layout`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub zones: Vec<ZoneParams>,
}

/// Position of a zone within a block's parameter list.
pub fn zone_slot(cgb: bool, zone: Zone) -> usize {
    match (cgb, zone) {
        (true, z) => Zone::ALL.iter().position(|&a| a == z).expect("listed zone"),
        (false, Zone::SalientSparse | Zone::SalientDense) => 0,
        (false, Zone::PlainSparse) => 1,
        (false, Zone::PlainDense) => 2,
    }
}

/// Everything needed to rebuild `Ŵ`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedLayer {
    pub method: Method,
    pub rows: usize,
    pub cols: usize,
    pub block_size: usize,
    pub salient_order: u8,
    pub cgb: bool,
    pub maps: PartitionMaps,
    /// First sign plane, `n x m`.
    pub plane1: SignPlane,
    /// Second sign plane over the salient columns in index order,
    /// `n x salient_count` (zero columns for first-order salient zones).
    pub plane2: SignPlane,
    pub blocks: Vec<BlockParams>,
}

impl QuantizedLayer {
    pub fn salient_count(&self) -> usize {
        self.maps.salient_cols.count()
    }

    /// Column index into `plane2` for every salient column.
    pub fn salient_index(&self) -> Vec<Option<usize>> {
        let mut next = 0;
        (0..self.cols)
            .map(|c| {
                self.maps.salient_cols.get(0, c).then(|| {
                    next += 1;
                    next - 1
                })
            })
            .collect()
    }

    fn planes_for(&self, zone: Zone) -> usize {
        if zone.is_salient() && self.salient_order == 2 {
            2
        } else {
            1
        }
    }

    /// Checks that every piece agrees with the declared shape and layout.
    pub fn validate(&self) -> Result<()> {
        let (n, m) = (self.rows, self.cols);
        let bad = || Err(Error::Malformed("quantized layer pieces disagree with its header".into()));
        if n == 0 || m == 0 || self.block_size == 0 || !matches!(self.salient_order, 1 | 2) {
            return bad();
        }
        if self.maps.salient_cols.shape() != (1, m) || self.maps.group.shape() != (n, m) {
            return bad();
        }
        if self.plane1.shape() != (n, m) {
            return bad();
        }
        let s = if self.salient_order == 2 { self.salient_count() } else { 0 };
        if self.plane2.shape() != (n, s) {
            return bad();
        }
        if !self.cgb {
            for c in (0..m).filter(|&c| self.maps.salient_cols.get(0, c)) {
                if (0..n).any(|r| self.maps.group.get(r, c)) {
                    return bad();
                }
            }
        }
        let k = self.block_size.min(m);
        if self.blocks.len() != m.div_ceil(k) {
            return bad();
        }
        let layout = Zone::layout(self.cgb);
        let style = self.method.style();
        for (b, block) in self.blocks.iter().enumerate() {
            let width = k.min(m - b * k);
            if block.zones.len() != layout.len() {
                return bad();
            }
            for (zp, &zone) in block.zones.iter().zip(layout) {
                let planes = self.planes_for(zone);
                if zp.alpha.len() != planes || zp.alpha.iter().any(|a| a.len() != n) {
                    return bad();
                }
                match style {
                    ScaleStyle::RowColumn => {
                        if zp.mu.is_some() || zp.alpha_c.len() != planes || zp.alpha_c.iter().any(|a| a.len() != width) {
                            return bad();
                        }
                    }
                    ScaleStyle::MeanScale => {
                        if !zp.alpha_c.is_empty() || zp.mu.as_ref().is_none_or(|mu| mu.len() != n) {
                            return bad();
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Dense reconstruction from the stored values.
    pub fn reconstruct(&self) -> Matrix {
        let k = self.block_size.min(self.cols);
        let sidx = self.salient_index();
        Matrix::from_fn(self.rows, self.cols, |r, c| {
            let zone = self.maps.zone_of(r, c);
            let zp = &self.blocks[c / k].zones[zone_slot(self.cgb, zone)];
            let s1 = self.plane1.sign(r, c);
            let s2 = match sidx[c] {
                Some(i) if self.salient_order == 2 => self.plane2.sign(r, i),
                _ => 1.0,
            };
            zp.value(r, c % k, s1, s2)
        })
    }

    /// Storage ledger of this layer with 32-bit scales.
    pub fn budget(&self) -> BitBudget {
        let cfg = LedgerConfig {
            style: self.method.style(),
            cgb: self.cgb,
            block_size: self.block_size,
            salient_fraction: self.salient_count() as f64 / self.cols as f64,
            second_order_salient: self.salient_order == 2,
            scale_width: 32,
        };
        layer_budget(self.rows, self.cols, self.salient_count(), &cfg)
    }
}

// ── Calibration ─────────────────────────────────────────────────────────────

/// Calibration statistics plus the withheld batches used for output MSE.
#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    pub stats: CalibStats,
    pub holdout: Vec<Matrix>,
}

/// Number of trailing batches withheld out of `batches`.
pub fn holdout_count(batches: usize, fraction: f64) -> usize {
    if batches < 2 || fraction <= 0.0 {
        return 0;
    }
    ((batches as f64 * fraction).floor() as usize).clamp(1, batches - 1)
}

impl Calibration {
    /// Splits off the last `floor(B * fraction)` batches (at least one when
    /// `B >= 2`) as holdout; a single batch serves both roles.
    pub fn from_batches(batches: &[Matrix], holdout_fraction: f64) -> Result<Self> {
        let h = holdout_count(batches.len(), holdout_fraction);
        let split = batches.len() - h;
        let stats = accumulate_second_moment(&batches[..split])?;
        let holdout = if h == 0 { batches.to_vec() } else { batches[split..].to_vec() };
        Ok(Self { stats, holdout })
    }

    pub fn synthetic(m: usize, cfg: &QuantConfig) -> Result<Self> {
        Self::from_batches(&synthetic_batches(m, &cfg.synth, cfg.seed), cfg.holdout_fraction)
    }
}

// ── Diagnostics ─────────────────────────────────────────────────────────────

/// Row-wise masked mean of `W - reconstruct(Q)`.
pub fn residual_shift_profile<Q: Reconstruct + ?Sized>(w: &Matrix, quant: &Q) -> Result<Vec<f64>> {
    masked_row_mean(&residual(w, quant)?, quant.mask())
}

/// Mean `|M_ij|` of every column.
pub fn column_deviation_profile(m: &Matrix) -> Vec<f64> {
    let mut out = vec![0.0; m.cols()];
    for r in 0..m.rows() {
        for (acc, v) in out.iter_mut().zip(m.row(r)) {
            *acc += v.abs();
        }
    }
    let n = m.rows().max(1) as f64;
    out.iter_mut().for_each(|v| *v /= n);
    out
}

/// Mean squared entry of `(W - Ŵ) xᵀ` over all holdout rows `x`.
pub fn output_mse(w: &Matrix, q: &Matrix, holdout: &[Matrix]) -> Result<f64> {
    let r = w.sub(q)?;
    let mut acc = 0.0;
    let mut rows = 0usize;
    for batch in holdout {
        if batch.cols() != w.cols() {
            return Err(Error::shape("output_mse", w.cols(), batch.cols()));
        }
        for x in (0..batch.rows()).map(|i| batch.row(i)) {
            for i in 0..r.rows() {
                let y = crate::tensor::dot(r.row(i), x);
                acc += y * y;
            }
        }
        rows += batch.rows();
    }
    if rows == 0 {
        return Err(Error::EmptyCandidates("holdout batches"));
    }
    Ok(acc / (rows * w.rows()) as f64)
}

fn mean_abs(v: &[f64]) -> f64 {
    v.iter().map(|x| x.abs()).sum::<f64>() / v.len().max(1) as f64
}

/// Metrics of a reconstruction against the original weights.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerMetrics {
    pub l1: f64,
    pub l2: f64,
    pub output_mse: f64,
    /// Mean `|row shift|` of closed-form binarization of the whole row.
    pub shift_before: f64,
    /// Mean `|row shift|` of `W - Ŵ`.
    pub shift_after: f64,
    pub weight_profile: Vec<f64>,
    pub quant_profile: Vec<f64>,
}

pub fn layer_metrics(w: &Matrix, q: &Matrix, calib: &Calibration) -> Result<LayerMetrics> {
    let full = BitMask::full(w.rows(), w.cols());
    let r = w.sub(q)?;
    let vanilla = binary_first_order(w, &full)?;
    let metrics = LayerMetrics {
        l1: r.frobenius_sq(),
        l2: l2_error(&r, &calib.stats)?,
        output_mse: output_mse(w, q, &calib.holdout)?,
        shift_before: mean_abs(&residual_shift_profile(w, &vanilla)?),
        shift_after: mean_abs(&masked_row_mean(&r, &full)?),
        weight_profile: column_deviation_profile(w),
        quant_profile: column_deviation_profile(q),
    };
    if ![metrics.l1, metrics.l2, metrics.output_mse].iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite(0));
    }
    Ok(metrics)
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantReport {
    pub name: String,
    pub method: Method,
    pub rows: usize,
    pub cols: usize,
    pub salient_columns: usize,
    pub metrics: LayerMetrics,
    pub objective: Objective,
    /// Refinement objective summed over all zones, per iteration.
    pub trace: Vec<f64>,
    pub budget: BitBudget,
    pub wall_seconds: f64,
}

impl QuantReport {
    /// Whether the summed refinement trace never increases beyond `rel` relative slack.
    pub fn trace_monotone(&self, rel: f64) -> bool {
        self.trace
            .windows(2)
            .all(|p| p[1] <= p[0] + rel * p[0].abs().max(f64::MIN_POSITIVE))
    }
}

// ── Zone quantizers ─────────────────────────────────────────────────────────

/// Masked entries of one zone, gathered row by row.
struct Gathered {
    starts: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl Gathered {
    fn new(w: &Matrix, mask: &BitMask) -> Self {
        let count = mask.count();
        let mut g = Gathered {
            starts: Vec::with_capacity(w.rows() + 1),
            cols: Vec::with_capacity(count),
            vals: Vec::with_capacity(count),
        };
        for r in 0..w.rows() {
            g.starts.push(g.cols.len());
            let row = w.row(r);
            mask.for_each_in_row(r, |c| {
                g.cols.push(c);
                g.vals.push(row[c]);
            });
        }
        g.starts.push(g.cols.len());
        g
    }

    fn row(&self, r: usize) -> std::ops::Range<usize> {
        self.starts[r]..self.starts[r + 1]
    }

    fn rows(&self) -> usize {
        self.starts.len() - 1
    }
}

#[inline]
fn sign_pos(x: f64) -> f64 {
    if x >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

/// Closed-form mean-scale binarization of `v` in place (`v` becomes the
/// residual); returns the squared error.
fn mean_scale_pass(v: &mut [f64]) -> f64 {
    let c = v.len() as f64;
    let mu = v.iter().sum::<f64>() / c;
    let alpha = v.iter().map(|x| (x - mu).abs()).sum::<f64>() / c;
    let mut err = 0.0;
    for x in v.iter_mut() {
        let d = *x - mu;
        *x = d - alpha * sign_pos(d);
        err += *x * *x;
    }
    err
}

/// Closed-form row-column binarization of the gathered values in place;
/// returns the squared error.
fn row_column_pass(g: &mut Gathered, width: usize) -> f64 {
    let n = g.rows();
    let alpha_r: Vec<f64> = (0..n)
        .map(|r| {
            let range = g.row(r);
            let len = range.len().max(1) as f64;
            g.vals[range].iter().map(|x| x.abs()).sum::<f64>() / len
        })
        .collect();
    let mut col_sum = vec![0.0; width];
    let mut col_count = vec![0usize; width];
    for (r, &ar) in alpha_r.iter().enumerate() {
        if ar <= ALPHA_EPS {
            continue;
        }
        for i in g.row(r) {
            col_sum[g.cols[i]] += (g.vals[i] / ar).abs();
            col_count[g.cols[i]] += 1;
        }
    }
    let alpha_c: Vec<f64> = col_sum.iter().zip(&col_count).map(|(s, &k)| s / k.max(1) as f64).collect();
    let mut err = 0.0;
    for (r, &ar) in alpha_r.iter().enumerate() {
        for i in g.row(r) {
            let x = g.vals[i];
            let y = x - ar * alpha_c[g.cols[i]] * sign_pos(x);
            g.vals[i] = y;
            err += y * y;
        }
    }
    err
}

/// Closed-form (zero-iteration) error of the method family on one zone,
/// used as the partition search objective. Matches the squared error of the
/// corresponding initializers up to rounding.
pub fn t0_zone_error(style: ScaleStyle, order: u8, w: &Matrix, mask: &BitMask) -> Result<f64> {
    w.check_mask("t0_zone_error", mask)?;
    let mut g = Gathered::new(w, mask);
    if g.vals.is_empty() {
        return Ok(0.0);
    }
    let mut err = 0.0;
    match style {
        ScaleStyle::MeanScale => {
            for r in 0..g.rows() {
                let range = g.row(r);
                if range.is_empty() {
                    continue;
                }
                let v = &mut g.vals[range];
                let mut e = mean_scale_pass(v);
                if order == 2 {
                    e = mean_scale_pass(v);
                }
                err += e;
            }
        }
        ScaleStyle::RowColumn => {
            err = row_column_pass(&mut g, w.cols());
            if order == 2 {
                err = row_column_pass(&mut g, w.cols());
            }
        }
    }
    Ok(err)
}

struct ZoneFit {
    params: ZoneParams,
    planes: Vec<SignPlane>,
    trace: ArbTrace,
}

fn to_f32(v: &[f64]) -> Result<Vec<f32>> {
    v.iter()
        .enumerate()
        .map(|(i, &x)| {
            let y = x as f32;
            if y.is_finite() {
                Ok(y)
            } else {
                Err(Error::NonFinite(i))
            }
        })
        .collect()
}

fn fit_zone(method: Method, order: u8, w: &Matrix, mask: &BitMask, stats: &CalibStats, t: usize) -> Result<ZoneFit> {
    let planes_n = usize::from(order);
    if mask.count() == 0 {
        let (n, m) = w.shape();
        return Ok(ZoneFit {
            params: ZoneParams::zeros(method.style(), planes_n, n, m),
            planes: vec![SignPlane::from_fn(n, m, |_, _| true); planes_n],
            trace: ArbTrace {
                steps: vec![
                    crate::binarize::ArbStep {
                        alpha: Vec::new(),
                        alpha2: Vec::new(),
                        mu: Vec::new(),
                        row_error: Vec::new(),
                        row_error_before_signs: Vec::new(),
                    };
                    t + 1
                ],
            },
        });
    }
    let mean_scale = |alpha: Vec<&[f64]>, mu: &[f64], planes: Vec<SignPlane>, trace| -> Result<ZoneFit> {
        Ok(ZoneFit {
            params: ZoneParams {
                alpha: alpha.into_iter().map(to_f32).collect::<Result<_>>()?,
                alpha_c: Vec::new(),
                mu: Some(to_f32(mu)?),
            },
            planes,
            trace,
        })
    };
    match (method, order) {
        (Method::Baseline | Method::Arb, 1) => {
            let (q, tr) = arb_first_order(w, mask, t)?;
            mean_scale(vec![&q.params.alpha], &q.params.mu, vec![q.plane.clone()], tr)
        }
        (Method::Baseline | Method::Arb, _) => {
            let (q, tr) = arb_second_order(w, mask, t)?;
            mean_scale(vec![&q.alpha1, &q.alpha2], &q.mu, vec![q.plane1.clone(), q.plane2.clone()], tr)
        }
        (Method::ArbX, 1) => {
            let (q, tr) = arbx_first_order(w, mask, stats, t)?;
            mean_scale(vec![&q.params.alpha], &q.params.mu, vec![q.plane.clone()], tr)
        }
        (Method::ArbX, _) => {
            let (q, tr) = arbx_second_order(w, mask, stats, t)?;
            mean_scale(vec![&q.alpha1, &q.alpha2], &q.mu, vec![q.plane1.clone(), q.plane2.clone()], tr)
        }
        (Method::ArbRc, _) => {
            let (mut q, tr) = if order == 1 {
                arbrc_first_order(w, mask, t)?
            } else {
                arbrc_second_order(w, mask, t)?
            };
            q.first.normalize_gauge(mask);
            if let Some(p) = q.second.as_mut() {
                p.normalize_gauge(mask);
            }
            let planes: Vec<_> = q.planes().collect();
            Ok(ZoneFit {
                params: ZoneParams {
                    alpha: planes.iter().map(|p| to_f32(&p.alpha_r)).collect::<Result<_>>()?,
                    alpha_c: planes.iter().map(|p| to_f32(&p.alpha_c)).collect::<Result<_>>()?,
                    mu: None,
                },
                planes: planes.iter().map(|p| p.signs.clone()).collect(),
                trace: tr,
            })
        }
    }
}

// ── Partitioning ────────────────────────────────────────────────────────────

/// Salient columns and group bitmap of one block, chosen on the original
/// weights by the closed-form zone error of the configured method.
pub fn search_block(wb: &Matrix, column_scores: &[f64], cfg: &QuantConfig) -> Result<PartitionMaps> {
    search_block_scored(wb, column_scores, cfg).map(|(maps, _)| maps)
}

/// [`search_block`] together with the winning search objective.
pub fn search_block_scored(wb: &Matrix, column_scores: &[f64], cfg: &QuantConfig) -> Result<(PartitionMaps, f64)> {
    let (n, kb) = wb.shape();
    let style = cfg.method.style();
    let cgb = cfg.effective_cgb();
    let mut groups: Vec<BitMask> = Vec::with_capacity(cfg.salient_fractions.len());
    let choice = select_salient_columns(column_scores, &cfg.salient_fractions, |cols| {
        let scope_s = cols.broadcast_rows(n)?;
        let scope_ns = scope_s.not();
        let mut group = BitMask::empty(n, kb);
        let mut error = 0.0;
        if scope_s.count() > 0 {
            let mut salient = |mask: &BitMask| t0_zone_error(style, cfg.salient_order, wb, mask);
            if cgb {
                let split = split_groups(wb, &scope_s, &cfg.percentile_grid, &mut salient)?;
                error += split.error;
                group = group.or(&split.group)?;
            } else {
                error += salient(&scope_s)?;
            }
        }
        if scope_ns.count() > 0 {
            let plain = |mask: &BitMask| t0_zone_error(style, 1, wb, mask);
            let split = split_groups(wb, &scope_ns, &cfg.percentile_grid, plain)?;
            error += split.error;
            group = group.or(&split.group)?;
        }
        groups.push(group);
        Ok(error)
    })?;
    let idx = choice
        .candidate_errors
        .iter()
        .position(|&e| e == choice.error)
        .expect("winning candidate is listed");
    Ok((PartitionMaps::new(choice.columns, groups.swap_remove(idx))?, choice.error))
}

/// Joins per-block maps into layer-wide maps.
fn assemble_maps(n: usize, m: usize, k: usize, blocks: &[PartitionMaps]) -> Result<PartitionMaps> {
    let cols = BitMask::from_fn(1, m, |_, c| blocks[c / k].salient_cols.get(0, c % k));
    let group = BitMask::from_fn(n, m, |r, c| blocks[c / k].group.get(r, c % k));
    PartitionMaps::new(cols, group)
}

// ── Layer pipeline ──────────────────────────────────────────────────────────

/// Quantizes one layer against prepared calibration data.
pub fn quantize_layer_with(
    name: &str,
    w: &Matrix,
    calib: &Calibration,
    cfg: &QuantConfig,
) -> Result<(QuantizedLayer, QuantReport)> {
    let start = Instant::now();
    cfg.validate()?;
    w.ensure_finite()?;
    let (n, m) = w.shape();
    if calib.stats.dim() != m {
        return Err(Error::shape("calibration width", m, calib.stats.dim()));
    }
    let k = cfg.block_size.min(m);
    let t = cfg.effective_iterations();
    let cgb = cfg.effective_cgb();
    let layout = Zone::layout(cgb);

    let h = hessian_from_stats(&calib.stats, cfg.damping)?;
    let scores = sensitivity(w, &inverse_diag(&h)?)?;
    let block_maps = (0..m)
        .step_by(k)
        .map(|b0| {
            let b1 = (b0 + k).min(m);
            search_block(&w.columns(b0..b1), &scores.column[b0..b1], cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    let maps = assemble_maps(n, m, k, &block_maps)?;
    let sidx: Vec<Option<usize>> = {
        let mut next = 0;
        (0..m)
            .map(|c| {
                maps.salient_cols.get(0, c).then(|| {
                    next += 1;
                    next - 1
                })
            })
            .collect()
    };
    let s2 = if cfg.salient_order == 2 { maps.salient_cols.count() } else { 0 };

    let mut sign1 = vec![true; n * m];
    let mut sign2 = vec![true; n * s2];
    let mut blocks = Vec::with_capacity(block_maps.len());
    let mut trace = vec![0.0; t + 1];
    let quantizer = |b0: usize, wb: &Matrix| -> Result<Matrix> {
        let bm = &block_maps[b0 / k];
        let kb = wb.cols();
        let stats = match cfg.method {
            Method::ArbX => calib.stats.restrict(b0..b0 + kb),
            _ => CalibStats::identity(0),
        };
        let mut q = Matrix::zeros(n, kb);
        let mut zones = Vec::with_capacity(layout.len());
        for &zone in layout {
            let mask = if cgb || !zone.is_salient() {
                bm.zone(zone)
            } else {
                bm.salient_cols.broadcast_rows(n)?
            };
            let order = if zone.is_salient() { cfg.salient_order } else { 1 };
            let fit = fit_zone(cfg.method, order, wb, &mask, &stats, t)?;
            for (acc, step) in trace.iter_mut().zip(&fit.trace.steps) {
                *acc += step.error();
            }
            for r in 0..n {
                for c in mask.row_indices(r) {
                    let s1 = fit.planes[0].sign(r, c);
                    let s2v = fit.planes.get(1).map_or(1.0, |p| p.sign(r, c));
                    q.set(r, c, fit.params.value(r, c, s1, s2v));
                    sign1[r * m + b0 + c] = s1 > 0.0;
                    if order == 2 {
                        let i = sidx[b0 + c].expect("salient column");
                        sign2[r * s2 + i] = s2v > 0.0;
                    }
                }
            }
            zones.push(fit.params);
        }
        blocks.push(BlockParams { zones });
        Ok(q)
    };
    let q = if cfg.compensate {
        compensated_quantize(w, &h, k, quantizer)?.0
    } else {
        direct_quantize(w, k, quantizer)?
    };

    let layer = QuantizedLayer {
        method: cfg.method,
        rows: n,
        cols: m,
        block_size: k,
        salient_order: cfg.salient_order,
        cgb,
        maps,
        plane1: SignPlane::from_fn(n, m, |r, c| sign1[r * m + c]),
        plane2: SignPlane::from_fn(n, s2, |r, c| sign2[r * s2 + c]),
        blocks,
    };
    debug_assert_eq!(layer.reconstruct(), q);
    let metrics = layer_metrics(w, &q, calib)?;
    let report = QuantReport {
        name: name.to_string(),
        method: cfg.method,
        rows: n,
        cols: m,
        salient_columns: layer.salient_count(),
        metrics,
        objective: cfg.method.objective(),
        trace,
        budget: layer.budget(),
        wall_seconds: start.elapsed().as_secs_f64(),
    };
    Ok((layer, report))
}

/// Quantizes one layer from raw calibration batches.
pub fn quantize_layer(
    name: &str,
    w: &Matrix,
    batches: &[Matrix],
    cfg: &QuantConfig,
) -> Result<(QuantizedLayer, QuantReport)> {
    let calib = Calibration::from_batches(batches, cfg.holdout_fraction)?;
    quantize_layer_with(name, w, &calib, cfg)
}

// ── Model pipeline ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct ModelLayer {
    pub name: String,
    pub weights: Matrix,
}

/// Where calibration activations come from.
#[derive(Debug, Clone, PartialEq)]
pub enum CalibSource {
    /// Seeded synthetic batches per layer width.
    Synthetic,
    /// Batches per layer, in layer order.
    Supplied(Vec<Vec<Matrix>>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelResult {
    pub layers: Vec<(QuantizedLayer, QuantReport)>,
    pub budget: BitBudget,
}

/// Quantizes every layer (in parallel) and aggregates the budget in
/// declared order.
pub fn quantize_model(layers: &[ModelLayer], calib: &CalibSource, cfg: &QuantConfig) -> Result<ModelResult> {
    cfg.validate()?;
    if let CalibSource::Supplied(b) = calib {
        if b.len() != layers.len() {
            return Err(Error::shape("calibration sets", layers.len(), b.len()));
        }
    }
    let results = layers
        .par_iter()
        .enumerate()
        .map(|(i, layer)| {
            let prepared = match calib {
                CalibSource::Synthetic => Calibration::synthetic(layer.weights.cols(), cfg)?,
                CalibSource::Supplied(b) => Calibration::from_batches(&b[i], cfg.holdout_fraction)?,
            };
            quantize_layer_with(&layer.name, &layer.weights, &prepared, cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut budget = BitBudget::default();
    let mut weights = 0u64;
    for (layer, report) in &results {
        let w = (layer.rows * layer.cols) as u64;
        budget = budget.merge(&report.budget, weights, w);
        weights += w;
    }
    Ok(ModelResult {
        layers: results,
        budget,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::planted_layer;

    fn small_cfg(method: Method) -> QuantConfig {
        QuantConfig {
            method,
            block_size: 16,
            synth: SynthCalib {
                samples: 8,
                seq_len: 8,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn reconstruction_matches_pipeline_output_for_all_methods() {
        let w = planted_layer(12, 40, 3);
        for method in Method::ALL {
            for cgb in [false, true] {
                let cfg = QuantConfig { cgb, ..small_cfg(method) };
                let calib = Calibration::synthetic(40, &cfg).unwrap();
                let (layer, report) = quantize_layer_with("l", &w, &calib, &cfg).unwrap();
                layer.validate().unwrap();
                let q = layer.reconstruct();
                assert_eq!(report.metrics, layer_metrics(&w, &q, &calib).unwrap());
                assert!(report.trace_monotone(1e-9), "{method} {:?}", report.trace);
                assert_eq!(report.trace.len(), cfg.effective_iterations() + 1);
            }
        }
    }

    #[test]
    fn fast_search_objective_matches_initializers() {
        use crate::binarize::{binary_second_order, quant_error_l1};
        use crate::rowcol::rc_init;
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let (n, m) = (rng.gen_range(1..12), rng.gen_range(1..20));
            let w = planted_layer(n, m, rng.gen());
            let mask = BitMask::from_fn(n, m, |_, _| rng.gen_bool(0.6));
            let generic = [
                quant_error_l1(&w, &binary_first_order(&w, &mask).unwrap(), &mask).unwrap(),
                quant_error_l1(&w, &binary_second_order(&w, &mask).unwrap(), &mask).unwrap(),
                quant_error_l1(&w, &rc_init(&w, &mask).unwrap(), &mask).unwrap(),
                quant_error_l1(&w, &arbrc_second_order(&w, &mask, 0).unwrap().0, &mask).unwrap(),
            ];
            let fast = [
                t0_zone_error(ScaleStyle::MeanScale, 1, &w, &mask).unwrap(),
                t0_zone_error(ScaleStyle::MeanScale, 2, &w, &mask).unwrap(),
                t0_zone_error(ScaleStyle::RowColumn, 1, &w, &mask).unwrap(),
                t0_zone_error(ScaleStyle::RowColumn, 2, &w, &mask).unwrap(),
            ];
            let energy: f64 = (0..n)
                .flat_map(|r| mask.row_indices(r).into_iter().map(move |c| (r, c)))
                .map(|(r, c)| w.get(r, c).powi(2))
                .sum();
            for (g, f) in generic.iter().zip(&fast) {
                assert!((g - f).abs() <= 1e-9 * g.max(1e-12 * energy), "{g} vs {f}");
            }
        }
    }

    #[test]
    fn residual_shift_of_skewed_row() {
        let w = Matrix::from_rows(&[vec![0.0, 0.0, 0.0, 4.0]]).unwrap();
        let q = binary_first_order(&w, &BitMask::full(1, 4)).unwrap();
        assert_eq!(residual_shift_profile(&w, &q).unwrap(), vec![0.75]);
    }

    #[test]
    fn column_profile_of_identity_and_scaled_column() {
        assert_eq!(column_deviation_profile(&Matrix::identity(4)), vec![0.25; 4]);
        let w = planted_layer(6, 5, 1);
        let mut w10 = w.clone();
        for r in 0..6 {
            w10.set(r, 2, 10.0 * w.get(r, 2));
        }
        let (a, b) = (column_deviation_profile(&w), column_deviation_profile(&w10));
        assert!((b[2] - 10.0 * a[2]).abs() < 1e-12 * b[2]);
    }

    #[test]
    fn holdout_split_rules() {
        assert_eq!(holdout_count(1, 0.25), 0);
        assert_eq!(holdout_count(2, 0.25), 1);
        assert_eq!(holdout_count(8, 0.25), 2);
        assert_eq!(holdout_count(8, 0.0), 0);
    }

    #[test]
    fn output_mse_homogeneity_and_consistency() {
        let w = planted_layer(5, 8, 2);
        let q = w.scaled(0.5);
        let q2 = w.sub(&w.scaled(0.5).scaled(2.0)).unwrap();
        let xs = synthetic_batches(8, &SynthCalib { samples: 3, seq_len: 4, ..Default::default() }, 1);
        let a = output_mse(&w, &q, &xs).unwrap();
        let b = output_mse(&w, &q2, &xs).unwrap();
        assert!((b - 4.0 * a).abs() <= 1e-12 * b);
        let stats = accumulate_second_moment(&xs).unwrap();
        let l2 = l2_error(&w.sub(&q).unwrap(), &stats).unwrap();
        assert!((a - l2 / (5.0 * 12.0)).abs() <= 1e-12 * a);
        assert_eq!(output_mse(&w, &w, &xs).unwrap(), 0.0);
    }

    #[test]
    fn model_with_identical_layers_is_deterministic() {
        let w = planted_layer(8, 24, 5);
        let layers = vec![
            ModelLayer { name: "a".into(), weights: w.clone() },
            ModelLayer { name: "b".into(), weights: w },
        ];
        let cfg = small_cfg(Method::ArbRc);
        let out = quantize_model(&layers, &CalibSource::Synthetic, &cfg).unwrap();
        assert_eq!(out.layers[0].0, out.layers[1].0);
        assert_eq!(out.layers[0].1.metrics, out.layers[1].1.metrics);
        let empty = quantize_model(&[], &CalibSource::Synthetic, &cfg).unwrap();
        assert!(empty.layers.is_empty());
        assert_eq!(empty.budget.total_bits(), 0);
    }
}
