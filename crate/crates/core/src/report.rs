//! CSV emission (RFC 4180 quoting) for reports, evaluations and benchmarks.
//!
//! Floats are written in Rust's shortest round-trip form, so reading a
//! value back yields the identical `f64`.

use std::path::Path;

use crate::bench::BenchResult;
use crate::error::{Error, Result};
use crate::partition::BitBudget;
use crate::pipeline::{LayerMetrics, QuantReport};

pub const REPORT_HEADER: [&str; 19] = [
    "layer",
    "method",
    "rows",
    "cols",
    "salient_columns",
    "objective",
    "trace_initial",
    "trace_final",
    "trace_monotone",
    "l1",
    "l2",
    "output_mse",
    "shift_before",
    "shift_after",
    "plane_bits",
    "bitmap_bits",
    "scale_bits",
    "total_bytes",
    "avg_weight_bits",
];

pub const EVAL_HEADER: [&str; 6] = ["layer", "l1", "l2", "output_mse", "shift_before", "shift_after"];

pub const BENCH_HEADER: [&str; 14] = [
    "n",
    "m",
    "samples",
    "iterations",
    "block",
    "direct_macs",
    "reformulated_macs",
    "eta_counted",
    "eta_formula",
    "direct_seconds",
    "reformulated_seconds",
    "eta_wall",
    "l2_rel_diff",
    "direct_sample_rows",
];

/// Relative slack allowed when flagging a trace as non-increasing.
pub const TRACE_SLACK: f64 = 1e-9;

fn writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Malformed(format!("{other:?}")),
    })
}

fn metric_fields(m: &LayerMetrics) -> Vec<String> {
    [m.l1, m.l2, m.output_mse, m.shift_before, m.shift_after]
        .iter()
        .map(f64::to_string)
        .collect()
}

fn budget_fields(b: &BitBudget) -> Vec<String> {
    vec![
        b.plane_bits.to_string(),
        b.bitmap_bits.to_string(),
        b.scale_bits.to_string(),
        b.total_bytes.to_string(),
        b.avg_weight_bits.to_string(),
    ]
}

pub fn write_report(path: &Path, reports: &[QuantReport]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(REPORT_HEADER)?;
    for r in reports {
        let mut rec = vec![
            r.name.clone(),
            r.method.to_string(),
            r.rows.to_string(),
            r.cols.to_string(),
            r.salient_columns.to_string(),
            r.objective.name().to_string(),
            r.trace.first().copied().unwrap_or(0.0).to_string(),
            r.trace.last().copied().unwrap_or(0.0).to_string(),
            r.trace_monotone(TRACE_SLACK).to_string(),
        ];
        rec.extend(metric_fields(&r.metrics));
        rec.extend(budget_fields(&r.budget));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Per-column `|W|` and `|Ŵ|` profiles.
pub fn write_profiles(path: &Path, reports: &[QuantReport]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["layer", "column", "weight", "quantized"])?;
    for r in reports {
        for (c, (a, b)) in r.metrics.weight_profile.iter().zip(&r.metrics.quant_profile).enumerate() {
            w.write_record([r.name.clone(), c.to_string(), a.to_string(), b.to_string()])?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Full refinement traces, one row per step.
pub fn write_traces(path: &Path, reports: &[QuantReport]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["layer", "objective", "step", "value"])?;
    for r in reports {
        for (s, v) in r.trace.iter().enumerate() {
            w.write_record([r.name.clone(), r.objective.name().to_string(), s.to_string(), v.to_string()])?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Wall times, kept apart so the other reports stay byte-reproducible.
pub fn write_timings(path: &Path, reports: &[QuantReport]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["layer", "wall_seconds"])?;
    for r in reports {
        w.write_record([r.name.clone(), r.wall_seconds.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_budget(path: &Path, budget: &BitBudget, layers: usize) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["layers", "plane_bits", "bitmap_bits", "scale_bits", "total_bytes", "avg_weight_bits"])?;
    let mut rec = vec![layers.to_string()];
    rec.extend(budget_fields(budget));
    w.write_record(&rec)?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_eval(path: &Path, rows: &[(String, LayerMetrics)]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(EVAL_HEADER)?;
    for (name, m) in rows {
        let mut rec = vec![name.clone()];
        rec.extend(metric_fields(m));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_bench(path: &Path, results: &[BenchResult]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(BENCH_HEADER)?;
    for r in results {
        let c = &r.config;
        w.write_record([
            c.n.to_string(),
            c.m.to_string(),
            c.samples.to_string(),
            c.iterations.to_string(),
            c.block.to_string(),
            r.direct.macs.to_string(),
            r.reformulated.macs.to_string(),
            r.eta_counted.to_string(),
            r.eta_formula.to_string(),
            r.direct_seconds.to_string(),
            r.reformulated_seconds.to_string(),
            r.eta_wall.to_string(),
            r.l2_rel_diff.to_string(),
            c.direct_sample_rows.map_or(String::new(), |s| s.to_string()),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads the metric columns of a report or eval CSV keyed by layer.
pub fn read_metrics(path: &Path) -> Result<Vec<(String, [f64; 5])>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Malformed(format!("{other:?}")),
    })?;
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Malformed(format!("{} lacks column `{name}`", path.display())))
    };
    let idx = [col("layer")?, col("l1")?, col("l2")?, col("output_mse")?, col("shift_before")?, col("shift_after")?];
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let mut vals = [0.0; 5];
        for (v, &i) in vals.iter_mut().zip(&idx[1..]) {
            *v = rec[i]
                .parse()
                .map_err(|_| Error::Malformed(format!("bad number `{}` in {}", &rec[i], path.display())))?;
        }
        out.push((rec[idx[0]].to_string(), vals));
    }
    Ok(out)
}
