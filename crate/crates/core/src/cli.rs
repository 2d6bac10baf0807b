//! Command-line interface.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error
//! (files, formats, shapes), 3 numerical failure.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::bench::{bench_l2_paths, BenchConfig};
use crate::config::{read_config, render_config};
use crate::error::{Error, ErrorClass, Result};
use crate::format::{describe_header, read_batches, read_header, read_matrix, read_quant, write_quant};
use crate::manifest::{read_manifest, EntrySource, Manifest, ManifestEntry};
use crate::partition::{memory_estimate, LedgerConfig, ScaleStyle};
use crate::pipeline::{layer_metrics, quantize_model, CalibSource, Calibration, Method, ModelLayer, QuantConfig};
use crate::report::{
    read_metrics, write_bench, write_budget, write_eval, write_profiles, write_report, write_timings, write_traces,
};
use crate::synth::planted_layer;
use crate::tensor::Matrix;

#[derive(Debug, Parser)]
#[command(name = "arbq", version, about = "1-bit post-training weight quantization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Quantize every layer of a manifest and write containers plus reports.
    Quantize(QuantizeArgs),
    /// Recompute metrics from quantized containers and the original weights.
    Eval(EvalArgs),
    /// Compare direct and reformulated calibration-error evaluation.
    Bench(BenchArgs),
    /// Print the header of a container, or the storage ledger of a manifest.
    Inspect(InspectArgs),
}

#[derive(Debug, Args)]
struct QuantizeArgs {
    /// Layer manifest.
    #[arg(long)]
    weights: PathBuf,
    /// Directory of `<layer>.arbt` activation files, or `synthetic`.
    #[arg(long, default_value = "synthetic")]
    calib: String,
    /// Configuration file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    method: Option<Method>,
    #[arg(long)]
    iterations: Option<usize>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    weights: PathBuf,
    #[arg(long, default_value = "synthetic")]
    calib: String,
    /// Output directory of a previous `quantize` run.
    #[arg(long)]
    artifacts: PathBuf,
    /// Defaults to `<artifacts>/config.txt`.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Defaults to `<artifacts>/eval.csv`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct BenchArgs {
    #[arg(long, default_value_t = 1024)]
    n: usize,
    #[arg(long, default_value_t = 1024)]
    m: usize,
    /// Calibration rows `B·L`.
    #[arg(long, default_value_t = 65536)]
    samples: usize,
    #[arg(long, default_value_t = 15)]
    iterations: usize,
    #[arg(long, default_value_t = 128)]
    block: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Rows timed on the direct path before linear extrapolation; 0 runs it in full.
    #[arg(long, default_value_t = 2048)]
    direct_sample_rows: usize,
    #[arg(long, default_value = "bench.csv")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct InspectArgs {
    path: PathBuf,
    /// Salient fraction assumed by the manifest ledger.
    #[arg(long, default_value_t = 0.09)]
    salient_fraction: f64,
    /// Bits per stored scale in the manifest ledger.
    #[arg(long, default_value_t = 16)]
    scale_width: u32,
    #[arg(long, default_value_t = 128)]
    block: usize,
}

/// Runs the CLI and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).try_init();
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match configure_threads().and_then(|()| dispatch(cli.command)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            match e.class() {
                ErrorClass::Usage => 1,
                ErrorClass::Data => 2,
                ErrorClass::Numerical => 3,
            }
        }
    }
}

fn configure_threads() -> Result<()> {
    let Ok(value) = std::env::var("ARBQ_THREADS") else {
        return Ok(());
    };
    let threads: usize = value
        .parse()
        .ok()
        .filter(|&t| t > 0)
        .ok_or_else(|| Error::Usage(format!("ARBQ_THREADS must be a positive integer, got `{value}`")))?;
    // The global pool can be configured once per process; later calls keep it.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    Ok(())
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Quantize(a) => quantize(a),
        Command::Eval(a) => eval(a),
        Command::Bench(a) => bench(a),
        Command::Inspect(a) => inspect(a),
    }
}

/// File name of a layer's container.
pub fn artifact_name(layer: &str) -> String {
    let safe: String = layer
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-') { c } else { '_' })
        .collect();
    format!("{safe}.arbq")
}

fn load_weights(entry: &ManifestEntry, cfg: &QuantConfig) -> Result<Matrix> {
    match &entry.source {
        EntrySource::File(path) => read_matrix(path),
        EntrySource::Synthetic { rows, cols } => Ok(planted_layer(*rows, *cols, layer_seed(cfg.seed, &entry.name))),
        EntrySource::Dense16 { .. } => Err(Error::InvalidValue(format!("{} is not quantized", entry.name))),
    }
}

/// Seed of a synthetic layer; distinct names give distinct weights.
pub fn layer_seed(seed: u64, name: &str) -> u64 {
    seed ^ (u64::from(crc32fast::hash(name.as_bytes())) << 32)
}

fn load_calibration(entry: &ManifestEntry, calib: &str) -> Result<Option<Vec<Matrix>>> {
    if calib == "synthetic" {
        return Ok(None);
    }
    let path = Path::new(calib).join(format!("{}.arbt", entry.name));
    if !path.exists() {
        return Err(Error::MissingCalibration {
            layer: entry.name.clone(),
            path,
        });
    }
    read_batches(&path).map(Some)
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn quantize(a: QuantizeArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(path) => read_config(path)?,
        None => QuantConfig::default(),
    };
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    if let Some(method) = a.method {
        cfg.method = method;
    }
    if let Some(t) = a.iterations {
        cfg.iterations = t;
    }
    cfg.validate()?;
    let manifest = read_manifest(&a.weights)?;
    let entries: Vec<&ManifestEntry> = manifest.quantized().collect();
    let layers = entries
        .iter()
        .map(|e| {
            Ok(ModelLayer {
                name: e.name.clone(),
                weights: load_weights(e, &cfg)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let calib = if a.calib == "synthetic" {
        CalibSource::Synthetic
    } else {
        CalibSource::Supplied(
            entries
                .iter()
                .map(|e| load_calibration(e, &a.calib).map(|b| b.expect("directory source")))
                .collect::<Result<Vec<_>>>()?,
        )
    };
    let result = quantize_model(&layers, &calib, &cfg)?;

    create_dir(&a.out)?;
    for (layer, report) in &result.layers {
        write_quant(&a.out.join(artifact_name(&report.name)), layer)?;
    }
    let reports: Vec<_> = result.layers.iter().map(|(_, r)| r.clone()).collect();
    write_report(&a.out.join("report.csv"), &reports)?;
    write_profiles(&a.out.join("profiles.csv"), &reports)?;
    write_traces(&a.out.join("traces.csv"), &reports)?;
    write_timings(&a.out.join("timings.csv"), &reports)?;
    write_budget(&a.out.join("budget.csv"), &result.budget, reports.len())?;
    let config_path = a.out.join("config.txt");
    std::fs::write(&config_path, render_config(&cfg)).map_err(|e| Error::io(&config_path, e))?;
    println!(
        "quantized {} layers with {} into {} ({} bytes)",
        reports.len(),
        cfg.method,
        a.out.display(),
        result.budget.total_bytes
    );
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let cfg = read_config(&a.config.clone().unwrap_or_else(|| a.artifacts.join("config.txt")))?;
    let manifest = read_manifest(&a.weights)?;
    let mut rows = Vec::new();
    for entry in manifest.quantized() {
        let w = load_weights(entry, &cfg)?;
        let layer = read_quant(&a.artifacts.join(artifact_name(&entry.name)))?;
        if (layer.rows, layer.cols) != w.shape() {
            return Err(Error::shape(
                "eval",
                format!("{:?}", w.shape()),
                format!("{}x{}", layer.rows, layer.cols),
            ));
        }
        let calib = match load_calibration(entry, &a.calib)? {
            None => Calibration::synthetic(w.cols(), &cfg)?,
            Some(batches) => Calibration::from_batches(&batches, cfg.holdout_fraction)?,
        };
        rows.push((entry.name.clone(), layer_metrics(&w, &layer.reconstruct(), &calib)?));
    }
    let out = a.out.unwrap_or_else(|| a.artifacts.join("eval.csv"));
    write_eval(&out, &rows)?;
    let report = a.artifacts.join("report.csv");
    if report.exists() {
        let reference = read_metrics(&report)?;
        let mut worst: f64 = 0.0;
        for (name, m) in &rows {
            let Some((_, r)) = reference.iter().find(|(n, _)| n == name) else {
                continue;
            };
            let vals = [m.l1, m.l2, m.output_mse, m.shift_before, m.shift_after];
            for (x, y) in vals.iter().zip(r) {
                worst = worst.max((x - y).abs() / x.abs().max(y.abs()).max(f64::MIN_POSITIVE));
            }
        }
        println!("evaluated {} layers; max relative deviation from report.csv: {worst:e}", rows.len());
    } else {
        println!("evaluated {} layers", rows.len());
    }
    Ok(())
}

fn bench(a: BenchArgs) -> Result<()> {
    let cfg = BenchConfig {
        n: a.n,
        m: a.m,
        samples: a.samples,
        iterations: a.iterations,
        block: a.block,
        seed: a.seed,
        direct_sample_rows: (a.direct_sample_rows > 0).then_some(a.direct_sample_rows),
    };
    let result = bench_l2_paths(&cfg)?;
    write_bench(&a.out, std::slice::from_ref(&result))?;
    println!(
        "counted speedup {:.2} (closed form {:.2}), wall-clock speedup {:.2}",
        result.eta_counted, result.eta_formula, result.eta_wall
    );
    Ok(())
}

fn describe_manifest(manifest: &Manifest, a: &InspectArgs) -> Result<String> {
    let shapes = manifest.shapes()?;
    let mut out = format!(
        "manifest: {} entries, salient fraction {}, {}-bit scales, block {}\n",
        shapes.len(),
        a.salient_fraction,
        a.scale_width,
        a.block
    );
    for (style, label) in [(ScaleStyle::MeanScale, "mean-scale"), (ScaleStyle::RowColumn, "row-column")] {
        for cgb in [false, true] {
            let b = memory_estimate(
                &shapes,
                &LedgerConfig {
                    style,
                    cgb,
                    block_size: a.block,
                    salient_fraction: a.salient_fraction,
                    second_order_salient: true,
                    scale_width: a.scale_width,
                },
            );
            out.push_str(&format!(
                "{label:<10} cgb={cgb:<5} total {:.3} GB (weight bits {:.4})\n",
                b.total_bytes as f64 / 1e9,
                b.avg_weight_bits
            ));
        }
    }
    Ok(out)
}

fn inspect(a: InspectArgs) -> Result<()> {
    let bytes = std::fs::read(&a.path).map_err(|e| Error::io(&a.path, e))?;
    match read_header(&bytes) {
        Ok(header) => print!("{}", describe_header(&header)),
        Err(Error::BadMagic { .. }) if std::str::from_utf8(&bytes).is_ok() => {
            let manifest = read_manifest(&a.path)?;
            print!("{}", describe_manifest(&manifest, &a)?);
        }
        Err(e) => return Err(e),
    }
    Ok(())
}
