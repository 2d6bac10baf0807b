//! Line-oriented `key = value` configuration files.
//!
//! Blank lines and text after `#` are ignored. Keys mirror
//! [`QuantConfig`]; lists are comma separated. Unknown or repeated keys are
//! rejected, absent keys keep their defaults.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::pipeline::QuantConfig;

pub const KEYS: [&str; 15] = [
    "method",
    "salient_order",
    "iterations",
    "block_size",
    "salient_fractions",
    "percentile_grid",
    "damping",
    "cgb",
    "compensate",
    "seed",
    "holdout_fraction",
    "calib_samples",
    "calib_seq_len",
    "calib_outlier_fraction",
    "calib_outlier_scale",
];

fn list(values: &[f64]) -> String {
    values.iter().map(f64::to_string).collect::<Vec<_>>().join(",")
}

/// Renders every key; floats use the shortest exact representation.
pub fn render_config(cfg: &QuantConfig) -> String {
    let mut out = String::new();
    let mut line = |k: &str, v: String| writeln!(out, "{k} = {v}").expect("string write");
    line("method", cfg.method.to_string());
    line("salient_order", cfg.salient_order.to_string());
    line("iterations", cfg.iterations.to_string());
    line("block_size", cfg.block_size.to_string());
    line("salient_fractions", list(&cfg.salient_fractions));
    line("percentile_grid", list(&cfg.percentile_grid));
    line("damping", cfg.damping.to_string());
    line("cgb", cfg.cgb.to_string());
    line("compensate", cfg.compensate.to_string());
    line("seed", cfg.seed.to_string());
    line("holdout_fraction", cfg.holdout_fraction.to_string());
    line("calib_samples", cfg.synth.samples.to_string());
    line("calib_seq_len", cfg.synth.seq_len.to_string());
    line("calib_outlier_fraction", cfg.synth.outlier_fraction.to_string());
    line("calib_outlier_scale", cfg.synth.outlier_scale.to_string());
    out
}

fn parse_value<T: std::str::FromStr>(line: usize, key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config {
        line,
        message: format!("invalid value `{v}` for `{key}`"),
    })
}

fn parse_list(line: usize, key: &str, v: &str) -> Result<Vec<f64>> {
    v.split(',').map(|x| parse_value(line, key, x.trim())).collect()
}

/// Parses and validates a configuration.
pub fn parse_config(text: &str) -> Result<QuantConfig> {
    let mut cfg = QuantConfig::default();
    let mut seen = HashSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (key, value) = content.split_once('=').ok_or_else(|| Error::Config {
            line,
            message: format!("expected `key = value`, got `{content}`"),
        })?;
        let (key, v) = (key.trim(), value.trim());
        if !KEYS.contains(&key) {
            return Err(Error::Config {
                line,
                message: format!("unknown key `{key}`"),
            });
        }
        if !seen.insert(key.to_string()) {
            return Err(Error::Config {
                line,
                message: format!("duplicate key `{key}`"),
            });
        }
        match key {
            "method" => cfg.method = v.parse().map_err(|message| Error::Config { line, message })?,
            "salient_order" => cfg.salient_order = parse_value(line, key, v)?,
            "iterations" => cfg.iterations = parse_value(line, key, v)?,
            "block_size" => cfg.block_size = parse_value(line, key, v)?,
            "salient_fractions" => cfg.salient_fractions = parse_list(line, key, v)?,
            "percentile_grid" => cfg.percentile_grid = parse_list(line, key, v)?,
            "damping" => cfg.damping = parse_value(line, key, v)?,
            "cgb" => cfg.cgb = parse_value(line, key, v)?,
            "compensate" => cfg.compensate = parse_value(line, key, v)?,
            "seed" => cfg.seed = parse_value(line, key, v)?,
            "holdout_fraction" => cfg.holdout_fraction = parse_value(line, key, v)?,
            "calib_samples" => cfg.synth.samples = parse_value(line, key, v)?,
            "calib_seq_len" => cfg.synth.seq_len = parse_value(line, key, v)?,
            "calib_outlier_fraction" => cfg.synth.outlier_fraction = parse_value(line, key, v)?,
            "calib_outlier_scale" => cfg.synth.outlier_scale = parse_value(line, key, v)?,
            _ => unreachable!("key listed"),
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn read_config(path: &Path) -> Result<QuantConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text)
}
