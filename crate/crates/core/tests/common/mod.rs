//! Helpers shared by the integration tests and the acceptance harness.
#![allow(dead_code)]

use std::path::{Path, PathBuf};

use arbq::config::{parse_config, render_config};
use arbq::format::{decode_quant, decode_tensor, encode_batches, encode_matrix, encode_quant, Tensor};
use arbq::pipeline::{quantize_layer_with, Calibration, Method, QuantConfig};
use arbq::synth::{planted_layer, SynthCalib};
use arbq::Matrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{StandardNormal, StudentT};

pub fn crate_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
}

pub fn golden_dir() -> PathBuf {
    crate_dir().join("tests/golden")
}

pub fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// Student-t with three degrees of freedom.
pub fn heavy_tailed(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    let t = StudentT::new(3.0).expect("valid degrees of freedom");
    Matrix::from_fn(rows, cols, |_, _| rng.sample(t))
}

/// Small configuration used for the golden containers and quick pipeline runs.
pub fn small_config(method: Method) -> QuantConfig {
    QuantConfig {
        method,
        block_size: 16,
        synth: SynthCalib {
            samples: 12,
            seq_len: 4,
            ..SynthCalib::default()
        },
        ..QuantConfig::default()
    }
}

/// Every container the format promises to keep stable, keyed by file name.
pub fn golden_cases() -> arbq::Result<Vec<(String, Vec<u8>)>> {
    let mut cases = vec![
        (
            "matrix.arbt".to_string(),
            encode_matrix(&Matrix::from_fn(3, 5, |r, c| r as f64 * 0.5 - c as f64 * 0.25)),
        ),
        (
            "batches.arbt".to_string(),
            encode_batches(&[
                Matrix::from_fn(2, 3, |r, c| (r * 3 + c) as f64),
                Matrix::from_fn(2, 3, |r, c| -((r * 3 + c) as f64) / 8.0),
            ])?,
        ),
        ("config.txt".to_string(), render_config(&QuantConfig::default()).into_bytes()),
    ];
    let w = planted_layer(12, 40, 5);
    for method in [Method::Baseline, Method::Arb, Method::ArbX, Method::ArbRc] {
        let cfg = small_config(method);
        let calib = Calibration::synthetic(w.cols(), &cfg)?;
        let (layer, _) = quantize_layer_with("golden", &w, &calib, &cfg)?;
        cases.push((format!("layer-{}.arbq", method.name()), encode_quant(&layer)?));
    }
    Ok(cases)
}

/// Re-encodes a decoded golden file.
fn reencode(name: &str, bytes: &[u8]) -> arbq::Result<Vec<u8>> {
    if name.ends_with(".arbq") {
        encode_quant(&decode_quant(bytes)?)
    } else if name.ends_with(".arbt") {
        match decode_tensor(bytes)? {
            Tensor::Matrix(m) => Ok(encode_matrix(&m)),
            Tensor::Batches(b) => encode_batches(&b),
        }
    } else {
        let text = std::str::from_utf8(bytes).map_err(|e| arbq::Error::Malformed(e.to_string()))?;
        Ok(render_config(&parse_config(text)?).into_bytes())
    }
}

/// Compares fresh encodings and decode-encode roundtrips with the golden
/// files; `ARBQ_BLESS=1` rewrites them instead.
pub fn check_goldens(dir: &Path) -> Result<usize, String> {
    let cases = golden_cases().map_err(|e| e.to_string())?;
    let bless = std::env::var_os("ARBQ_BLESS").is_some_and(|v| v == "1");
    if bless {
        std::fs::create_dir_all(dir).map_err(|e| e.to_string())?;
    }
    for (name, fresh) in &cases {
        let path = dir.join(name);
        if bless {
            std::fs::write(&path, fresh).map_err(|e| e.to_string())?;
            continue;
        }
        let golden = std::fs::read(&path).map_err(|e| format!("{}: {e}", path.display()))?;
        if &golden != fresh {
            return Err(format!("{name}: fresh encoding differs from golden file"));
        }
        let again = reencode(name, &golden).map_err(|e| format!("{name}: {e}"))?;
        if again != golden {
            return Err(format!("{name}: decode-encode roundtrip is not bit-exact"));
        }
    }
    Ok(cases.len())
}

pub fn rel_diff(a: f64, b: f64) -> f64 {
    if a == b {
        return 0.0;
    }
    (a - b).abs() / a.abs().max(b.abs())
}
