mod common;

use arbq::config::{parse_config, render_config};
use arbq::format::{decode_quant, decode_tensor, encode_matrix, encode_quant, read_header, ContainerHeader, Tensor};
use arbq::pipeline::{quantize_layer_with, Calibration, Method, QuantConfig};
use arbq::synth::{planted_layer, SynthCalib};
use arbq::{Error, Matrix};
use proptest::prelude::*;

fn golden(name: &str) -> Vec<u8> {
    std::fs::read(common::golden_dir().join(name)).expect("golden file present")
}

#[test]
fn golden_files_are_stable() {
    assert_eq!(common::check_goldens(&common::golden_dir()), Ok(7));
}

#[test]
fn quant_container_roundtrips_for_every_method() {
    let w = planted_layer(9, 37, 2);
    for method in [Method::Baseline, Method::Arb, Method::ArbX, Method::ArbRc] {
        let cfg = common::small_config(method);
        let calib = Calibration::synthetic(w.cols(), &cfg).unwrap();
        let (layer, _) = quantize_layer_with("rt", &w, &calib, &cfg).unwrap();
        let bytes = encode_quant(&layer).unwrap();
        let back = decode_quant(&bytes).unwrap();
        assert_eq!(back, layer);
        assert_eq!(back.reconstruct(), layer.reconstruct());
        match read_header(&bytes).unwrap() {
            ContainerHeader::Quant(h) => assert_eq!((h.rows, h.cols), (9, 37)),
            other => panic!("unexpected header {other:?}"),
        }
    }
}

#[test]
fn flipped_payload_byte_fails_the_checksum() {
    let mut bytes = golden("layer-arb-rc.arbq");
    let i = bytes.len() - 10;
    bytes[i] ^= 0x01;
    assert!(matches!(decode_quant(&bytes), Err(Error::Checksum { .. })));
}

#[test]
fn newer_versions_are_rejected() {
    for name in ["layer-arb.arbq", "matrix.arbt"] {
        let mut bytes = golden(name);
        let v = u16::from_le_bytes([bytes[4], bytes[5]]) + 1;
        bytes[4..6].copy_from_slice(&v.to_le_bytes());
        let err = if name.ends_with(".arbq") {
            decode_quant(&bytes).unwrap_err()
        } else {
            decode_tensor(&bytes).unwrap_err()
        };
        assert!(matches!(err, Error::UnsupportedVersion(x) if x == v), "{name}: {err}");
    }
}

#[test]
fn truncated_and_foreign_files_are_rejected() {
    let bytes = golden("layer-arb-x.arbq");
    for cut in [0, 3, 20, bytes.len() - 1] {
        assert!(decode_quant(&bytes[..cut]).is_err(), "cut at {cut}");
    }
    let tensor = golden("matrix.arbt");
    assert!(matches!(decode_quant(&tensor), Err(Error::BadMagic { .. })));
    assert!(matches!(decode_tensor(&bytes), Err(Error::BadMagic { .. })));
}

#[test]
fn zero_sized_tensors_are_rejected() {
    assert!(matches!(decode_tensor(&encode_matrix(&Matrix::zeros(4, 0))), Err(Error::InvalidValue(_))));
}

proptest! {
    #[test]
    fn tensor_roundtrip(rows in 1usize..6, cols in 1usize..6, seed in any::<u64>()) {
        // f32-representable values survive exactly
        let m = Matrix::from_fn(rows, cols, |r, c| {
            f64::from(((seed ^ (r * 31 + c) as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) >> 40) as f32 / 1024.0)
        });
        match decode_tensor(&encode_matrix(&m)).unwrap() {
            Tensor::Matrix(back) => prop_assert_eq!(back, m),
            Tensor::Batches(_) => prop_assert!(false, "rank changed"),
        }
    }

    #[test]
    fn config_roundtrip(
        method in 0u8..4,
        order in 1u8..=2,
        iterations in 0usize..40,
        block in 1usize..512,
        damping in 0.0f64..1.0,
        cgb: bool,
        compensate: bool,
        seed: u64,
        holdout in 0.0f64..0.9,
        samples in 1usize..300,
    ) {
        let cfg = QuantConfig {
            method: Method::from_tag(method).unwrap(),
            salient_order: order,
            iterations,
            block_size: block,
            damping,
            cgb,
            compensate,
            seed,
            holdout_fraction: holdout,
            synth: SynthCalib { samples, ..SynthCalib::default() },
            ..QuantConfig::default()
        };
        prop_assume!(cfg.validate().is_ok());
        let text = render_config(&cfg);
        prop_assert_eq!(parse_config(&text).unwrap(), cfg);
    }
}
