mod common;

use arbq::format::encode_quant;
use arbq::pipeline::{
    quantize_layer_with, quantize_model, CalibSource, Calibration, Method, ModelLayer, QuantConfig, QuantReport,
};
use arbq::synth::planted_layer;
use arbq::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const METHODS: [Method; 4] = [Method::Baseline, Method::Arb, Method::ArbX, Method::ArbRc];

fn run(w: &Matrix, cfg: &QuantConfig) -> (arbq::pipeline::QuantizedLayer, QuantReport) {
    let calib = Calibration::synthetic(w.cols(), cfg).unwrap();
    quantize_layer_with("t", w, &calib, cfg).unwrap()
}

#[test]
fn method_names_roundtrip() {
    for m in METHODS {
        assert_eq!(m.name().parse::<Method>().unwrap(), m);
        assert_eq!(Method::from_tag(m.tag()), Some(m));
    }
    assert!("arb-y".parse::<Method>().is_err());
}

#[test]
fn rank_one_sign_pattern_is_reproduced() {
    // |W| = u vᵀ with signs: row-column scaling represents it exactly
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let u: Vec<f64> = (0..12).map(|_| rng.gen_range(0.5..2.0)).collect();
    let v: Vec<f64> = (0..32).map(|_| rng.gen_range(0.5..2.0)).collect();
    let w = Matrix::from_fn(12, 32, |r, c| u[r] * v[c] * if rng.gen_bool(0.5) { 1.0 } else { -1.0 });
    let cfg = QuantConfig {
        cgb: false,
        ..common::small_config(Method::ArbRc)
    };
    let (layer, report) = run(&w, &cfg);
    let q = layer.reconstruct();
    let err = w.sub(&q).unwrap().frobenius_sq() / w.frobenius_sq();
    assert!(err < 1e-12, "relative error {err}");
    assert!(report.metrics.l1 < 1e-10 * w.frobenius_sq());
}

#[test]
fn refinement_never_loses_to_the_closed_form() {
    for seed in 0..4 {
        let w = planted_layer(24, 64, seed);
        let plain = |method| QuantConfig {
            compensate: false,
            cgb: false,
            seed,
            ..common::small_config(method)
        };
        let (_, base) = run(&w, &plain(Method::Baseline));
        let (_, arb) = run(&w, &plain(Method::Arb));
        assert!(arb.metrics.l1 <= base.metrics.l1, "seed {seed}: {} > {}", arb.metrics.l1, base.metrics.l1);
        assert!(arb.trace.last() <= arb.trace.first());
        assert_eq!(base.trace.len(), 1);
        assert!(arb.metrics.shift_after < base.metrics.shift_after, "seed {seed}");
    }
}

#[test]
fn traces_are_monotone_for_every_method() {
    let w = planted_layer(20, 48, 9);
    for method in METHODS {
        let (_, report) = run(&w, &common::small_config(method));
        assert!(report.trace_monotone(1e-9), "{method}: {:?}", report.trace);
        assert_eq!(report.trace.len(), common::small_config(method).effective_iterations() + 1);
    }
}

#[test]
fn runs_are_deterministic() {
    let w = planted_layer(16, 40, 3);
    for method in METHODS {
        let cfg = common::small_config(method);
        let (a, ra) = run(&w, &cfg);
        let (b, rb) = run(&w, &cfg);
        assert_eq!(encode_quant(&a).unwrap(), encode_quant(&b).unwrap());
        assert_eq!(ra.metrics, rb.metrics);
        assert_eq!(ra.trace, rb.trace);
    }
}

#[test]
fn model_runs_match_single_layer_runs() {
    let cfg = common::small_config(Method::ArbX);
    let layers: Vec<ModelLayer> = (0..3)
        .map(|i| ModelLayer {
            name: format!("l{i}"),
            weights: planted_layer(8 + i, 24 + 8 * i, i as u64),
        })
        .collect();
    let result = quantize_model(&layers, &CalibSource::Synthetic, &cfg).unwrap();
    assert_eq!(result.layers.len(), 3);
    let mut bits = 0.0;
    for (layer, (q, report)) in layers.iter().zip(&result.layers) {
        let (single, _) = run(&layer.weights, &cfg);
        assert_eq!(q, &single);
        assert_eq!(report.name, layer.name);
        bits += report.budget.total_bytes as f64;
    }
    assert_eq!(result.budget.total_bytes as f64, bits);
}

#[test]
fn supplied_calibration_must_match_layer_count() {
    let cfg = common::small_config(Method::Arb);
    let layers = vec![ModelLayer {
        name: "a".into(),
        weights: planted_layer(4, 8, 0),
    }];
    assert!(quantize_model(&layers, &CalibSource::Supplied(vec![]), &cfg).is_err());
}
