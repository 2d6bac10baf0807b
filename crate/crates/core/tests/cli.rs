mod common;

use std::path::Path;
use std::process::{Command, Output};

use arbq::format::{write_batches, write_matrix};
use arbq::report::read_metrics;
use arbq::synth::{planted_layer, synthetic_batches, SynthCalib};

fn arbq(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_arbq"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Manifest with one file-backed layer and its calibration directory.
fn file_model(dir: &Path) {
    write_matrix(&dir.join("proj.arbt"), &planted_layer(16, 48, 1)).unwrap();
    std::fs::write(dir.join("model.manifest"), "layer proj proj.arbt\nshape extra 8 32\n").unwrap();
    std::fs::create_dir(dir.join("calib")).unwrap();
    let calib = SynthCalib {
        samples: 10,
        seq_len: 4,
        ..SynthCalib::default()
    };
    write_batches(&dir.join("calib/proj.arbt"), &synthetic_batches(48, &calib, 3)).unwrap();
    write_batches(&dir.join("calib/extra.arbt"), &synthetic_batches(32, &calib, 4)).unwrap();
}

#[test]
fn quantize_then_eval_with_supplied_calibration() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    file_model(dir);
    std::fs::write(dir.join("cfg.txt"), "method = arb\nblock_size = 16\n").unwrap();
    let q = arbq(
        &["quantize", "--weights", "model.manifest", "--calib", "calib", "--config", "cfg.txt", "--out", "out"],
        dir,
    );
    assert!(q.status.success(), "{}", stderr(&q));
    for f in ["proj.arbq", "extra.arbq", "report.csv", "profiles.csv", "traces.csv", "timings.csv", "budget.csv"] {
        assert!(dir.join("out").join(f).exists(), "{f}");
    }
    let report = std::fs::read_to_string(dir.join("out/report.csv")).unwrap();
    assert!(report.lines().nth(1).unwrap().starts_with("proj,arb,16,48,"));

    let e = arbq(&["eval", "--weights", "model.manifest", "--calib", "calib", "--artifacts", "out"], dir);
    assert!(e.status.success(), "{}", stderr(&e));
    let a = read_metrics(&dir.join("out/report.csv")).unwrap();
    let b = read_metrics(&dir.join("out/eval.csv")).unwrap();
    assert_eq!(a.len(), 2);
    for ((na, x), (nb, y)) in a.iter().zip(&b) {
        assert_eq!(na, nb);
        for (u, v) in x.iter().zip(y) {
            assert!(common::rel_diff(*u, *v) <= 1e-9, "{na}: {u} vs {v}");
        }
    }

    let i = arbq(&["inspect", "out/proj.arbq"], dir);
    let text = String::from_utf8_lossy(&i.stdout);
    assert!(text.contains("magic: ARBQ") && text.contains("method: arb"), "{text}");
}

#[test]
fn reports_are_reproducible_across_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let manifest = common::crate_dir().join("data/demo.manifest");
    let m = manifest.to_str().unwrap();
    for out in ["a", "b"] {
        let o = arbq(&["quantize", "--weights", m, "--out", out, "--seed", "7", "--iterations", "3"], dir);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    for f in ["report.csv", "traces.csv", "profiles.csv", "attn.0.arbq", "config.txt"] {
        let a = std::fs::read(dir.join("a").join(f)).unwrap();
        let b = std::fs::read(dir.join("b").join(f)).unwrap();
        assert_eq!(a, b, "{f}");
    }
    let config = std::fs::read_to_string(dir.join("a/config.txt")).unwrap();
    assert!(config.contains("seed = 7") && config.contains("iterations = 3"), "{config}");
}

#[test]
fn exit_codes_follow_error_classes() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    file_model(dir);
    std::fs::remove_file(dir.join("calib/extra.arbt")).unwrap();

    let missing = arbq(&["quantize", "--weights", "model.manifest", "--calib", "calib", "--out", "o"], dir);
    assert_eq!(missing.status.code(), Some(2));
    assert!(stderr(&missing).contains("extra"), "{}", stderr(&missing));

    std::fs::write(dir.join("bad.txt"), "methd = arb\n").unwrap();
    let bad = arbq(&["quantize", "--weights", "model.manifest", "--config", "bad.txt", "--out", "o"], dir);
    assert_eq!(bad.status.code(), Some(1));
    assert!(stderr(&bad).contains("line 1"), "{}", stderr(&bad));

    assert_eq!(arbq(&["quantize"], dir).status.code(), Some(1));
    assert_eq!(arbq(&["--version"], dir).status.code(), Some(0));
    assert_eq!(arbq(&["inspect", "model.manifest"], dir).status.code(), Some(0));
    std::fs::write(dir.join("junk.bin"), [0xffu8, 0, 1, 2, 3, 4, 5, 6]).unwrap();
    assert_eq!(arbq(&["inspect", "junk.bin"], dir).status.code(), Some(2));

    let threads = Command::new(env!("CARGO_BIN_EXE_arbq"))
        .args(["inspect", "model.manifest"])
        .env("ARBQ_THREADS", "many")
        .current_dir(dir)
        .output()
        .unwrap();
    assert_eq!(threads.status.code(), Some(1));
}

#[test]
fn bench_writes_a_row() {
    let tmp = tempfile::tempdir().unwrap();
    let o = arbq(
        &["bench", "--n", "32", "--m", "64", "--samples", "256", "--block", "16", "--iterations", "3", "--out", "b.csv"],
        tmp.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(tmp.path().join("b.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
}
