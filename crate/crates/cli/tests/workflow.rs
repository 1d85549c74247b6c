//! End-to-end workflow through the binary: sample, label, build, learn,
//! query, analyze, bench. Uses the shipped fixtures.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_mdpc")
}

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn run(args: &[&str]) -> Output {
    Command::new(bin()).args(args).output().expect("binary runs")
}

fn run_ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "command {:?} failed: {}",
        args,
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).expect("utf8")
}

#[test]
fn full_backdoor_workflow() {
    let dir = tempfile::tempdir().unwrap();
    let fx = fixtures();
    let bn = fx.join("bn_backdoor_small.json");
    let vtree = fx.join("vtree_backdoor_small.json");
    let data = dir.path().join("data.csv");
    let mdv = dir.path().join("mdv.json");
    let model = dir.path().join("model.json");
    let fitted = dir.path().join("fitted.json");
    let result = dir.path().join("result.json");

    run_ok(&[
        "sample",
        "--bn",
        bn.to_str().unwrap(),
        "-n",
        "800",
        "--seed",
        "7",
        "-o",
        data.to_str().unwrap(),
    ]);
    let csv = std::fs::read_to_string(&data).unwrap();
    assert_eq!(csv.lines().count(), 801);

    run_ok(&[
        "label",
        "--vtree",
        vtree.to_str().unwrap(),
        "--require",
        "X,Z1,Z2",
        "-o",
        mdv.to_str().unwrap(),
    ]);
    let mdv_text = std::fs::read_to_string(&mdv).unwrap();
    assert!(mdv_text.contains("\"label\""));

    run_ok(&[
        "build",
        "--mdvtree",
        mdv.to_str().unwrap(),
        "--groups",
        "2",
        "--nodes-per-group",
        "8",
        "--seed",
        "7",
        "-o",
        model.to_str().unwrap(),
    ]);

    run_ok(&[
        "learn",
        "--model",
        model.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--em-iters",
        "15",
        "-o",
        fitted.to_str().unwrap(),
    ]);

    run_ok(&[
        "query",
        "--model",
        fitted.to_str().unwrap(),
        "--spec",
        fx.join("query_backdoor.json").to_str().unwrap(),
        "-o",
        result.to_str().unwrap(),
    ]);
    let out: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&result).unwrap()).unwrap();
    let table = out["table"].as_object().expect("small output has a table");
    let p0 = table["Y=0"].as_f64().unwrap();
    let p1 = table["Y=1"].as_f64().unwrap();
    assert!((p0 + p1 - 1.0).abs() < 0.05, "interventional mass ~1: {}", p0 + p1);
    assert!(out["diagnostics"]["requirements"].is_array());

    // The circuit-valued form works against the same model.
    let cv = run_ok(&[
        "query",
        "--model",
        fitted.to_str().unwrap(),
        "--spec",
        fx.join("query_backdoor_circuit.json").to_str().unwrap(),
    ]);
    let out: serde_json::Value = serde_json::from_str(&cv).unwrap();
    assert!(out["result"]["circuit"].is_object());
}

#[test]
fn determinism_of_seeded_subcommands() {
    let dir = tempfile::tempdir().unwrap();
    let fx = fixtures();
    let bn = fx.join("bn_backdoor_small.json");
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    for out in [&a, &b] {
        run_ok(&[
            "sample",
            "--bn",
            bn.to_str().unwrap(),
            "-n",
            "100",
            "--seed",
            "13",
            "-o",
            out.to_str().unwrap(),
        ]);
    }
    assert_eq!(
        std::fs::read_to_string(&a).unwrap(),
        std::fs::read_to_string(&b).unwrap()
    );
    // Same-seed builds serialize byte-identically.
    let vtree = fx.join("vtree_backdoor_small.json");
    let mdv = dir.path().join("mdv.json");
    run_ok(&[
        "label",
        "--vtree",
        vtree.to_str().unwrap(),
        "--require",
        "X,Z1,Z2",
        "-o",
        mdv.to_str().unwrap(),
    ]);
    let m1 = dir.path().join("m1.json");
    let m2 = dir.path().join("m2.json");
    for out in [&m1, &m2] {
        run_ok(&[
            "build",
            "--mdvtree",
            mdv.to_str().unwrap(),
            "--seed",
            "21",
            "-o",
            out.to_str().unwrap(),
        ]);
    }
    assert_eq!(
        std::fs::read_to_string(&m1).unwrap(),
        std::fs::read_to_string(&m2).unwrap()
    );
}

#[test]
fn analyze_forward_and_backward() {
    let dir = tempfile::tempdir().unwrap();
    let fx = fixtures();
    // Backward requirements of the hand-written adjustment pipeline.
    let backward = run_ok(&[
        "analyze",
        "--pipeline",
        fx.join("pipeline_backdoor.json").to_str().unwrap(),
        "--backward",
    ]);
    assert!(backward.contains("C:"), "{backward}");
    assert!(backward.contains("X"), "{backward}");
    assert!(backward.contains("Z1"), "{backward}");

    // Forward on the marginal-max pipeline: fails for a label-free input,
    // passes once the requirement is enforced.
    let vtree = fx.join("vtree_backdoor_small.json");
    let plain = run_ok(&[
        "analyze",
        "--pipeline",
        fx.join("pipeline_mmap.json").to_str().unwrap(),
        "--inputs",
        vtree.to_str().unwrap(),
    ]);
    assert!(plain.contains("failure"), "{plain}");
    let mdv = dir.path().join("mdv.json");
    run_ok(&[
        "label",
        "--vtree",
        vtree.to_str().unwrap(),
        "--require",
        "X,Z1",
        "-o",
        mdv.to_str().unwrap(),
    ]);
    let enforced = run_ok(&[
        "analyze",
        "--pipeline",
        fx.join("pipeline_mmap.json").to_str().unwrap(),
        "--inputs",
        mdv.to_str().unwrap(),
    ]);
    assert!(enforced.trim() == "tractable", "{enforced}");
}

#[test]
fn bench_prints_a_table() {
    let fx = fixtures();
    let out = run_ok(&[
        "bench",
        "backdoor",
        "--bn",
        fx.join("bn_backdoor_small.json").to_str().unwrap(),
        "--x",
        "X",
        "--y",
        "Y",
        "--z",
        "Z1,Z2",
        "-n",
        "300",
        "--runs",
        "2",
        "--seed",
        "3",
        "--em-iters",
        "10",
    ]);
    assert!(out.contains("err md"), "{out}");
    assert!(out.lines().count() >= 4, "{out}");
    assert!(out.contains("mean"), "{out}");
}

#[test]
fn errors_are_single_line_json() {
    let out = run(&["sample", "--bn", "/nonexistent.json", "-o", "-"]);
    assert!(!out.status.success());
    let stderr = String::from_utf8(out.stderr).unwrap();
    let line = stderr.lines().next().unwrap();
    let parsed: serde_json::Value = serde_json::from_str(line).expect("machine-parseable");
    assert!(parsed["error"]["kind"].is_string());
    assert!(parsed["error"]["message"].is_string());
}
