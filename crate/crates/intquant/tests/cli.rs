//! Black-box tests of the `intquant` binary: exit codes, artifact files,
//! and determinism of the emitted reports.

use ndarray::Array2;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde_json::Value;
use std::path::Path;
use std::process::{Command, Output};

use intquant::tensorio::{write_tensor, Tensor, TensorData};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_intquant"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| {
        panic!(
            "stdout not json: {e}\nstdout: {}\nstderr: {}",
            String::from_utf8_lossy(&out.stdout),
            String::from_utf8_lossy(&out.stderr)
        )
    })
}

#[test]
fn sweep_writes_report_and_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "sweep",
        "--kernel",
        "gelu",
        "--domain",
        "-6:6:0.01",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let report: Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap())
            .unwrap();
    assert_eq!(report["metrics"]["within_bound"], Value::Bool(true));
    let csv = std::fs::read_to_string(dir.path().join("points.csv")).unwrap();
    assert!(csv.starts_with("input,approx,exact,abs_error\n"));
    assert!(csv.lines().count() > 1000);
}

#[test]
fn sweep_without_out_prints_to_stdout() {
    let out = run(&["sweep", "--kernel", "ln", "--domain", "1:16:0.01"]);
    assert_eq!(out.status.code(), Some(0));
    let v = stdout_json(&out);
    assert_eq!(v["schema"], 1);
    assert_eq!(v["metrics"]["report"]["kernel"], "ln");
}

#[test]
fn exp_positive_domain_needs_extended_flag() {
    let out = run(&["sweep", "--kernel", "exp", "--domain", "0:1:0.1"]);
    assert_eq!(out.status.code(), Some(2));
    let out = run(&["sweep", "--kernel", "exp", "--domain", "0:1:0.1", "--extended"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn unknown_kernel_is_usage_error() {
    let out = run(&["sweep", "--kernel", "tanh"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn violated_frozen_bound_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let tight = dir.path().join("tight.toml");
    std::fs::write(
        &tight,
        "schema = 1\nexp_max_rel_error = 0.0001\nln_max_abs_error = 1.0\n\
         sigmoid_max_abs_error = 1.0\ngelu_max_abs_error = 1.0\nisqrt_max_rel_error = 1.0\n\
         softmax_max_abs_error = 1.0\nsoftmax_sum_lo = 0.5\nsoftmax_sum_hi = 1.5\n\
         layernorm_max_abs_error = 1.0\nblock_min_cosine = 0.0\n",
    )
    .unwrap();
    let out = run(&[
        "--expectations",
        tight.to_str().unwrap(),
        "sweep",
        "--kernel",
        "exp",
        "--domain",
        "-4:0:0.01",
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn invalid_config_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "clamp_percentile = 40.0\n").unwrap();
    let out = run(&["--config", cfg.to_str().unwrap(), "census", "--kernel", "exp"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("clamp_percentile"));
}

fn write_layer(dir: &Path, name: &str, scales: &[f64], samples: usize, seed: u64) {
    let layer = dir.join(name);
    std::fs::create_dir_all(&layer).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..samples {
        let rows = 32;
        let x = Array2::from_shape_fn((rows, scales.len()), |(_, c)| {
            rng.gen_range(-scales[c]..scales[c])
        });
        let t = Tensor::new(
            vec![rows, scales.len()],
            TensorData::F64(x.iter().copied().collect()),
        )
        .unwrap();
        write_tensor(&layer.join(format!("s{i}.qtns")), &t).unwrap();
    }
}

#[test]
fn calibrate_then_quantize_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let acts = dir.path().join("acts");
    // two well-separated scale tiers: a sensible plan puts them in
    // different groups
    let scales: Vec<f64> = (0..8).map(|c| if c < 4 { 0.01 } else { 1.0 }).collect();
    write_layer(&acts, "layer0", &scales, 4, 5);
    let plan = dir.path().join("plan.json");
    let out = run(&[
        "calibrate",
        "--activations",
        acts.to_str().unwrap(),
        "--out",
        plan.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let set: Value = serde_json::from_str(&std::fs::read_to_string(&plan).unwrap()).unwrap();
    let layer = &set["layers"][0];
    assert_eq!(layer["channels"], 8);
    let groups = layer["groups"].as_u64().unwrap();
    assert!(groups >= 2, "expected the 100x tiers to split, got g={groups}");
    let k: Vec<u64> = layer["plan"]["k"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_u64().unwrap())
        .collect();
    assert!(k.iter().any(|&ki| ki > 0), "tiers should get distinct scales: {k:?}");

    // quantize one more sample drawn from the same distribution
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let x: Vec<f64> = (0..32 * 8)
        .map(|i| rng.gen_range(-scales[i % 8]..scales[i % 8]))
        .collect();
    let tensor_path = dir.path().join("x.qtns");
    write_tensor(
        &tensor_path,
        &Tensor::new(vec![32, 8], TensorData::F64(x)).unwrap(),
    )
    .unwrap();
    let codes_path = dir.path().join("q.qtns");
    let out = run(&[
        "quantize",
        "--tensor",
        tensor_path.to_str().unwrap(),
        "--plan",
        plan.to_str().unwrap(),
        "--out",
        codes_path.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let v = stdout_json(&out);
    let mse = v["metrics"]["reconstruction_mse"].as_f64().unwrap();
    assert!(mse < 1e-3, "mse {mse}");
    let q = intquant::tensorio::read_tensor(&codes_path).unwrap();
    assert_eq!(q.shape, vec![32, 8]);
    assert!(q.scale.is_some());
    assert!(matches!(q.data, TensorData::I32(_)));
}

#[test]
fn quantize_rejects_channel_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let acts = dir.path().join("acts");
    write_layer(&acts, "layer0", &[1.0; 4], 2, 7);
    let plan = dir.path().join("plan.json");
    let out = run(&[
        "calibrate",
        "--activations",
        acts.to_str().unwrap(),
        "--out",
        plan.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0));
    let tensor_path = dir.path().join("wide.qtns");
    write_tensor(
        &tensor_path,
        &Tensor::new(vec![2, 6], TensorData::F64(vec![0.5; 12])).unwrap(),
    )
    .unwrap();
    let out = run(&[
        "quantize",
        "--tensor",
        tensor_path.to_str().unwrap(),
        "--plan",
        plan.to_str().unwrap(),
        "--out",
        dir.path().join("q.qtns").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("mismatch"));
}

#[test]
fn budget_zero_config_forces_single_groups() {
    let dir = tempfile::tempdir().unwrap();
    let acts = dir.path().join("acts");
    write_layer(&acts, "a", &[0.01, 0.01, 1.0, 1.0], 2, 21);
    write_layer(&acts, "b", &[0.1, 0.1, 2.0, 2.0], 2, 22);
    let cfg = dir.path().join("cfg.toml");
    std::fs::write(&cfg, "bop_budget = 0\n").unwrap();
    let plan = dir.path().join("plan.json");
    let out = run(&[
        "--config",
        cfg.to_str().unwrap(),
        "calibrate",
        "--activations",
        acts.to_str().unwrap(),
        "--out",
        plan.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let set: Value = serde_json::from_str(&std::fs::read_to_string(&plan).unwrap()).unwrap();
    for layer in set["layers"].as_array().unwrap() {
        assert_eq!(layer["groups"], 1);
    }
}

#[test]
fn simulate_is_deterministic_modulo_timestamp() {
    let mut a = stdout_json(&run(&["simulate", "--seed", "42"]));
    let mut b = stdout_json(&run(&["simulate", "--seed", "42"]));
    assert_eq!(a["metrics"]["within_bound"], Value::Bool(true));
    a["provenance"]["timestamp_unix"] = Value::Null;
    b["provenance"]["timestamp_unix"] = Value::Null;
    assert_eq!(a, b);
}

#[test]
fn census_reports_zero_divisions() {
    let out = run(&["census", "--kernel", "softmax", "--size", "16"]);
    assert_eq!(out.status.code(), Some(0));
    let v = stdout_json(&out);
    assert_eq!(v["metrics"]["divisions"], 0);
    assert_eq!(v["metrics"]["counters"]["mults"], 4 * 16 + 2);
    assert!(v["metrics"]["counters"].get("divides").is_none());
}
