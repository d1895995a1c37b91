use std::path::Path;
use std::process::{Command, Output};

fn ggn(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ggn"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .expect("ggn runs")
}

fn small_moons(extra: &[&str]) -> Vec<String> {
    let base = [
        "dataset.kind=two_moons",
        "dataset.n_train=20",
        "dataset.n_test=10",
        "network.kind=mlp",
        "network.hidden=[4]",
        "likelihood=bernoulli",
        "prior.delta=1.0",
        "train.max_epochs=50",
        "train.lr=0.01",
    ];
    let mut out = Vec::new();
    for s in base.iter().chain(extra) {
        out.push("--set".to_string());
        out.push(s.to_string());
    }
    out
}

fn run_with(cmd: &str, sets: Vec<String>, dir: &Path) -> Output {
    let mut args = vec![cmd.to_string(), "--out".into(), "run".into()];
    args.extend(sets);
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    ggn(&refs, dir)
}

fn csv_rows(path: &Path) -> Vec<String> {
    let text = std::fs::read_to_string(path).unwrap();
    text.lines().skip(1).map(str::to_string).collect()
}

#[test]
fn single_cell_sweep_has_one_row() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_with(
        "sweep",
        small_moons(&["sweep.deltas={\"lo\":1.0,\"hi\":1.0,\"n\":1}", "sweep.sigma2s=null"]),
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(csv_rows(&dir.path().join("run/sweep.csv")).len(), 1);
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("run/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "sweep");
    assert!(manifest["wall_time_secs"].as_f64().unwrap() >= 0.0);
}

#[test]
fn predict_one_row_per_method() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_with(
        "predict",
        small_moons(&["predict.samples=20", "predict.inputs={\"grid\":{\"lo\":[0,0],\"hi\":[0,0],\"n\":1}}"]),
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = csv_rows(&dir.path().join("run/predictive.csv"));
    assert_eq!(rows.len(), 3);
    let methods: Vec<&str> = rows.iter().map(|r| r.split(',').nth(2).unwrap()).collect();
    assert_eq!(methods, ["nn", "glm", "blr"]);
}

#[test]
fn repeated_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let sets = small_moons(&["predict.samples=20"]);
    assert!(run_with("predict", sets.clone(), dir.path()).status.success());
    let first = std::fs::read(dir.path().join("run/predictive.csv")).unwrap();
    assert!(run_with("predict", sets, dir.path()).status.success());
    assert_eq!(first, std::fs::read(dir.path().join("run/predictive.csv")).unwrap());
}

#[test]
fn ngvi_writes_trace() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_with("ngvi", small_moons(&["posterior=oggn", "ngvi.max_iters=3"]), dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = csv_rows(&dir.path().join("run/ngvi_trace.csv"));
    assert_eq!(rows.len(), 3);
}

#[test]
fn explain_writes_json() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_with("explain", small_moons(&["explain.test_indices=[0,1]", "explain.top=3"]), dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let e: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("run/explanations.json")).unwrap()).unwrap();
    assert_eq!(e.as_array().unwrap().len(), 2);
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_with("train", small_moons(&["prior.delta=-1"]), dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("prior.delta"));
    let out = run_with("train", small_moons(&["train.bogus=1"]), dir.path());
    assert_eq!(out.status.code(), Some(2));
    let out = run_with("train", small_moons(&["likelihood=gamma"]), dir.path());
    assert_eq!(out.status.code(), Some(2));
    let out = ggn(&["train", "--config", "missing.json"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_1_with_stage() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.txt"), "0.1 0.2\nnot numbers\n").unwrap();
    let out = ggn(
        &[
            "train",
            "--out",
            "run",
            "--set",
            "dataset={\"kind\":\"xy\",\"train\":\"bad.txt\"}",
            "--set",
            "likelihood=gaussian:sigma2=0.1",
            "--set",
            "prior.delta=1",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("data"));
}

#[test]
fn data_snelson_writes_regression_file() {
    let dir = tempfile::tempdir().unwrap();
    let out = ggn(&["data", "snelson", "--out", "d/s.txt"], dir.path());
    assert!(out.status.success());
    let text = std::fs::read_to_string(dir.path().join("d/s.txt")).unwrap();
    assert_eq!(text.lines().count(), 200);
}

#[test]
fn data_mnist_rejects_wrong_checksum() {
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("src");
    std::fs::create_dir_all(&src).unwrap();
    for name in ["train-images-idx3-ubyte", "train-labels-idx1-ubyte", "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"] {
        std::fs::write(src.join(name), b"not mnist").unwrap();
    }
    let out = ggn(&["data", "mnist", "--dir", "m", "--from", "src"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("sha256"));
}
