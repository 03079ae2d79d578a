use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use otfuse_core::{evaluate_mae, load_dataset, load_model, predict, DatasetFormat};
use tempfile::TempDir;

fn otfuse(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_otfuse"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = otfuse(dir, args);
    assert!(
        out.status.success(),
        "otfuse {} failed: {}",
        args.join(" "),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// Temp dir holding gen-fixtures output under `fx/`.
fn fixtures(extra: &[&str]) -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["gen-fixtures", "--out", "fx", "--count", "60", "--seed", "3"];
    args.extend(extra);
    ok(dir.path(), &args);
    dir
}

const PAIR: [&str; 6] = ["--a", "fx/model_a.json", "--b", "fx/model_b.json", "--data", "fx/dataset.jsonl"];

fn with_pair<'a>(cmd: &'a str, rest: &[&'a str]) -> Vec<&'a str> {
    let mut v = vec![cmd];
    v.extend(PAIR);
    v.extend(rest);
    v
}

fn rows(path: &Path) -> Vec<csv::StringRecord> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.records().map(|x| x.unwrap()).collect()
}

fn column(path: &Path, name: &str) -> usize {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.headers().unwrap().iter().position(|h| h == name).unwrap()
}

fn mae_line(stdout: &str) -> f64 {
    stdout
        .lines()
        .find_map(|l| l.strip_prefix("mae "))
        .expect("mae line")
        .parse()
        .unwrap()
}

#[test]
fn missing_anchor_is_a_usage_error() {
    let dir = fixtures(&[]);
    let out = otfuse(dir.path(), &["fuse", "--a", "fx/model_a.json", "--data", "fx/dataset.jsonl", "--out", "f.json"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--b"));
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(otfuse(dir.path(), &["grid", "--bogus"]).status.code(), Some(2));
}

#[test]
fn fusing_a_model_with_itself_keeps_its_error() {
    let dir = fixtures(&[]);
    let args = [
        "fuse", "--a", "fx/model_a.json", "--b", "fx/model_a.json", "--data", "fx/dataset.jsonl", "--out", "self.json",
        "--samples", "16",
    ];
    let fused_mae = mae_line(&ok(dir.path(), &args));
    let data = load_dataset(dir.path().join("fx/dataset.jsonl"), DatasetFormat::JsonLines).unwrap();
    let own = evaluate_mae(&load_model(dir.path().join("fx/model_a.json")).unwrap(), &data).unwrap();
    assert!((fused_mae - own).abs() <= 1e-9);
    assert!(dir.path().join("self.json.trace.json").exists());
}

#[test]
fn fuse_writes_trace_and_cost_dumps() {
    let dir = fixtures(&[]);
    ok(
        dir.path(),
        &with_pair("fuse", &["--out", "f.json", "--trace", "t.json", "--dump-costs", "costs", "--samples", "8"]),
    );
    let trace: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("t.json")).unwrap()).unwrap();
    let layers = trace["layers"].as_array().unwrap();
    assert!(!layers.is_empty());
    let dumps = fs::read_dir(dir.path().join("costs")).unwrap().count();
    assert!(dumps > 0 && dumps <= layers.len());
}

#[test]
fn grid_recovers_the_twin_with_exact_solvers() {
    let dir = fixtures(&[]);
    ok(dir.path(), &with_pair("grid", &["--out", "grid.csv", "--repeats", "1", "--samples", "16"]));
    let path = dir.path().join("grid.csv");
    let table = rows(&path);
    assert_eq!(table.len(), 6);
    let (solver, status, mean, std) = (
        column(&path, "solver"),
        column(&path, "status"),
        column(&path, "mean_mae"),
        column(&path, "std_mae"),
    );
    for r in &table {
        assert_eq!(&r[status], "ok");
        assert_eq!(r[std].parse::<f64>().unwrap(), 0.0);
        if &r[solver] == "emd" {
            // the teacher labels the dataset, so the individual model scores 0
            assert!(r[mean].parse::<f64>().unwrap() <= 1e-4, "{r:?}");
        }
    }
}

#[test]
fn grid_rejects_a_fixed_solver() {
    let dir = fixtures(&[]);
    let out = otfuse(dir.path(), &with_pair("grid", &["--solver", "emd"]));
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn sweep_has_one_row_per_size() {
    let dir = fixtures(&[]);
    ok(dir.path(), &with_pair("sweep-samples", &["--out", "one.csv", "--sizes", "8", "--repeats", "1"]));
    assert_eq!(rows(&dir.path().join("one.csv")).len(), 1);
    ok(dir.path(), &with_pair("sweep-samples", &["--out", "three.csv", "--sizes", "1,8,32", "--repeats", "1"]));
    let path = dir.path().join("three.csv");
    let size = column(&path, "sample_size");
    let sizes: Vec<String> = rows(&path).iter().map(|r| r[size].to_owned()).collect();
    assert_eq!(sizes, ["1", "8", "32"]);
}

#[test]
fn sweep_rejects_empty_samples() {
    let dir = fixtures(&[]);
    let out = otfuse(dir.path(), &with_pair("sweep-samples", &["--sizes", "0"]));
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn bn_compare_recovers_in_both_modes() {
    let dir = fixtures(&[]);
    ok(dir.path(), &with_pair("bn-compare", &["--out", "bn.csv", "--repeats", "1", "--samples", "16"]));
    let path = dir.path().join("bn.csv");
    let (capture, mean) = (column(&path, "capture"), column(&path, "mean_mae"));
    let table = rows(&path);
    let modes: Vec<&str> = table.iter().map(|r| &r[capture]).collect();
    assert_eq!(modes, ["post-bn", "pre-bn"]);
    for r in &table {
        assert!(r[mean].parse::<f64>().unwrap() <= 1e-4);
    }
}

#[test]
fn bn_compare_needs_batch_norm() {
    let dir = fixtures(&["--arch", "mlp"]);
    let out = otfuse(dir.path(), &with_pair("bn-compare", &["--repeats", "1"]));
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).to_lowercase().contains("batch"));
}

#[test]
fn fixtures_are_reproducible() {
    let (x, y) = (fixtures(&[]), fixtures(&[]));
    for name in ["model_a.json", "model_b.json", "permutation.json", "dataset.jsonl"] {
        let rel = PathBuf::from("fx").join(name);
        assert_eq!(fs::read(x.path().join(&rel)).unwrap(), fs::read(y.path().join(&rel)).unwrap(), "{name}");
    }
}

#[test]
fn mlp_fixtures_fuse() {
    let dir = fixtures(&["--arch", "mlp"]);
    let mae = mae_line(&ok(dir.path(), &with_pair("fuse", &["--out", "f.json", "--samples", "8"])));
    assert!(mae <= 1e-9);
}

#[test]
fn eval_and_ensemble_agree_with_recomputation() {
    let dir = fixtures(&["--noise", "0.05"]);
    let root = dir.path();
    ok(root, &["eval", "--model", "fx/model_a.json", "--data", "fx/dataset.jsonl", "--out", "eval.csv"]);
    ok(root, &["ensemble", "--models", "fx/model_b.json", "--data", "fx/dataset.jsonl", "--out", "eval.csv"]);
    ok(root, &["eval", "--model", "fx/model_b.json", "--data", "fx/dataset.jsonl", "--out", "eval.csv"]);
    ok(
        root,
        &["ensemble", "--models", "fx/model_a.json,fx/model_b.json", "--data", "fx/dataset.jsonl", "--out", "eval.csv"],
    );
    let path = root.join("eval.csv");
    let mae = column(&path, "mae");
    let values: Vec<f64> = rows(&path).iter().map(|r| r[mae].parse().unwrap()).collect();
    assert_eq!(values.len(), 4);
    assert_eq!(values[0], 0.0, "the teacher labels the dataset");
    assert_eq!(values[1], values[2], "an ensemble of one is the model itself");

    let data = load_dataset(root.join("fx/dataset.jsonl"), DatasetFormat::JsonLines).unwrap();
    let pa = predict(&load_model(root.join("fx/model_a.json")).unwrap(), data.graphs()).unwrap();
    let pb = predict(&load_model(root.join("fx/model_b.json")).unwrap(), data.graphs()).unwrap();
    let expected = data
        .graphs()
        .iter()
        .zip(pa.iter().zip(&pb))
        .map(|(g, (a, b))| ((a + b) / 2.0 - g.target().unwrap()).abs())
        .sum::<f64>()
        / data.len() as f64;
    assert!((values[3] - expected).abs() <= 1e-12);
    assert!(values[2] > 0.0);
}

#[test]
fn vanilla_writes_a_model() {
    let dir = fixtures(&[]);
    let stdout = ok(dir.path(), &with_pair("vanilla", &["--out", "v.json"]));
    assert!(mae_line(&stdout) > 0.0);
    load_model(dir.path().join("v.json")).unwrap();
    let out = otfuse(dir.path(), &with_pair("vanilla", &["--out", "v.json", "--interpolation", "2"]));
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn config_file_fills_in_and_flags_win() {
    let dir = fixtures(&[]);
    fs::write(
        dir.path().join("run.toml"),
        "a = \"fx/model_a.json\"\nb = \"fx/model_b.json\"\ndata = \"fx/dataset.jsonl\"\nrepeats = 3\nseed = 9\n\n[fusion]\nsamples = 12\n",
    )
    .unwrap();
    ok(dir.path(), &["bn-compare", "--config", "run.toml", "--repeats", "1", "--out", "bn.csv"]);
    let path = dir.path().join("bn.csv");
    let (repeats, seed, size) = (column(&path, "repeats"), column(&path, "seed"), column(&path, "sample_size"));
    for r in rows(&path) {
        assert_eq!((&r[repeats], &r[seed], &r[size]), ("1", "9", "12"));
    }
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.toml"), "sead = 1\n").unwrap();
    let out = otfuse(dir.path(), &["grid", "--config", "bad.toml"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("sead"));
}

#[test]
fn json_results_parse() {
    let dir = fixtures(&[]);
    let stdout = ok(dir.path(), &with_pair("sweep-samples", &["--sizes", "4", "--repeats", "2", "--format", "json"]));
    let rows: serde_json::Value = serde_json::from_str(&stdout).unwrap();
    let row = &rows.as_array().unwrap()[0];
    assert_eq!(row["maes"].as_array().unwrap().len(), 2);
    assert_eq!(row["status"], "ok");
}
