use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use volprecip_core::tensorfile::{write_tensor, TensorFile};
use volprecip_core::Tensor;

fn volprecip(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_volprecip"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn manifest(dir: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join("run_manifest.json")).unwrap()).unwrap()
}

fn generate(dir: &Path, out: &str, count: &str) {
    let o = volprecip(
        dir,
        &["--seed", "5", "generate", "--out", out, "--count", count, "--height", "16", "--width", "16"],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

fn train(dir: &Path, data: &str, out: &str, steps: &str) -> Output {
    volprecip(
        dir,
        &[
            "--seed",
            "5",
            "--deterministic",
            "train",
            "--data",
            data,
            "--out",
            out,
            "--steps",
            steps,
            "--batch-size",
            "2",
        ],
    )
}

#[test]
fn loss_check_passes_with_json_report() {
    let dir = tempfile::tempdir().unwrap();
    let o = volprecip(dir.path(), &["loss-check"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let rep: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(rep["all_passed"], Value::Bool(true));
    assert!(rep["checks"].as_array().unwrap().iter().all(|c| c["passed"] == Value::Bool(true)));
    let m = manifest(dir.path());
    assert_eq!(m["command"], "loss-check");
    assert_eq!(m["exit_code"], 0);
}

#[test]
fn unknown_flag_or_subcommand_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = volprecip(dir.path(), &["train", "--bogus"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("Usage"), "{}", stderr(&o));
    let o = volprecip(dir.path(), &["frobnicate"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("Usage"));
    assert_eq!(manifest(dir.path())["exit_code"], 1);
}

#[test]
fn help_exits_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let o = volprecip(dir.path(), &["--help"]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8_lossy(&o.stdout);
    for cmd in ["generate", "pwv", "collocate", "loss-check", "train", "ablate", "infer", "evaluate", "report"] {
        assert!(text.contains(cmd), "{cmd} missing from help");
    }
}

#[test]
fn missing_input_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = volprecip(dir.path(), &["train", "--data", "nowhere", "--out", "ck"]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn diverging_training_is_a_numerical_abort() {
    let dir = tempfile::tempdir().unwrap();
    generate(dir.path(), "data", "2");
    let o = volprecip(
        dir.path(),
        &["train", "--data", "data", "--out", "ck", "--steps", "3", "--batch-size", "2", "--learning-rate", "1e300"],
    );
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains("non-finite"), "{}", stderr(&o));
}

#[test]
fn mismatched_checkpoint_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    generate(dir.path(), "data", "2");
    let o = train(dir.path(), "data", "ck", "0");
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let path = dir.path().join("ck/manifest.json");
    let mut m: Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    m["config"]["stage_channels"][0] = Value::from(24);
    fs::write(&path, serde_json::to_string(&m).unwrap()).unwrap();
    let o = volprecip(dir.path(), &["infer", "--checkpoint", "ck", "--data", "data", "--out", "pred"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("config mismatch"), "{}", stderr(&o));
}

#[test]
fn config_file_supplies_defaults_and_flags_win() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = r#"{"seed": 9, "generate": {"out": "data", "count": 3, "height": 16, "width": 16}}"#;
    fs::write(dir.path().join("cfg.json"), cfg).unwrap();
    let o = volprecip(dir.path(), &["--config", "cfg.json", "generate", "--count", "2"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let records: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("data/records.json")).unwrap()).unwrap();
    assert_eq!(records["records"].as_array().unwrap().len(), 2);
    assert_eq!(records["source"]["synthetic"]["seed"], 9);
    assert_eq!(manifest(dir.path())["seed"], 9);

    fs::write(dir.path().join("bad.json"), "[1, 2]").unwrap();
    let o = volprecip(dir.path(), &["--config", "bad.json", "loss-check"]);
    assert_eq!(code(&o), 1);
}

fn snapshot(files: &[PathBuf]) -> Vec<(PathBuf, Vec<u8>)> {
    files.iter().map(|f| (f.clone(), fs::read(f).unwrap())).collect()
}

fn outputs(dir: &Path) -> Vec<PathBuf> {
    manifest(dir)["outputs"]
        .as_array()
        .unwrap()
        .iter()
        .map(|p| dir.join(p.as_str().unwrap()))
        .collect()
}

fn replay(dir: &Path) -> Output {
    let argv: Vec<String> = manifest(dir)["effective_argv"]
        .as_array()
        .unwrap()
        .iter()
        .map(|a| a.as_str().unwrap().to_string())
        .collect();
    let args: Vec<&str> = argv[1..].iter().map(String::as_str).collect();
    volprecip(dir, &args)
}

#[test]
fn deterministic_replay_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    generate(d, "data", "3");
    let first_gen = snapshot(&outputs(d));
    assert_eq!(code(&replay(d)), 0);
    assert_eq!(snapshot(&outputs(d)), first_gen);

    assert_eq!(code(&train(d, "data", "ck", "2")), 0);
    let first_train = snapshot(&outputs(d));
    assert!(first_train.len() > 3);
    assert_eq!(code(&replay(d)), 0);
    assert_eq!(snapshot(&outputs(d)), first_train);

    let o = volprecip(d, &["--deterministic", "infer", "--checkpoint", "ck", "--data", "data", "--out", "pred"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let first_infer = snapshot(&outputs(d));
    assert_eq!(code(&replay(d)), 0);
    assert_eq!(snapshot(&outputs(d)), first_infer);
}

#[test]
fn full_pipeline_runs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    generate(d, "data", "10");
    assert_eq!(code(&train(d, "data", "ck", "1")), 0);
    let history = fs::read_to_string(d.join("ck/history.csv")).unwrap();
    assert!(history.starts_with("step,sens,geo,scale,struct,prob,pwv,total\n"));
    assert_eq!(history.lines().count(), 2);

    let o = volprecip(d, &["infer", "--checkpoint", "ck", "--data", "data", "--out", "pred"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = volprecip(d, &["evaluate", "--pred", "pred", "--data", "data", "--out", "scores"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let scores = fs::read_to_string(d.join("scores.csv")).unwrap();
    assert!(scores.starts_with("sample,lat,lon,time,CC,bias,RMSE,MAE,POD,FAR,CSI,sfc_CC,"));
    assert_eq!(scores.lines().count(), 1 + 10 + 1);
    let regimes = fs::read_to_string(d.join("scores_regimes.csv")).unwrap();
    assert_eq!(regimes.lines().count(), 5);

    let o = volprecip(d, &["report", "--scores", "scores.json", "--by", "latitude", "--band", "10", "--out", "bands"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let bands = fs::read_to_string(d.join("bands.csv")).unwrap();
    assert!(bands.starts_with("band,lower,upper,count,mean\n"));
    assert_eq!(bands.lines().count(), 1 + 18 + 1);

    let o = volprecip(
        d,
        &["ablate", "--data", "data", "--out", "ablation", "--lambdas", "0,5", "--batch-size", "4"],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let ablation = fs::read_to_string(d.join("ablation.csv")).unwrap();
    assert!(ablation.starts_with("lambda_pwv,CC,bias,RMSE,MAE,POD,FAR,CSI,score\n"));
    assert_eq!(ablation.lines().count(), 3);
}

fn put_tensor(path: &Path, dims: &[usize], data: Vec<f64>, meta: &[(&str, &str)]) {
    let mut f = TensorFile::new(Tensor::new(dims.to_vec(), data).unwrap());
    for (k, v) in meta {
        f = f.with_meta(*k, v);
    }
    write_tensor(path, &f).unwrap();
}

#[test]
fn pwv_and_collocate_commands() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let (h, w) = (16usize, 16usize);
    let n = h * w;
    put_tensor(&d.join("q.vptn"), &[19, h, w], vec![0.005; 19 * n], &[]);
    let o = volprecip(d, &["pwv", "--humidity", "q.vptn", "--out", "pwv.vptn"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    let mut scene = Vec::with_capacity(15 * n);
    for _ in 0..9 {
        scene.extend(std::iter::repeat_n(250.0, n));
    }
    scene.extend((0..n).map(|p| 10.0 - 0.04 * (p / w) as f64));
    scene.extend((0..n).map(|p| 100.0 + 0.04 * (p % w) as f64));
    for fill in [0.0, 3.0, 10.0, 12.0] {
        scene.extend(std::iter::repeat_n(fill, n));
    }
    put_tensor(&d.join("scene.vptn"), &[15, h, w], scene.clone(), &[("time", "1000")]);
    let point = r#"{"lat": 10.0, "lon": 100.0, "time": 1100.0, "profile": {"heights_m": [0.0, 18000.0], "rates": [4.0, 0.0]}}"#;
    fs::write(d.join("points.jsonl"), format!("{point}\n")).unwrap();
    let o = volprecip(
        d,
        &["collocate", "--scene", "scene.vptn", "--pwv", "pwv.vptn", "--points", "points.jsonl", "--out", "matched"],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let records: Value = serde_json::from_str(&fs::read_to_string(d.join("matched/records.json")).unwrap()).unwrap();
    assert_eq!(records["records"][0]["n_matched_points"], 1);

    put_tensor(&d.join("untimed.vptn"), &[15, h, w], scene, &[]);
    let o = volprecip(
        d,
        &["collocate", "--scene", "untimed.vptn", "--pwv", "pwv.vptn", "--points", "points.jsonl", "--out", "m2"],
    );
    assert_eq!(code(&o), 1);
}

#[test]
fn revisit_report() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let lines = [
        r#"{"time": 0.0, "coverage": [true, true, false]}"#,
        r#"{"time": 86400.0, "coverage": [true, false, false]}"#,
        r#"{"time": 1728000.0, "coverage": [true, true, true]}"#,
    ];
    fs::write(d.join("passes.jsonl"), lines.join("\n")).unwrap();
    let o = volprecip(d, &["report", "--overpasses", "passes.jsonl", "--out", "gaps", "--gap-threshold-s", "1700000"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let summary = fs::read_to_string(d.join("gaps_summary.csv")).unwrap();
    let mut lines = summary.lines();
    assert_eq!(lines.next(), Some("cells,flagged,mean_gap_s,max_gap_s,fraction_over_threshold"));
    let row: Vec<f64> = lines.next().unwrap().split(',').map(|v| v.parse().unwrap()).collect();
    assert_eq!(row, vec![3.0, 1.0, 1296000.0, 1728000.0, 0.5]);
    let o = volprecip(d, &["report", "--out", "x"]);
    assert_eq!(code(&o), 1);
}
