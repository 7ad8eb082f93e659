use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use prgp::checkpoint::Checkpoint;

fn prgp(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_prgp")).current_dir(dir).args(args).output().expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) {
    let out = prgp(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn simulated(dir: &Path) {
    ok(dir, &["simulate", "--out", "sim", "--seed", "3"]);
}

#[test]
fn train_is_reproducible_and_reports_progress() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    simulated(dir);
    let args = |out| ["train", "--data", "sim/sensors.csv", "--physics", "arz", "--gamma", "1", "--iters", "50", "--seed", "7", "--out", out];
    let first = prgp(dir, &args("a"));
    assert!(first.status.success());
    let stderr = String::from_utf8_lossy(&first.stderr);
    assert!(stderr.lines().any(|l| l.starts_with("iter=0 elbo=") && l.contains(" grad_norm=")));
    ok(dir, &args("b"));
    for f in ["checkpoint.json", "dataset.csv", "dataset.json", "trace.csv", "residuals.csv"] {
        assert_eq!(fs::read(dir.join("a").join(f)).unwrap(), fs::read(dir.join("b").join(f)).unwrap(), "{f}");
    }
}

#[test]
fn resume_matches_uninterrupted_training() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    simulated(dir);
    let common = ["--data", "sim/sensors.csv", "--physics", "lwr", "--seed", "2"];
    ok(dir, &[&["train", "--iters", "40", "--out", "full"][..], &common].concat());
    ok(dir, &[&["train", "--iters", "20", "--out", "half"][..], &common].concat());
    ok(dir, &["train", "--resume", "half/checkpoint.json", "--iters", "40", "--out", "resumed"]);
    let full = Checkpoint::load(&dir.join("full/checkpoint.json")).unwrap();
    let resumed = Checkpoint::load(&dir.join("resumed/checkpoint.json")).unwrap();
    assert_eq!(resumed.state.iteration, 40);
    let (a, b) = (full.final_elbo().unwrap(), resumed.final_elbo().unwrap());
    assert!((a - b).abs() <= 1e-9 * (1.0 + a.abs()), "{a} vs {b}");
}

#[test]
fn zero_weight_estimates_match_the_pure_gp() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    simulated(dir);
    for (name, physics, gamma) in [("pure", "none", "1"), ("zero", "lwr", "0")] {
        ok(dir, &["train", "--data", "sim/sensors.csv", "--physics", physics, "--gamma", gamma, "--iters", "30", "--out", name]);
        let ckpt = format!("{name}/checkpoint.json");
        ok(dir, &["estimate", "--checkpoint", &ckpt, "--out", &format!("{name}_est")]);
        ok(dir, &["eval", "--checkpoint", &ckpt, "--out", &format!("{name}_eval")]);
    }
    let read = |p: &str| fs::read_to_string(dir.join(p)).unwrap();
    assert_eq!(read("pure_est/estimate.csv"), read("zero_est/estimate.csv"));
    assert_eq!(read("pure_eval/scatter_flow.csv"), read("zero_eval/scatter_flow.csv"));
    let metrics = |p: &str| read(p).lines().nth(1).unwrap().split(',').skip(2).map(str::to_string).collect::<Vec<_>>();
    assert_eq!(metrics("pure_eval/report.csv"), metrics("zero_eval/report.csv"));
}

#[test]
fn failures_map_to_exit_codes_without_partial_output() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let out = prgp(dir, &["train", "--bogus-flag", "--out", "x"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));

    fs::write(dir.join("bad.csv"), "station_id,timestamp_utc,milepost,flow_veh_per_5min,speed_mph\nA,0,1.0,10,50\nA,300,oops,10,50\n").unwrap();
    let out = prgp(dir, &["train", "--data", "bad.csv", "--out", "x"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad.csv:3"));

    let out = prgp(dir, &["train", "--data", "missing.csv", "--out", "x"]);
    assert_eq!(out.status.code(), Some(1));

    fs::write(dir.join("cfg.toml"), "[train]\nlearning_rate = -1.0\n").unwrap();
    simulated(dir);
    let out = prgp(dir, &["--config", "cfg.toml", "train", "--data", "sim/sensors.csv", "--out", "x"]);
    assert_eq!(out.status.code(), Some(1));

    let names: Vec<String> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().file_name().to_string_lossy().into_owned()).collect();
    assert!(!names.iter().any(|n| n == "x" || n.ends_with(".partial")), "{names:?}");
}

#[test]
fn refuses_to_replace_foreign_directories() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    fs::create_dir(dir.join("mine")).unwrap();
    fs::write(dir.join("mine/notes.txt"), "keep").unwrap();
    let out = prgp(dir, &["simulate", "--out", "mine"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(fs::read_to_string(dir.join("mine/notes.txt")).unwrap(), "keep");
    // A previous output directory is replaced.
    ok(dir, &["simulate", "--out", "sim"]);
    ok(dir, &["simulate", "--out", "sim", "--seed", "1"]);
}

#[test]
fn config_file_values_apply_and_flags_override_them() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    simulated(dir);
    fs::write(dir.join("cfg.toml"), "seed = 4\n[train]\niterations = 12\n[physics]\nmodel = \"heat\"\n").unwrap();
    ok(dir, &["--config", "cfg.toml", "train", "--data", "sim/sensors.csv", "--iters", "8", "--out", "t"]);
    let ckpt = Checkpoint::load(&dir.join("t/checkpoint.json")).unwrap();
    assert_eq!(ckpt.state.iteration, 8);
    assert_eq!(ckpt.config.seed, 4);
    assert_eq!(ckpt.params.physics.model.name(), "heat");
    let echoed = fs::read_to_string(dir.join("t/config.toml")).unwrap();
    assert!(echoed.contains("iterations = 8"));
}
