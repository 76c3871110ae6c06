use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dsa_core::decoder::{DecoderModel, ModelBank};
use dsa_core::detection::Detection;
use dsa_core::scenegen::NUM_CLASSES;

fn dsa(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dsa"))
        .args(args)
        .env_remove("DSA_SEED")
        .output()
        .expect("running dsa")
}

fn ok(args: &[&str]) -> Output {
    let out = dsa(args);
    assert!(
        out.status.success(),
        "dsa {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn gen(dir: &Path, seed: &str) -> PathBuf {
    let out = dir.join(format!("data{seed}"));
    ok(&["gen-data", "--out", p(&out), "--scale", "0.01", "--pairs-per-class", "4", "--seed", seed]);
    out
}

/// Sorted relative paths and contents of every file under `dir`.
fn snapshot(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push((path.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn read_dets(path: &Path) -> Vec<Detection> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn sorted_lines(path: &Path) -> Vec<String> {
    let mut v: Vec<String> = fs::read_to_string(path).unwrap().lines().map(String::from).collect();
    v.sort();
    v
}

fn tiny_models(dir: &Path) -> PathBuf {
    let out = dir.join("models");
    let bank: ModelBank = (1..=NUM_CLASSES)
        .map(|c| DecoderModel::new_random(c, 2, 10, 6, 7))
        .collect();
    bank.save_dir(&out).unwrap();
    out
}

#[test]
fn gen_data_is_deterministic_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let a = gen(dir.path(), "5");
    let b = dir.path().join("again");
    ok(&["gen-data", "--out", p(&b), "--scale", "0.01", "--pairs-per-class", "4", "--seed", "5"]);
    assert_eq!(snapshot(&a), snapshot(&b));
    let c = gen(dir.path(), "6");
    assert_ne!(snapshot(&a), snapshot(&c));
    for sub in ["pairs", "decoder", "validation", "test"] {
        assert!(a.join(sub).is_dir(), "{sub}");
    }
}

#[test]
fn seed_from_env_and_config_match_flag() {
    let dir = tempfile::tempdir().unwrap();
    let flag = gen(dir.path(), "9");

    let env_out = dir.path().join("env");
    let out = Command::new(env!("CARGO_BIN_EXE_dsa"))
        .args(["gen-data", "--out", p(&env_out), "--scale", "0.01", "--pairs-per-class", "4"])
        .env("DSA_SEED", "9")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(snapshot(&flag), snapshot(&env_out));

    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "# shared settings\nseed = 9\nscale = 0.01\npairs_per_class = 4\nepochs = 3\n").unwrap();
    let cfg_out = dir.path().join("cfg");
    ok(&["gen-data", "--config", p(&cfg), "--out", p(&cfg_out)]);
    assert_eq!(snapshot(&flag), snapshot(&cfg_out));

    // Command-line flags win over the file.
    let over = dir.path().join("over");
    ok(&["gen-data", "--config", p(&cfg), "--out", p(&over), "--seed", "10"]);
    assert_ne!(snapshot(&flag), snapshot(&over));

    fs::write(&cfg, "nonsense_key = 1\n").unwrap();
    assert_eq!(dsa(&["gen-data", "--config", p(&cfg), "--out", p(&over)]).status.code(), Some(2));
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(dsa(&["gen-data"]).status.code(), Some(2));
    assert_eq!(dsa(&["train-decoder", "--data", "x", "--out", "y", "--epochs", "0"]).status.code(), Some(2));
    assert_eq!(dsa(&["postprocess", "--input", "x", "--out", "y", "--method", "bogus"]).status.code(), Some(2));
    assert_eq!(dsa(&["experiment", "--models", "m", "--out", "o", "--scenario", "bogus"]).status.code(), Some(2));
    assert_eq!(dsa(&["--jobs", "0", "report", "--input", "r.csv"]).status.code(), Some(2));
    assert_eq!(dsa(&["--help"]).status.code(), Some(0));
}

#[test]
fn runtime_errors_exit_1_with_a_hint() {
    let dir = tempfile::tempdir().unwrap();
    let out = dsa(&["train-decoder", "--data", p(dir.path()), "--out", p(&dir.path().join("m"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("gen-data"));

    let data = gen(dir.path(), "1");
    let sim = dir.path().join("sim");
    ok(&["simulate", "--data", p(&data), "--out", p(&sim)]);
    let out = dsa(&[
        "postprocess", "--input", p(&sim), "--out", p(&dir.path().join("pp")),
        "--method", "nms+dsa", "--models", p(&dir.path().join("nowhere")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("train-decoder"));
}

#[test]
fn nms_with_unit_threshold_keeps_everything() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "2");
    let sim = dir.path().join("sim");
    ok(&["simulate", "--data", p(&data), "--split", "validation", "--out", p(&sim)]);
    let pp = dir.path().join("pp");
    ok(&["postprocess", "--input", p(&sim), "--out", p(&pp), "--method", "nms", "--nt", "1.0"]);
    let mut n = 0;
    for e in fs::read_dir(sim.join("detections")).unwrap() {
        let path = e.unwrap().path();
        let name = path.file_name().unwrap();
        assert_eq!(sorted_lines(&path), sorted_lines(&pp.join("selected").join(name)));
        n += 1;
    }
    assert!(n > 0);
}

#[test]
fn dsa_prefilters_low_objectness() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "4");
    let models = tiny_models(dir.path());
    let sim = dir.path().join("sim");
    ok(&["simulate", "--data", p(&data), "--profile", "score_shift", "--out", p(&sim)]);
    let pp = dir.path().join("pp");
    ok(&[
        "postprocess", "--input", p(&sim), "--out", p(&pp), "--method", "nms+dsa",
        "--models", p(&models), "--n-iter", "2",
    ]);
    let mut low = 0;
    for e in fs::read_dir(sim.join("detections")).unwrap() {
        let path = e.unwrap().path();
        let name = path.file_name().unwrap().to_owned();
        low += read_dets(&path).iter().filter(|d| d.score < 0.25).count();
        let kept = read_dets(&pp.join("selected").join(&name));
        assert!(kept.iter().all(|d| d.score >= 0.25));
        let log = fs::read_to_string(pp.join("decisions").join(&name)).unwrap();
        assert!(log.lines().count() >= kept.len());
    }
    assert!(low > 0, "score_shift should produce some low scores");

    let again = dir.path().join("again");
    ok(&[
        "postprocess", "--input", p(&sim), "--out", p(&again), "--method", "nms+dsa",
        "--models", p(&models), "--n-iter", "2",
    ]);
    assert_eq!(snapshot(&pp), snapshot(&again));
}

#[test]
fn experiment_writes_reports_that_report_reads() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "8");
    let models = tiny_models(dir.path());
    let out = dir.path().join("exp");
    ok(&[
        "experiment", "--data", p(&data), "--models", p(&models), "--out", p(&out),
        "--methods", "nms,diou-nms,nms+dsa", "--lambdas", "20", "--n-iter", "2",
    ]);
    for f in ["reports.csv", "scenes.jsonl", "tuning.csv"] {
        assert!(out.join(f).is_file(), "{f}");
    }
    let printed = String::from_utf8(ok(&["report", "--input", p(&out)]).stdout).unwrap();
    for m in ["nms", "diou-nms", "nms+dsa"] {
        assert!(printed.lines().any(|l| l.starts_with(m)), "{m} missing from\n{printed}");
    }
}
