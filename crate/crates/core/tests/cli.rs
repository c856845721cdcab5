use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cdrl::cli::exit;

fn cdrl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cdrl"))
        .args(args)
        .env("CDRL_LOG", "error")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY: &str = "T = 3\nK = 4\ndataset = checkerboard\nhidden = 8,8\nbatch_size = 32\ndata_size = 256\n\
                    total_iters = 12\nwarmup_iters = 4\ninit_head_start = 1\nema_decay = 0.9\n";

fn train_tiny(dir: &Path, extra: &str) -> PathBuf {
    let cfg = dir.join("run.cfg");
    fs::write(&cfg, format!("{TINY}{extra}")).unwrap();
    let ckpt = dir.join("model.cdrl");
    let out = cdrl(&["train", "--config", s(&cfg), "--out", s(&ckpt), "--seed", "5"]);
    assert_eq!(code(&out), exit::OK, "{}", String::from_utf8_lossy(&out.stderr));
    ckpt
}

#[test]
fn usage_errors_have_distinct_codes() {
    assert_eq!(code(&cdrl(&["train"])), exit::MISSING_ARGUMENT);
    assert_eq!(code(&cdrl(&["sample", "--bogus"])), exit::UNKNOWN_FLAG);
    assert_eq!(code(&cdrl(&["frobnicate"])), exit::UNKNOWN_FLAG);
    assert_eq!(
        code(&cdrl(&["sample", "--ckpt", "m", "--n", "ten", "--out", "x.csv"])),
        exit::INVALID_VALUE
    );
    assert_eq!(code(&cdrl(&["--help"])), exit::OK);
}

#[test]
fn schedule_writes_csv_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sched.csv");
    assert_eq!(code(&cdrl(&["schedule", "--T", "6", "--out", s(&out)])), exit::OK);
    let csv = fs::read_to_string(&out).unwrap();
    assert_eq!(csv.lines().count(), 8);
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("sched.csv.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["resolved"]["num_levels"], 6);
    assert_eq!(manifest["resolved"]["lambda_max"], 9.8);
    assert!(manifest["version"].is_string());
}

#[test]
fn schedule_rejects_bad_endpoints() {
    let out = cdrl(&["schedule", "--lambda-max", "-6", "--lambda-min", "-5.1"]);
    assert_eq!(code(&out), exit::INVALID_VALUE);
}

#[test]
fn train_then_sample_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = train_tiny(dir.path(), "");
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("model.cdrl.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 5);
    assert_eq!(manifest["resolved"]["total_iters"], 12);

    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    for out in [&a, &b] {
        let r = cdrl(&["sample", "--ckpt", s(&ckpt), "--n", "50", "--seed", "7", "--out", s(out)]);
        assert_eq!(code(&r), exit::OK, "{}", String::from_utf8_lossy(&r.stderr));
    }
    let text = fs::read_to_string(&a).unwrap();
    assert_eq!(text, fs::read_to_string(&b).unwrap());
    assert_eq!(text.lines().next(), Some("x0,x1"));
    assert_eq!(text.lines().count(), 51);

    let m: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("a.csv.manifest.json")).unwrap()).unwrap();
    assert_eq!(m["resolved"]["sampler"]["steps"], 15);
    assert_eq!(m["resolved"]["sampler"]["guidance"]["weight"], 0.0);
    assert_eq!(m["seed"], 7);

    // Retraining from the same config and seed reproduces the checkpoint.
    let again = dir.path().join("again.cdrl");
    let r = cdrl(&["train", "--config", s(&dir.path().join("run.cfg")), "--out", s(&again), "--seed", "5"]);
    assert_eq!(code(&r), exit::OK);
    assert_eq!(fs::read(&ckpt).unwrap(), fs::read(&again).unwrap());
}

#[test]
fn sample_with_zero_steps_and_trace() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = train_tiny(dir.path(), "");
    let trace = dir.path().join("trace");
    let out = dir.path().join("s.csv");
    let r = cdrl(&[
        "sample", "--ckpt", s(&ckpt), "--n", "20", "--steps", "0", "--trace", s(&trace), "--out", s(&out),
    ]);
    assert_eq!(code(&r), exit::OK, "{}", String::from_utf8_lossy(&r.stderr));
    for level in 0..=3 {
        assert!(trace.join(format!("level_{level}.csv")).exists());
    }
}

#[test]
fn io_and_dimension_errors() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.cdrl");
    let out = dir.path().join("x.csv");
    assert_eq!(code(&cdrl(&["sample", "--ckpt", s(&missing), "--n", "3", "--out", s(&out)])), exit::IO);

    let garbage = dir.path().join("garbage.cdrl");
    fs::write(&garbage, b"not a checkpoint at all").unwrap();
    assert_eq!(code(&cdrl(&["sample", "--ckpt", s(&garbage), "--n", "3", "--out", s(&out)])), exit::IO);

    let ckpt = train_tiny(dir.path(), "dataset = gaussian\ndata_dim = 1\n");
    assert_eq!(code(&cdrl(&["density", "--ckpt", s(&ckpt), "--out", s(&out)])), exit::DIMENSION);
}

#[test]
fn config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    let out = dir.path().join("m.cdrl");
    fs::write(&cfg, "T = 3\nno_such_key = 1\n").unwrap();
    assert_eq!(code(&cdrl(&["train", "--config", s(&cfg), "--out", s(&out)])), exit::CONFIG);
    fs::write(&cfg, "T = three\n").unwrap();
    assert_eq!(code(&cdrl(&["train", "--config", s(&cfg), "--out", s(&out)])), exit::CONFIG);
    fs::write(&cfg, TINY).unwrap();
    let r = cdrl(&["train", "--config", s(&cfg), "--out", s(&out), "--set", "p_uncond=2"]);
    assert_eq!(code(&r), exit::CONFIG);
}

#[test]
fn divergence_aborts_with_dump() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, format!("{TINY}divergence_bound = 1e-3\n")).unwrap();
    let out = dir.path().join("m.cdrl");
    let r = cdrl(&["train", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(code(&r), exit::DIVERGED);
    assert!(!out.exists());
    assert!(dir.path().join("m.cdrl.failed").exists());
}

#[test]
fn resume_matches_uninterrupted_and_checks_config() {
    let dir = tempfile::tempdir().unwrap();
    let full = train_tiny(dir.path(), "");

    let cfg = dir.path().join("run.cfg");
    let half = dir.path().join("half.cdrl");
    let r = cdrl(&["train", "--config", s(&cfg), "--out", s(&half), "--seed", "5", "--set", "total_iters=5"]);
    assert_eq!(code(&r), exit::OK);
    let resumed = dir.path().join("resumed.cdrl");
    let r = cdrl(&["train", "--config", s(&cfg), "--out", s(&resumed), "--seed", "5", "--resume", s(&half)]);
    assert_eq!(code(&r), exit::OK, "{}", String::from_utf8_lossy(&r.stderr));
    assert_eq!(fs::read(&full).unwrap(), fs::read(&resumed).unwrap());

    let r = cdrl(&["train", "--config", s(&cfg), "--out", s(&resumed), "--seed", "6", "--resume", s(&half)]);
    assert_eq!(code(&r), exit::CONFIG);
}

#[test]
fn ood_and_inpaint_commands() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = train_tiny(dir.path(), "");
    let pos = dir.path().join("pos.csv");
    let neg = dir.path().join("neg.csv");
    fs::write(&pos, "x0,x1\n0.5,0.5\n-1.5,-1.5\n1.5,-0.5\n").unwrap();
    fs::write(&neg, "x0,x1\n3.0,3.0\n-3.5,2.5\n").unwrap();
    let r = cdrl(&["ood", "--ckpt", s(&ckpt), "--pos", s(&pos), "--neg", s(&neg)]);
    assert_eq!(code(&r), exit::OK, "{}", String::from_utf8_lossy(&r.stderr));
    let score: f64 = String::from_utf8_lossy(&r.stdout).trim().parse().unwrap();
    assert!((0.0..=1.0).contains(&score));

    let mask = dir.path().join("mask.csv");
    fs::write(&mask, "x0,x1\n0,1\n0,1\n0,1\n").unwrap();
    let out = dir.path().join("filled.csv");
    let r = cdrl(&["inpaint", "--ckpt", s(&ckpt), "--in", s(&pos), "--mask", s(&mask), "--out", s(&out)]);
    assert_eq!(code(&r), exit::OK, "{}", String::from_utf8_lossy(&r.stderr));
    let filled = fs::read_to_string(&out).unwrap();
    let first: Vec<f64> = filled.lines().skip(1).map(|l| l.split(',').next().unwrap().parse().unwrap()).collect();
    assert_eq!(first, vec![0.5, -1.5, 1.5]);

    fs::write(&mask, "x0\n1\n1\n1\n").unwrap();
    let r = cdrl(&["inpaint", "--ckpt", s(&ckpt), "--in", s(&pos), "--mask", s(&mask), "--out", s(&out)]);
    assert_eq!(code(&r), exit::DIMENSION);
}
