use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn sdze(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sdze")).args(args).output().expect("run sdze")
}

fn smoke_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.json")
}

fn text(bytes: &[u8]) -> String {
    String::from_utf8_lossy(bytes).into_owned()
}

#[test]
fn train_writes_outputs_and_resumes_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let (full, resumed) = (dir.path().join("full"), dir.path().join("resumed"));
    let cfg = smoke_config();
    let cfg = cfg.to_str().unwrap();

    let out = sdze(&["train", "--config", cfg, "--out", full.to_str().unwrap()]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    let csv = fs::read_to_string(full.join("metrics.csv")).unwrap();
    let mut lines = csv.lines();
    let header = lines.next().unwrap();
    assert!(header.starts_with("# sdze-version=") && header.contains("seed=7") && header.contains("config-hash="));
    assert_eq!(lines.next().unwrap(), "step,alpha,delta_hat,loss_plus,loss_minus,rel_l2,wall_ms,peak_tmp_elems");
    assert_eq!(lines.count(), 40);
    for f in ["config.json", "summary.json", "final.ckpt", "checkpoints/step_00000020.ckpt"] {
        assert!(full.join(f).exists(), "missing {f}");
    }

    let ck = full.join("checkpoints/step_00000020.ckpt");
    let out = sdze(&["train", "--config", cfg, "--out", resumed.to_str().unwrap(), "--resume", ck.to_str().unwrap()]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    assert_eq!(fs::read(full.join("final.ckpt")).unwrap(), fs::read(resumed.join("final.ckpt")).unwrap());
    let tail: Vec<&str> = csv.lines().skip(22).collect();
    let resumed_csv = fs::read_to_string(resumed.join("metrics.csv")).unwrap();
    assert_eq!(resumed_csv.lines().skip(2).collect::<Vec<_>>(), tail);
}

#[test]
fn seed_override_changes_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("seeded");
    let o = sdze(&["train", "--config", smoke_config().to_str().unwrap(), "--seed", "11", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", text(&o.stderr));
    assert!(fs::read_to_string(out.join("metrics.csv")).unwrap().starts_with("# sdze-version=0.1.0, seed=11,"));
}

#[test]
fn verify_reports_and_writes_files() {
    let dir = tempfile::tempdir().unwrap();
    let out = sdze(&["verify", "--suite", "unbiasedness", "--out", dir.path().to_str().unwrap()]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    let stdout = text(&out.stdout);
    assert!(stdout.lines().count() >= 7 && stdout.lines().all(|l| l.starts_with("PASS")), "{stdout}");
    assert!(dir.path().join("unbiasedness.csv").exists());
    assert!(dir.path().join("unbiasedness.json").exists());
}

#[test]
fn invalid_config_names_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    fs::write(&path, r#"{"steps": 5, "pde": {"dimm": 3}, "net": {"widths": [4]}}"#).unwrap();
    let out = sdze(&["train", "--config", path.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let err = text(&out.stderr);
    for key in ["pde.dimm", "pde.dim", "sdze"] {
        assert!(err.contains(key), "no `{key}` in: {err}");
    }
}

#[test]
fn bad_arguments_fail_cleanly() {
    let cfg = smoke_config();
    let cfg = cfg.to_str().unwrap();
    let out = sdze(&["sweep-batch", "--config", cfg, "--pairs", "16x4,8x9"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(text(&out.stderr).contains("8x9"));

    let out = sdze(&["verify", "--suite", "bogus"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(text(&out.stderr).contains("unknown suite"));

    let out = sdze(&["sweep-batch", "--config", cfg, "--pairs", "16by4"]);
    assert!(!out.status.success());
}

#[test]
fn thread_cap_must_be_positive() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_sdze"))
        .args(["sweep-rank-freq", "--config", smoke_config().to_str().unwrap(), "--ranks", "2", "--freqs", "5"])
        .args(["--out", dir.path().to_str().unwrap()])
        .env("SDZE_THREADS", "0")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(text(&out.stderr).contains("SDZE_THREADS"));
}
