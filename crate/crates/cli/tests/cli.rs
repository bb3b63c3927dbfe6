use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mmcl"))
}

fn smoke_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.toml")
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

#[test]
fn full_pipeline_from_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let cfg = smoke_config();
    let cfg = cfg.to_str().unwrap();

    let o = run(&["gen-data", "--config", cfg, "--out", out]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.path().join("data/manifest.json").exists());

    let o = run(&["pretrain", "--config", cfg, "--out", out]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("cloze"));

    let o = run(&["run", "--config", cfg, "--out", out]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert_eq!(stdout.matches("after task").count(), 5);
    let run_dir = dir.path().join("run/smoke");
    for f in ["report.csv", "summary.json", "manifest.json", "metrics.csv", "config.toml"] {
        assert!(run_dir.join(f).exists(), "{f} missing");
    }

    let plots = dir.path().join("plots");
    let o = run(&["plot", run_dir.to_str().unwrap(), "--out", plots.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["nl_delta.svg", "vl_accuracy.svg", "method_comparison.svg", "plot_data.csv"] {
        let text = std::fs::read_to_string(plots.join(f)).unwrap();
        assert!(!text.is_empty());
    }
}

#[test]
fn seed_override_changes_the_base() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke_config();
    let cfg = cfg.to_str().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let o = run(&["pretrain", "--config", cfg, "--out", a.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let o = run(&["pretrain", "--config", cfg, "--out", b.to_str().unwrap(), "--seed-override", "init=99"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let ha = std::fs::read(a.join("base/base.ckpt")).unwrap();
    let hb = std::fs::read(b.join("base/base.ckpt")).unwrap();
    assert_ne!(ha, hb);
    // Same config, same bytes.
    let o = run(&["pretrain", "--config", cfg, "--out", a.to_str().unwrap(), "--force"]);
    assert_eq!(code(&o), 0);
    assert_eq!(std::fs::read(a.join("base/base.ckpt")).unwrap(), ha);
}

#[test]
fn exit_codes_follow_error_kinds() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let cfg = smoke_config();
    let cfg = cfg.to_str().unwrap();

    // Configuration problems.
    assert_eq!(code(&run(&["run", "--config", cfg, "--out", out, "--seed-override", "nope=1"])), 1);
    assert_eq!(code(&run(&["run", "--config", cfg, "--out", out, "--seed-override", "data"])), 1);
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "unknown_key = 3\n").unwrap();
    assert_eq!(code(&run(&["gen-data", "--config", bad.to_str().unwrap(), "--out", out])), 1);

    // A floor the capped pretraining cannot reach is a numeric failure.
    let hard = dir.path().join("hard.toml");
    let text = std::fs::read_to_string(cfg).unwrap().replace("nlg_floor = 0.1", "nlg_floor = 1.0");
    std::fs::write(&hard, text).unwrap();
    let o = run(&["pretrain", "--config", hard.to_str().unwrap(), "--out", out, "--steps-cap", "5"]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("after 5 steps"));
    assert_eq!(code(&run(&["pretrain", "--config", cfg, "--out", out, "--steps-cap", "0"])), 1);

    // Missing inputs are I/O failures.
    let missing = dir.path().join("missing.toml");
    assert_eq!(code(&run(&["run", "--config", missing.to_str().unwrap()])), 3);
    let o = run(&["plot", dir.path().join("no-run").to_str().unwrap(), "--out", out]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
}
