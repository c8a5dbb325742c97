mod common;

use std::path::Path;
use std::process::{Command, Output};

fn nextpoint(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nextpoint")).args(args).current_dir(cwd).env_remove("NEXTPOINT_OUTPUT_ROOT").env_remove("NEXTPOINT_CONFIG").output().unwrap()
}

fn write_config(dir: &Path) -> String {
    let p = dir.join("tiny.toml");
    std::fs::write(&p, common::TINY).unwrap();
    p.display().to_string()
}

#[test]
fn exit_codes_distinguish_failures() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    assert_eq!(nextpoint(&["frobnicate"], dir.path()).status.code(), Some(2));
    let bad = nextpoint(&["generate", "--config", &cfg, "--set", "rft.beta=2.0"], dir.path());
    assert_eq!(bad.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("beta"));
    assert!(!dir.path().join("run").exists(), "validation must precede side effects");
    let missing = nextpoint(&["eval", "--config", &cfg, "--checkpoint", "nope.ckpt", "--data", "nowhere"], dir.path());
    assert_eq!(missing.status.code(), Some(4));
}

#[test]
fn output_root_and_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let root = dir.path().join("root");
    let out = Command::new(env!("CARGO_BIN_EXE_nextpoint"))
        .args(["generate", "--config", &cfg, "--set", "data.train=5", "--set", "output_dir=\"exp\"", "--threads", "2"])
        .current_dir(dir.path())
        .env("NEXTPOINT_OUTPUT_ROOT", &root)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let m = nextpoint::dataset::read_manifest(&root.join("exp/data")).unwrap();
    assert_eq!(m.split(nextpoint::dataset::Split::Train).count(), 5);
    let copied = std::fs::read_to_string(root.join("exp/data/config.toml")).unwrap();
    assert!(copied.contains("train = 5"));
}

#[test]
fn end_to_end_commands() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    for args in [
        vec!["generate", "--config", &cfg],
        vec!["sft", "--config", &cfg],
        vec!["rft", "--config", &cfg],
        vec!["eval", "--config", &cfg, "--checkpoint", "run/rft.ckpt", "--split", "train"],
        vec!["report", "--config", &cfg, "--log", "run/sft.ndjson", "--log", "run/rft.ndjson", "--eval", "run/eval_rft_train.json", "--out", "run/report"],
    ] {
        let o = nextpoint(&args, dir.path());
        assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    }
    assert!(dir.path().join("run/report/summary.md").exists());
    let o = nextpoint(&["eval", "--config", &cfg, "--checkpoint", "run/rft.ckpt", "--split", "test"], dir.path());
    assert_eq!(o.status.code(), Some(3));
}
