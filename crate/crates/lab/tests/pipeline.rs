mod common;

use std::fs;

use common::{read, snapshot, tiny};
use nextpoint::checkpoint::{load_checkpoint, Checkpoint};
use nextpoint::commands::{self, TrainOptions};
use nextpoint::dataset::{read_manifest, Split};
use nextpoint::logging::{read_records, timing_path};
use nextpoint::report::EvalDocument;
use nextpoint::LabError;
use nextpoint_core::exec::Sequential;
use nextpoint_core::policy::{AdamW, AdamWConfig, PolicyParams};

#[test]
fn generate_writes_requested_counts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(&["data.train=100", "data.val=20"]);
    let m = commands::generate(&cfg, dir.path(), false, &Sequential).unwrap();
    assert_eq!(m.entries.len(), 120);
    let scene_files = fs::read_dir(dir.path()).unwrap().filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().ends_with(".json") && e.as_ref().unwrap().file_name() != "manifest.json").count();
    assert_eq!(scene_files, 120);
    assert!(dir.path().join(commands::CONFIG_COPY).exists());
}

#[test]
fn generate_is_reproducible_and_guarded() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let cfg = tiny(&[]);
    commands::generate(&cfg, a.path(), false, &Sequential).unwrap();
    commands::generate(&cfg, b.path(), false, &nextpoint::RayonExecutor::new(3).unwrap()).unwrap();
    assert_eq!(snapshot(a.path()), snapshot(b.path()));
    assert!(matches!(commands::generate(&cfg, a.path(), false, &Sequential), Err(LabError::Config(_))));
    commands::generate(&cfg, a.path(), true, &Sequential).unwrap();
    assert_eq!(snapshot(a.path()), snapshot(b.path()));
}

#[test]
fn zero_sft_steps_saves_the_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(&["sft.steps=0"]);
    let data = dir.path().join("data");
    commands::generate(&cfg, &data, false, &Sequential).unwrap();
    let out = commands::sft(&cfg, &data, dir.path(), &TrainOptions::default(), &Sequential).unwrap();
    let ckpt = load_checkpoint(&out.checkpoint).unwrap();
    let init = PolicyParams::init(cfg.model_config(), cfg.model.seed).unwrap();
    assert_eq!(ckpt.params, init);
    assert_eq!(ckpt.optimizer, Some(AdamW::new(&init.set, AdamWConfig::default())));
    assert_eq!(read_records(&out.log).unwrap().0.len(), 0);
}

#[test]
fn resumed_sft_matches_uninterrupted_run() {
    let root = tempfile::tempdir().unwrap();
    let cfg = tiny(&[]);
    let data = root.path().join("data");
    commands::generate(&cfg, &data, false, &Sequential).unwrap();

    let full = root.path().join("full");
    commands::sft(&cfg, &data, &full, &TrainOptions::default(), &Sequential).unwrap();

    let staged = root.path().join("staged");
    let first = commands::sft(&cfg, &data, &staged, &TrainOptions { until: Some(4), ..Default::default() }, &Sequential).unwrap();
    assert_eq!(first.steps_done, 4);
    let kept = staged.join("at4.ckpt");
    fs::rename(&first.checkpoint, &kept).unwrap();
    // Pretend the interrupted run logged a step past the checkpoint.
    let mut log = fs::read_to_string(&first.log).unwrap();
    log.push_str("{\"event\":\"step\",\"stage\":\"sft\",\"step\":5,\"loss\":123.0}\n");
    fs::write(&first.log, log).unwrap();
    commands::sft(&cfg, &data, &staged, &TrainOptions { resume: Some(kept), ..Default::default() }, &Sequential).unwrap();

    for f in [commands::SFT_LOG, commands::SFT_CHECKPOINT, commands::DECODER_FILE, commands::CONFIG_COPY] {
        assert_eq!(read(&full.join(f)), read(&staged.join(f)), "{f}");
    }
    assert!(timing_path(&full.join(commands::SFT_LOG)).exists());
}

#[test]
fn non_finite_training_aborts_with_step() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(&["sft.lr=1e200", "sft.warmup=0", "sft.grad_clip=0.0", "sft.eval_every=0"]);
    let data = dir.path().join("data");
    commands::generate(&cfg, &data, false, &Sequential).unwrap();
    match commands::sft(&cfg, &data, dir.path(), &TrainOptions::default(), &Sequential) {
        Err(LabError::Numeric(m)) => assert!(m.contains("at step"), "{m}"),
        other => panic!("expected a numerical failure, got {other:?}"),
    }
}

fn sft_checkpoint(overrides: &[&str]) -> (tempfile::TempDir, nextpoint::ExperimentConfig, std::path::PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(overrides);
    let data = dir.path().join("data");
    commands::generate(&cfg, &data, false, &Sequential).unwrap();
    let out = commands::sft(&cfg, &data, dir.path(), &TrainOptions::default(), &Sequential).unwrap();
    (dir, cfg, out.checkpoint)
}

#[test]
fn gamma_controls_segmenter_calls() {
    // Enough SFT for some rollouts to parse; the segmenter only sees those.
    let (dir, cfg, ckpt) = sft_checkpoint(&["sft.steps=80", "sft.lr=0.01", "rft.temperature=0.5"]);
    let data = dir.path().join("data");
    let well_formed = |r: &serde_json::Value| ((1.0 - r["format_failure_rate"].as_f64().unwrap()) * 8.0).round() as u64;

    let out = commands::rft(&cfg, &data, &ckpt, &dir.path().join("g0"), &TrainOptions::default(), &Sequential).unwrap();
    let (recs, _) = read_records(&out.log).unwrap();
    let steps: Vec<_> = recs.iter().filter(|r| r["event"] == "step").collect();
    assert_eq!(steps.len(), 4);
    assert!(steps.iter().map(|r| well_formed(r)).sum::<u64>() > 0);
    assert!(steps.iter().all(|r| r["segmenter_calls"] == 0));

    let cfg = tiny(&["sft.steps=80", "sft.lr=0.01", "rft.temperature=0.5", "rft.gamma=0.5"]);
    let out = commands::rft(&cfg, &data, &ckpt, &dir.path().join("g5"), &TrainOptions::default(), &Sequential).unwrap();
    let (recs, _) = read_records(&out.log).unwrap();
    let steps: Vec<_> = recs.iter().filter(|r| r["event"] == "step").collect();
    assert!(steps.iter().map(|r| well_formed(r)).sum::<u64>() > 0);
    for r in steps {
        assert_eq!(r["segmenter_calls"].as_u64().unwrap(), well_formed(r));
    }
}

#[test]
fn delta_above_every_std_only_bumps_versions() {
    let (dir, _, ckpt) = sft_checkpoint(&[]);
    let cfg = tiny(&["rft.delta=10.0"]);
    let out = commands::rft(&cfg, &dir.path().join("data"), &ckpt, &dir.path().join("rft"), &TrainOptions::default(), &Sequential).unwrap();
    let (recs, _) = read_records(&out.log).unwrap();
    for r in recs.iter().filter(|r| r["event"] == "step") {
        assert_eq!(r["filtered_fraction"], 1.0);
        assert_eq!(r["updated"], false);
    }
    let before: Checkpoint = load_checkpoint(&ckpt).unwrap();
    let after = load_checkpoint(&out.checkpoint).unwrap();
    assert_eq!(after.params.set, before.params.set);
    assert_eq!(after.params.version, before.params.version + 4);
}

#[test]
fn resumed_rft_matches_uninterrupted_run() {
    let (dir, cfg, ckpt) = sft_checkpoint(&[]);
    let data = dir.path().join("data");
    let full = commands::rft(&cfg, &data, &ckpt, &dir.path().join("full"), &TrainOptions::default(), &Sequential).unwrap();
    let staged_dir = dir.path().join("staged");
    let part = commands::rft(&cfg, &data, &ckpt, &staged_dir, &TrainOptions { until: Some(1), ..Default::default() }, &Sequential).unwrap();
    let staged = commands::rft(&cfg, &data, &ckpt, &staged_dir, &TrainOptions { resume: Some(part.checkpoint), ..Default::default() }, &Sequential).unwrap();
    assert_eq!(read(&full.log), read(&staged.log));
    assert_eq!(read(&full.checkpoint), read(&staged.checkpoint));
}

#[test]
fn eval_is_complete_reproducible_and_checks_vocabulary() {
    let (dir, cfg, ckpt) = sft_checkpoint(&[]);
    let data = dir.path().join("data");
    let (doc, path) = commands::eval(&cfg, &ckpt, &data, Split::Val, &dir.path().join("e1"), &Sequential).unwrap();
    let (_, path2) = commands::eval(&cfg, &ckpt, &data, Split::Val, &dir.path().join("e2"), &nextpoint::RayonExecutor::new(2).unwrap()).unwrap();
    assert_eq!(read(&path), read(&path2));
    assert_eq!(read(&path.with_extension("csv")), read(&path2.with_extension("csv")));

    let manifest = read_manifest(&data).unwrap();
    let listed: Vec<&str> = manifest.split(Split::Val).map(|e| e.file.as_str()).collect();
    let reported: Vec<&str> = doc.scenes.iter().map(|s| s.file.as_str()).collect();
    assert_eq!(listed, reported);
    assert_eq!(EvalDocument::read(&path).unwrap(), doc);

    let other = tiny(&["model.bins=16"]);
    match commands::eval(&other, &ckpt, &data, Split::Val, &dir.path().join("e3"), &Sequential) {
        Err(LabError::Artifact { message, .. }) => assert!(message.contains("vocabulary hash"), "{message}"),
        r => panic!("expected a refusal, got {r:?}"),
    }
}

#[test]
fn report_passes_eval_aggregate_through() {
    let (dir, cfg, ckpt) = sft_checkpoint(&[]);
    let data = dir.path().join("data");
    let (doc, eval_path) = commands::eval(&cfg, &ckpt, &data, Split::Val, dir.path(), &Sequential).unwrap();
    let log = dir.path().join(commands::SFT_LOG);
    let s = commands::report(&[log], &[eval_path], &dir.path().join("report")).unwrap();
    assert_eq!(s.evals[0].aggregate.f1, doc.aggregate.f1);
    assert_eq!(s.logs[0].steps, 6);
    let svg = fs::read_to_string(dir.path().join("report/loss.svg")).unwrap();
    assert!(svg.contains("data-x-min=\"1\"") && svg.contains("data-x-max=\"6\""));
    for f in ["reward.svg", "f1.svg", "rates.svg", "summary.json", "summary.md"] {
        assert!(dir.path().join("report").join(f).exists(), "{f}");
    }
}
