//! The five pipeline stages as library functions. The CLI is a thin layer
//! over these, and integration tests call them directly.

use std::fs;
use std::path::{Path, PathBuf};

use nextpoint_core::exec::Executor;
use nextpoint_core::grpo::{grpo_step, rft_batch};
use nextpoint_core::metrics::{evaluate_split, EvalReport};
use nextpoint_core::policy::{pretrain_decoder, AdamW, AdamWConfig, PolicyParams};
use nextpoint_core::train::{sft_batch, sft_step, TrainError};
use nextpoint_core::Scene;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::checkpoint::{load_checkpoint, load_decoder, save_checkpoint, save_decoder, vocab_hash, Checkpoint, DecoderArtifact};
use crate::config::ExperimentConfig;
use crate::dataset::{self, read_manifest, Manifest, Split};
use crate::error::{LabError, Result};
use crate::logging::RunLog;
use crate::report::{build_report, CheckpointInfo, EvalDocument, Summary};

pub const OUTPUT_ROOT_ENV: &str = "NEXTPOINT_OUTPUT_ROOT";
pub const CONFIG_COPY: &str = "config.toml";
pub const DECODER_FILE: &str = "decoder.bin";
pub const SFT_CHECKPOINT: &str = "sft.ckpt";
pub const RFT_CHECKPOINT: &str = "rft.ckpt";
pub const SFT_LOG: &str = "sft.ndjson";
pub const RFT_LOG: &str = "rft.ndjson";

/// Resolves the output directory: the explicit path if given, else the
/// configured one, with relative paths placed under `$NEXTPOINT_OUTPUT_ROOT`
/// when it is set.
pub fn resolve_output(config: &ExperimentConfig, explicit: Option<&Path>) -> PathBuf {
    let base = match explicit {
        Some(p) => p.to_path_buf(),
        None if config.output_dir.as_os_str().is_empty() => PathBuf::from("run"),
        None => config.output_dir.clone(),
    };
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) if base.is_relative() => PathBuf::from(root).join(base),
        _ => base,
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| LabError::io(format!("creating {}", dir.display()), e))
}

/// Copies the resolved configuration into `dir`.
pub fn write_config_copy(config: &ExperimentConfig, dir: &Path) -> Result<()> {
    create_dir(dir)?;
    let p = dir.join(CONFIG_COPY);
    fs::write(&p, config.to_toml()).map_err(|e| LabError::io(format!("writing {}", p.display()), e))
}

pub fn generate<E: Executor>(config: &ExperimentConfig, data_dir: &Path, force: bool, exec: &E) -> Result<Manifest> {
    let d = &config.data;
    let manifest = dataset::generate(data_dir, &config.scene.to_core(), d.train, d.val, d.seed, force, exec)?;
    write_config_copy(config, data_dir)?;
    Ok(manifest)
}

fn check_dataset(config: &ExperimentConfig, data_dir: &Path) -> Result<Manifest> {
    let m = read_manifest(data_dir)?;
    if (m.width, m.height) != (config.scene.width, config.scene.height) {
        return Err(LabError::Config(format!("dataset scenes are {}x{}, config expects {}x{}", m.width, m.height, config.scene.width, config.scene.height)));
    }
    Ok(m)
}

/// Loads the frozen decoder from `dir`, or pre-trains and saves it if it
/// is missing. The held-out IoU must reach `decoder.min_iou`.
pub fn ensure_decoder(config: &ExperimentConfig, dir: &Path) -> Result<DecoderArtifact> {
    let path = dir.join(DECODER_FILE);
    let expected = config.decoder_config();
    if path.exists() {
        let a = load_decoder(&path)?;
        if *a.decoder.config() != expected {
            return Err(LabError::artifact(&path, "decoder shape does not match the model config"));
        }
        return Ok(a);
    }
    let (decoder, _, report) = pretrain_decoder(expected, &config.decoder_pretrain())?;
    if !(report.heldout_iou >= config.decoder.min_iou) {
        return Err(LabError::Numeric(format!("decoder pre-training reached held-out IoU {:.3}, below decoder.min_iou {}", report.heldout_iou, config.decoder.min_iou)));
    }
    let a = DecoderArtifact { decoder, report };
    save_decoder(&a, &path)?;
    Ok(a)
}

fn check_checkpoint(config: &ExperimentConfig, ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let expected = vocab_hash(&config.model_config());
    if ckpt.vocab_hash() != expected {
        return Err(LabError::artifact(path, format!("checkpoint vocabulary hash {} does not match the configured vocabulary {}", ckpt.vocab_hash(), expected)));
    }
    if ckpt.params.config != config.model_config() {
        return Err(LabError::artifact(path, "checkpoint model shape differs from the config"));
    }
    Ok(())
}

fn numeric(e: TrainError, step: u64) -> LabError {
    match e {
        TrainError::NonFinite { .. } => LabError::Numeric(format!("non-finite loss or gradient at step {step}")),
        other => other.into(),
    }
}

fn eval_record(stage: &str, step: u64, r: &EvalReport) -> Value {
    let a = &r.aggregate;
    json!({ "event": "eval", "stage": stage, "step": step, "f1": a.f1, "precision": a.precision, "recall": a.recall, "pq": a.pq, "format_failures": a.format_failures, "scenes": a.scenes })
}

fn eval_subset(val: &[Scene], n: usize) -> &[Scene] {
    if n == 0 {
        val
    } else {
        &val[..n.min(val.len())]
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Checkpoint to continue from (same stage).
    pub resume: Option<PathBuf>,
    /// Stop after this many completed steps instead of the configured total.
    pub until: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub steps_done: u64,
    /// Validation F1 from the last periodic evaluation, if any ran.
    pub last_val_f1: Option<f64>,
}

fn resume_log(path: &Path, start: u64) -> Result<RunLog> {
    RunLog::resume(path, |v| v.get("step").and_then(Value::as_u64).is_some_and(|s| s <= start))
}

/// Teacher-forced training with the soft NTP loss plus the latent mask
/// loss. Writes the decoder (if missing), `sft.ckpt` and `sft.ndjson` into
/// `out`.
pub fn sft<E: Executor>(config: &ExperimentConfig, data_dir: &Path, out: &Path, opts: &TrainOptions, exec: &E) -> Result<TrainOutcome> {
    check_dataset(config, data_dir)?;
    write_config_copy(config, out)?;
    let decoder = ensure_decoder(config, out)?;
    let train = dataset::load_split(data_dir, Split::Train)?;
    let val = dataset::load_split(data_dir, Split::Val)?;
    let cfg = config.sft.to_core();
    let log_path = out.join(SFT_LOG);

    let (mut params, mut opt, start, mut log) = match &opts.resume {
        Some(p) => {
            let c = load_checkpoint(p)?;
            check_checkpoint(config, &c, p)?;
            if c.stage != "sft" || c.decoder_checksum != decoder.decoder.checksum() {
                return Err(LabError::artifact(p, "not an SFT checkpoint from this run's decoder"));
            }
            let opt = c.optimizer.ok_or_else(|| LabError::artifact(p, "checkpoint has no optimizer state"))?;
            let log = resume_log(&log_path, c.step)?;
            (c.params, opt, c.step, log)
        }
        None => {
            let params = PolicyParams::init(config.model_config(), config.model.seed)?;
            let opt = AdamW::new(&params.set, AdamWConfig::default());
            (params, opt, 0, RunLog::create(&log_path)?)
        }
    };

    let end = opts.until.unwrap_or(cfg.steps).min(cfg.steps) as u64;
    let mut last_val_f1 = None;
    for step in start..end {
        let batch = sft_batch(&train, &cfg, config.sft.seed, step);
        let lr = cfg.lr_at(step as usize);
        let (next, rep) = sft_step(&params, &mut opt, Some(&decoder.decoder), &batch, &cfg, lr, exec).map_err(|e| numeric(e, step + 1))?;
        params = next;
        let done = step + 1;
        log.record(&json!({ "event": "step", "stage": "sft", "step": done, "loss": rep.loss.total, "ntp": rep.loss.ntp, "covt": rep.loss.covt, "grad_norm": rep.grad_norm, "lr": rep.lr }))?;
        let every = config.sft.eval_every as u64;
        if (every > 0 && done % every == 0) || done == cfg.steps as u64 {
            let r = evaluate_split(&params, eval_subset(&val, config.sft.eval_scenes), &config.eval_config(), exec)?;
            last_val_f1 = Some(r.aggregate.f1);
            log.record(&eval_record("sft", done, &r))?;
        }
    }
    let steps_done = end.max(start);
    let ckpt = Checkpoint { params, optimizer: Some(opt), stage: "sft".into(), step: steps_done, decoder_checksum: decoder.decoder.checksum() };
    let path = out.join(SFT_CHECKPOINT);
    save_checkpoint(&ckpt, &path)?;
    Ok(TrainOutcome { checkpoint: path, log: log_path, steps_done, last_val_f1 })
}

/// GRPO fine-tuning starting from an SFT checkpoint (or resuming an RFT
/// one). Writes `rft.ckpt` and `rft.ndjson` into `out`.
pub fn rft<E: Executor>(config: &ExperimentConfig, data_dir: &Path, init: &Path, out: &Path, opts: &TrainOptions, exec: &E) -> Result<TrainOutcome> {
    check_dataset(config, data_dir)?;
    write_config_copy(config, out)?;
    let cfg = config.rft_config();
    let train = dataset::load_split(data_dir, Split::Train)?;
    let val = dataset::load_split(data_dir, Split::Val)?;
    let log_path = out.join(RFT_LOG);

    let (mut params, mut opt, start, decoder_checksum, mut log) = match &opts.resume {
        Some(p) => {
            let c = load_checkpoint(p)?;
            check_checkpoint(config, &c, p)?;
            if c.stage != "rft" {
                return Err(LabError::artifact(p, "resume needs an RFT checkpoint"));
            }
            let opt = c.optimizer.ok_or_else(|| LabError::artifact(p, "checkpoint has no optimizer state"))?;
            let log = resume_log(&log_path, c.step)?;
            (c.params, opt, c.step, c.decoder_checksum, log)
        }
        None => {
            let c = load_checkpoint(init)?;
            check_checkpoint(config, &c, init)?;
            if c.stage != "sft" {
                return Err(LabError::artifact(init, "RFT starts from an SFT checkpoint"));
            }
            let opt = AdamW::new(&c.params.set, AdamWConfig::default());
            (c.params, opt, 0, c.decoder_checksum, RunLog::create(&log_path)?)
        }
    };

    let end = opts.until.unwrap_or(cfg.steps).min(cfg.steps) as u64;
    let mut last_val_f1 = None;
    for step in start..end {
        let (scenes, step_seed) = rft_batch(&train, &cfg, config.rft.seed, step);
        let (next, rep) = grpo_step(&params, &mut opt, &scenes, &cfg, step_seed, exec).map_err(|e| numeric(e, step + 1))?;
        params = next;
        let done = step + 1;
        log.record(&json!({
            "event": "step",
            "stage": "rft",
            "step": done,
            "mean_reward": rep.mean_reward,
            "filtered_fraction": rep.filtered_fraction,
            "format_failure_rate": rep.format_failure_rate,
            "mean_abs_advantage": rep.mean_abs_advantage,
            "segmenter_calls": rep.segmenter_calls,
            "mean_length": rep.mean_length,
            "grad_norm": rep.grad_norm,
            "updated": rep.updated,
            "version": params.version,
        }))?;
        let every = config.rft.eval_every as u64;
        if (every > 0 && done % every == 0) || done == cfg.steps as u64 {
            let r = evaluate_split(&params, eval_subset(&val, config.rft.eval_scenes), &config.eval_config(), exec)?;
            last_val_f1 = Some(r.aggregate.f1);
            log.record(&eval_record("rft", done, &r))?;
        }
    }
    let steps_done = end.max(start);
    let ckpt = Checkpoint { params, optimizer: Some(opt), stage: "rft".into(), step: steps_done, decoder_checksum };
    let path = out.join(RFT_CHECKPOINT);
    save_checkpoint(&ckpt, &path)?;
    Ok(TrainOutcome { checkpoint: path, log: log_path, steps_done, last_val_f1 })
}

/// Greedy decoding plus the full metric suite on one split. Writes
/// `eval_<stage>_<split>.json` and `.csv` into `out`.
pub fn eval<E: Executor>(config: &ExperimentConfig, checkpoint: &Path, data_dir: &Path, split: Split, out: &Path, exec: &E) -> Result<(EvalDocument, PathBuf)> {
    let manifest = check_dataset(config, data_dir)?;
    let bytes = fs::read(checkpoint).map_err(|e| LabError::io(format!("reading {}", checkpoint.display()), e))?;
    let ckpt = load_checkpoint(checkpoint)?;
    check_checkpoint(config, &ckpt, checkpoint)?;
    let scenes = dataset::load_split(data_dir, split)?;
    let files: Vec<String> = manifest.split(split).map(|e| e.file.clone()).collect();
    let report = evaluate_split(&ckpt.params, &scenes, &config.eval_config(), exec)?;
    let info = CheckpointInfo { sha256: hex::encode(Sha256::digest(&bytes)), vocab_hash: ckpt.vocab_hash(), stage: ckpt.stage.clone(), step: ckpt.step, version: ckpt.params.version };
    let doc = EvalDocument::new(&report, split.name(), &files, info);
    create_dir(out)?;
    let (json_path, _) = doc.write(out, &format!("eval_{}_{}", ckpt.stage, split.name()))?;
    Ok((doc, json_path))
}

pub fn report(logs: &[PathBuf], evals: &[PathBuf], out: &Path) -> Result<Summary> {
    build_report(logs, evals, out)
}
