//! Experiment configuration: one TOML file drives every stage. Command-line
//! `--set section.key=value` overrides are applied on top of the file, and
//! missing keys fall back to defaults.

use std::path::{Path, PathBuf};

use nextpoint_core::grpo::{RftConfig, ShapingScope};
use nextpoint_core::metrics::EvalConfig;
use nextpoint_core::policy::{DecoderConfig, DecoderPretrainConfig, ModelConfig};
use nextpoint_core::reward::{RewardConfig, SegmenterConfig};
use nextpoint_core::scene::SceneConfig;
use nextpoint_core::train::SftConfig;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSection {
    pub width: usize,
    pub height: usize,
    pub count_min: usize,
    pub count_max: usize,
    pub radius_min: f64,
    pub radius_max: f64,
    pub min_sep: f64,
    pub noise: f64,
}

impl Default for SceneSection {
    fn default() -> Self {
        let c = SceneConfig::default();
        Self { width: c.width, height: c.height, count_min: c.count_min, count_max: c.count_max, radius_min: c.radius_min, radius_max: c.radius_max, min_sep: c.min_sep, noise: c.noise }
    }
}

impl SceneSection {
    pub fn to_core(&self) -> SceneConfig {
        SceneConfig {
            width: self.width,
            height: self.height,
            count_min: self.count_min,
            count_max: self.count_max,
            radius_min: self.radius_min,
            radius_max: self.radius_max,
            min_sep: self.min_sep,
            noise: self.noise,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub train: usize,
    pub val: usize,
    pub seed: u64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self { train: 500, val: 100, seed: 1 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub bins: u32,
    pub latents: u32,
    pub hidden: usize,
    pub heads: usize,
    pub ffn: usize,
    pub patch: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let c = ModelConfig::default();
        Self { bins: c.bins, latents: c.latents, hidden: c.hidden, heads: c.heads, ffn: c.ffn, patch: c.patch, max_len: c.max_len, seed: 7 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderSection {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub subset_prob: f64,
    pub eval_scenes: usize,
    /// Pre-training must reach this held-out IoU before the decoder is
    /// frozen.
    pub min_iou: f64,
    pub seed: u64,
}

impl Default for DecoderSection {
    fn default() -> Self {
        let c = DecoderPretrainConfig::default();
        Self { steps: c.steps, batch: c.batch, lr: c.lr, subset_prob: c.subset_prob, eval_scenes: c.eval_scenes, min_iou: 0.7, seed: c.seed }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct SftSection {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub final_lr_frac: f64,
    pub warmup: usize,
    pub weight_decay: f64,
    pub sigma: f64,
    pub alpha: f64,
    pub grad_clip: f64,
    /// Random flips and transposes of training scenes.
    pub augment: bool,
    pub eval_every: usize,
    /// Validation scenes used for the periodic F1 in the log (0 = all).
    pub eval_scenes: usize,
    pub seed: u64,
}

impl Default for SftSection {
    fn default() -> Self {
        let c = SftConfig::default();
        Self {
            steps: c.steps,
            batch: c.batch,
            lr: c.lr,
            final_lr_frac: c.final_lr_frac,
            warmup: c.warmup,
            weight_decay: c.weight_decay,
            sigma: c.sigma,
            alpha: c.alpha,
            grad_clip: c.grad_clip,
            augment: c.augment,
            eval_every: 250,
            eval_scenes: 100,
            seed: 11,
        }
    }
}

impl SftSection {
    pub fn to_core(&self) -> SftConfig {
        SftConfig {
            steps: self.steps,
            batch: self.batch,
            lr: self.lr,
            final_lr_frac: self.final_lr_frac,
            warmup: self.warmup,
            weight_decay: self.weight_decay,
            sigma: self.sigma,
            alpha: self.alpha,
            grad_clip: self.grad_clip,
            augment: self.augment,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum ScopeSetting {
    Coordinates,
    WholePoint,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct RftSection {
    pub group_size: usize,
    pub scenes_per_step: usize,
    pub epsilon: f64,
    pub delta: f64,
    pub beta: f64,
    pub gamma: f64,
    pub temperature: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub steps: usize,
    pub kl_coeff: f64,
    pub lvgf: bool,
    pub fgas: bool,
    pub shaping_scope: ScopeSetting,
    pub eval_every: usize,
    pub eval_scenes: usize,
    pub seed: u64,
}

impl Default for RftSection {
    fn default() -> Self {
        let c = RftConfig::default();
        Self {
            group_size: c.group_size,
            scenes_per_step: c.scenes_per_step,
            epsilon: c.epsilon,
            delta: c.delta,
            beta: c.beta,
            gamma: c.reward.gamma,
            temperature: c.temperature,
            lr: c.lr,
            weight_decay: c.weight_decay,
            grad_clip: c.grad_clip,
            steps: c.steps,
            kl_coeff: c.kl_coeff,
            lvgf: c.filter_low_variance,
            fgas: c.shape_advantages,
            shaping_scope: ScopeSetting::Coordinates,
            eval_every: 50,
            eval_scenes: 100,
            seed: 23,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub r_thresh: f64,
    pub seg_threshold: f64,
    pub seg_max_radius: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        let s = SegmenterConfig::default();
        Self { r_thresh: 6.0, seg_threshold: s.threshold, seg_max_radius: s.max_radius }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Output directory; relative paths resolve against the output root.
    pub output_dir: PathBuf,
    pub scene: SceneSection,
    pub data: DataSection,
    pub model: ModelSection,
    pub decoder: DecoderSection,
    pub sft: SftSection,
    pub rft: RftSection,
    pub eval: EvalSection,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut value: toml::Value = toml::from_str(text).map_err(|e| LabError::Config(format!("parsing config: {e}")))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: ExperimentConfig = value.try_into().map_err(|e: toml::de::Error| LabError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| LabError::io(format!("reading config {}", p.display()), e))?,
            None => String::new(),
        };
        Self::from_toml_str(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn segmenter(&self) -> SegmenterConfig {
        SegmenterConfig { threshold: self.eval.seg_threshold, max_radius: self.eval.seg_max_radius }
    }

    pub fn model_config(&self) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            bins: m.bins,
            latents: m.latents,
            hidden: m.hidden,
            heads: m.heads,
            ffn: m.ffn,
            patch: m.patch,
            max_len: m.max_len,
            scene_width: self.scene.width,
            scene_height: self.scene.height,
        }
    }

    pub fn decoder_config(&self) -> DecoderConfig {
        DecoderConfig::for_model(&self.model_config())
    }

    pub fn decoder_pretrain(&self) -> DecoderPretrainConfig {
        let d = &self.decoder;
        DecoderPretrainConfig { scene: self.scene.to_core(), steps: d.steps, batch: d.batch, lr: d.lr, subset_prob: d.subset_prob, seed: d.seed, eval_scenes: d.eval_scenes }
    }

    pub fn rft_config(&self) -> RftConfig {
        let r = &self.rft;
        RftConfig {
            group_size: r.group_size,
            scenes_per_step: r.scenes_per_step,
            epsilon: r.epsilon,
            delta: r.delta,
            beta: r.beta,
            temperature: r.temperature,
            lr: r.lr,
            weight_decay: r.weight_decay,
            grad_clip: r.grad_clip,
            steps: r.steps,
            kl_coeff: r.kl_coeff,
            filter_low_variance: r.lvgf,
            shape_advantages: r.fgas,
            scope: match r.shaping_scope {
                ScopeSetting::Coordinates => ShapingScope::Coordinates,
                ScopeSetting::WholePoint => ShapingScope::WholePoint,
            },
            reward: RewardConfig { r_thresh: self.eval.r_thresh, gamma: r.gamma, use_pq: r.gamma > 0.0, segmenter: self.segmenter() },
        }
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig { r_thresh: self.eval.r_thresh, segmenter: self.segmenter() }
    }

    /// Checks every section against its module's preconditions.
    pub fn validate(&self) -> Result<()> {
        let cfg_err = |m: String| Err(LabError::Config(m));
        self.scene.to_core().validate().map_err(|e| LabError::Config(e.to_string()))?;
        let model = self.model_config();
        model.validate().map_err(|e| LabError::Config(e.to_string()))?;
        let densest = model.sequence_len(self.scene.count_max);
        if self.model.max_len < densest {
            return cfg_err(format!("model.max_len {} is below the densest sequence length {densest}", self.model.max_len));
        }
        if self.data.train == 0 || self.data.val == 0 {
            return cfg_err("data.train and data.val must be positive".into());
        }
        if self.decoder.steps == 0 || self.decoder.batch == 0 || !(self.decoder.lr > 0.0) || !(0.0..=1.0).contains(&self.decoder.subset_prob) {
            return cfg_err("decoder needs positive steps, batch and lr, and subset_prob in [0, 1]".into());
        }
        self.sft.to_core().validate()?;
        self.rft_config().validate()?;
        if !(self.eval.r_thresh > 0.0) || !(self.eval.seg_max_radius > 0.0) {
            return cfg_err("eval.r_thresh and eval.seg_max_radius must be positive".into());
        }
        Ok(())
    }
}

/// Applies `a.b.c=value`; the value is parsed as a TOML literal, falling back
/// to a plain string.
fn apply_override(root: &mut toml::Value, spec: &str) -> Result<()> {
    let (path, raw) = spec.split_once('=').ok_or_else(|| LabError::Config(format!("override `{spec}` is not key=value")))?;
    let parsed: toml::Value = toml::from_str::<toml::Table>(&format!("v = {raw}")).ok().and_then(|mut t| t.remove("v")).unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let keys: Vec<&str> = path.trim().split('.').collect();
    let mut node = root;
    for (i, k) in keys.iter().enumerate() {
        let table = node.as_table_mut().ok_or_else(|| LabError::Config(format!("override `{path}`: `{k}` is not inside a table")))?;
        if i + 1 == keys.len() {
            table.insert(k.to_string(), parsed);
            return Ok(());
        }
        node = table.entry(k.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    Err(LabError::Config(format!("override `{spec}` has an empty key")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c = ExperimentConfig::from_toml_str("", &[]).unwrap();
        assert_eq!(c, ExperimentConfig::default());
        assert_eq!(c.rft_config().epsilon, 0.2);
    }

    #[test]
    fn flags_override_file() {
        let c = ExperimentConfig::from_toml_str("[sft]\nsteps = 10\nlr = 0.01\n", &["sft.steps=20".into(), "output_dir=runs/x".into()]).unwrap();
        assert_eq!(c.sft.steps, 20);
        assert_eq!(c.sft.lr, 0.01);
        assert_eq!(c.output_dir, PathBuf::from("runs/x"));
    }

    #[test]
    fn rejects_bad_values_and_keys() {
        for bad in ["[rft]\nbeta = 1.5\n", "[rft]\ngroup_size = 1\n", "[model]\nmax_len = 10\n", "[sft]\nstepz = 3\n", "[scene]\nmin_sep = -1.0\n"] {
            assert!(matches!(ExperimentConfig::from_toml_str(bad, &[]), Err(LabError::Config(_))), "{bad}");
        }
        assert!(ExperimentConfig::from_toml_str("", &["sft.steps".into()]).is_err());
    }

    #[test]
    fn resolved_config_round_trips() {
        let c = ExperimentConfig::from_toml_str("", &["rft.shaping_scope=\"whole_point\"".into()]).unwrap();
        assert_eq!(ExperimentConfig::from_toml_str(&c.to_toml(), &[]).unwrap(), c);
    }
}
