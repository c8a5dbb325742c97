//! Supervised fine-tuning on ground-truth point sequences.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::exec::Executor;
use crate::policy::{forward_teacher_forced, AdamW, FrozenMaskDecoder, ParamSet, PolicyError, PolicyParams};
use crate::scene::{foreground_mask, transform_scene, Dihedral, Scene};
use crate::seed::derive_seed;
use crate::supervision::{covt_loss, sft_loss, soft_ntp_loss, LossError, LossReport};
use crate::tokenizer::{encode_points, with_latent_prefix, TokenSequence, TokenizerError};

const SFT_BATCH_STREAM: u64 = 0x5f7;

#[derive(Debug, Clone, PartialEq)]
pub enum TrainError {
    Policy(PolicyError),
    Loss(LossError),
    Tokenizer(TokenizerError),
    /// A loss or gradient became NaN or infinite; the step was not applied.
    NonFinite {
        step: u64,
    },
    InvalidConfig(&'static str),
}

impl fmt::Display for TrainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainError::Policy(e) => write!(f, "policy: {e}"),
            TrainError::Loss(e) => write!(f, "loss: {e}"),
            TrainError::Tokenizer(e) => write!(f, "tokenizer: {e}"),
            TrainError::NonFinite { step } => write!(f, "non-finite loss or gradient at step {step}"),
            TrainError::InvalidConfig(m) => write!(f, "invalid training config: {m}"),
        }
    }
}

impl core::error::Error for TrainError {}

impl From<PolicyError> for TrainError {
    fn from(e: PolicyError) -> Self {
        TrainError::Policy(e)
    }
}

impl From<LossError> for TrainError {
    fn from(e: LossError) -> Self {
        TrainError::Loss(e)
    }
}

impl From<TokenizerError> for TrainError {
    fn from(e: TokenizerError) -> Self {
        TrainError::Tokenizer(e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SftConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Fraction of `lr` reached at the end of the cosine decay.
    pub final_lr_frac: f64,
    pub warmup: usize,
    pub weight_decay: f64,
    /// Width of the Gaussian soft labels, in bins.
    pub sigma: f64,
    /// Weight of the mask loss routed through the latent tokens.
    pub alpha: f64,
    /// Global gradient-norm clip; `0` disables clipping.
    pub grad_clip: f64,
    /// Apply a random flip or transpose to every sampled training scene.
    pub augment: bool,
}

impl Default for SftConfig {
    fn default() -> Self {
        Self { steps: 2000, batch: 16, lr: 8e-3, final_lr_frac: 0.05, warmup: 100, weight_decay: 0.01, sigma: 1.0, alpha: 0.1, grad_clip: 1.0, augment: true }
    }
}

impl SftConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch == 0 {
            return Err(TrainError::InvalidConfig("batch must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(TrainError::InvalidConfig("lr must be positive"));
        }
        if !(self.sigma >= 0.0) || !(self.alpha >= 0.0) || !(self.grad_clip >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(TrainError::InvalidConfig("sigma, alpha, grad_clip and weight_decay must be non-negative"));
        }
        Ok(())
    }

    /// Linear warmup followed by cosine decay to `final_lr_frac * lr`.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup {
            return self.lr * (step + 1) as f64 / self.warmup as f64;
        }
        let span = self.steps.saturating_sub(self.warmup).max(1);
        let t = ((step - self.warmup) as f64 / span as f64).min(1.0);
        let cos = 0.5 * (1.0 + libm::cos(core::f64::consts::PI * t));
        self.lr * (self.final_lr_frac + (1.0 - self.final_lr_frac) * cos)
    }
}

/// Training batch for `step`, drawn with replacement from a stream that only
/// depends on `(seed, step)`, so a resumed run sees the same batches.
pub fn sft_batch(train: &[Scene], cfg: &SftConfig, seed: u64, step: u64) -> Vec<Scene> {
    if train.is_empty() {
        return Vec::new();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, SFT_BATCH_STREAM, step));
    (0..cfg.batch)
        .map(|_| {
            let scene = &train[rng.gen_range(0..train.len())];
            let symmetries = Dihedral::count_for(scene.width, scene.height);
            let pick = rng.gen_range(0..symmetries);
            match cfg.augment {
                true => transform_scene(scene, Dihedral::from_index(pick)).expect("index within the scene's symmetry group"),
                false => scene.clone(),
            }
        })
        .collect()
}

/// Ground-truth training sequence (with latent prefix) for a scene.
pub fn target_sequence(params: &PolicyParams, scene: &Scene) -> Result<TokenSequence, TrainError> {
    let vocab = params.config.vocabulary();
    let seq = encode_points(&scene.centroids(), scene.width, scene.height, &vocab)?;
    Ok(with_latent_prefix(&seq, &vocab))
}

/// Loss and parameter gradient for a single scene.
pub fn sft_sample_gradient(params: &PolicyParams, decoder: Option<&FrozenMaskDecoder>, scene: &Scene, sigma: f64, alpha: f64) -> Result<(LossReport, ParamSet), TrainError> {
    let target = target_sequence(params, scene)?;
    let out = forward_teacher_forced(params, scene, &target)?;
    let start = 1 + params.config.latents as usize;
    let n = target.ids.len();
    let vocab = params.config.vocabulary();
    let (ntp, grads) = soft_ntp_loss(&out.logits[start - 1..n - 1], &target.ids[start..], &vocab, sigma)?;
    let mut dlogits: Vec<Option<Vec<f64>>> = vec![None; n];
    for (i, g) in grads.into_iter().enumerate() {
        dlogits[start - 1 + i] = Some(g);
    }

    let mut covt = 0.0;
    let mut dlat = None;
    if let (Some(dec), true) = (decoder, alpha > 0.0) {
        let trace = dec.decode_mask(&out.latents, scene)?;
        let (loss, mut dmask) = covt_loss(&trace.logits, &foreground_mask(scene))?;
        dmask.iter_mut().for_each(|g| *g *= alpha);
        covt = loss;
        dlat = Some(dec.latent_gradient(&trace, &out.latents, &dmask));
    }
    let report = sft_loss(ntp, covt, if dlat.is_some() { alpha } else { 0.0 });
    let grad = out.backward(params, &dlogits, dlat.as_deref());
    Ok((report, grad))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SftStepReport {
    pub loss: LossReport,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
    pub lr: f64,
}

/// Rescales `grads` in place so that its norm is at most `max_norm`; returns
/// the original norm.
pub fn clip_grad_norm(grads: &mut ParamSet, max_norm: f64) -> f64 {
    let norm = grads.norm();
    if max_norm > 0.0 && norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}

/// One optimizer step on a batch. Per-scene gradients are reduced in batch
/// order, so the result does not depend on the executor.
pub fn sft_step<E: Executor>(
    params: &PolicyParams,
    opt: &mut AdamW,
    decoder: Option<&FrozenMaskDecoder>,
    batch: &[Scene],
    cfg: &SftConfig,
    lr: f64,
    exec: &E,
) -> Result<(PolicyParams, SftStepReport), TrainError> {
    if batch.is_empty() {
        return Err(TrainError::InvalidConfig("empty batch"));
    }
    let results = exec.map_indexed(batch.len(), &|i| sft_sample_gradient(params, decoder, &batch[i], cfg.sigma, cfg.alpha));
    let mut total = ParamSet::zeros_like(&params.set);
    let (mut ntp, mut covt) = (0.0, 0.0);
    for r in results {
        let (rep, g) = r?;
        ntp += rep.ntp;
        covt += rep.covt;
        total.add_assign(&g);
    }
    let s = 1.0 / batch.len() as f64;
    total.scale(s);
    let alpha = if decoder.is_some() { cfg.alpha } else { 0.0 };
    let loss = sft_loss(ntp * s, covt * s, alpha);
    if !loss.total.is_finite() || !total.all_finite() {
        return Err(TrainError::NonFinite { step: opt.step });
    }
    let grad_norm = clip_grad_norm(&mut total, cfg.grad_clip);
    let next = params.update(&total, opt, lr, cfg.weight_decay)?;
    Ok((next, SftStepReport { loss, grad_norm, lr }))
}
