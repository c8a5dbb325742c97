//! The trainable policy and its frozen mask decoder.
//!
//! The policy is a single pre-norm attention + MLP block that reads a patch
//! encoding of the scene and emits the token sequence autoregressively.
//! Gradients are hand-derived (see [`model`]) and checked against finite
//! differences in the test suite.

pub mod decoder;
mod linalg;
pub(crate) mod model;
pub mod optim;
pub mod params;

use alloc::vec::Vec;
use core::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::math;
use crate::scene::Scene;
use crate::tokenizer::{parse_sequence, FormatError, GrammarState, ParsedDetections, TokenId, TokenSequence, Vocabulary};

pub use decoder::{oracle_iou, pretrain_decoder, threshold_mask, DecodeTrace, DecoderConfig, DecoderPretrainConfig, DecoderPretrainReport, FrozenMaskDecoder, MaskDecoder, OracleLatents};
pub use optim::{AdamW, AdamWConfig};
pub use params::{ParamSet, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    /// Coordinate bins `K`.
    pub bins: u32,
    /// Latent tokens `L`.
    pub latents: u32,
    /// Hidden width `d`.
    pub hidden: usize,
    pub heads: usize,
    /// MLP hidden width.
    pub ffn: usize,
    /// Side length of the square scene patches.
    pub patch: usize,
    pub max_len: usize,
    pub scene_width: usize,
    pub scene_height: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { bins: 64, latents: 4, hidden: 32, heads: 4, ffn: 128, patch: 4, max_len: 72, scene_width: 64, scene_height: 64 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PolicyError {
    InvalidConfig(&'static str),
    /// Scene dimensions are not multiples of the patch size or differ from
    /// the configured ones.
    SceneShape {
        width: usize,
        height: usize,
    },
    SequenceTooLong {
        len: usize,
        max: usize,
    },
    UnknownToken(TokenId),
    LatentCount {
        expected: usize,
        got: usize,
    },
    ShapeMismatch,
    NonFiniteGradient,
}

impl fmt::Display for PolicyError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PolicyError::InvalidConfig(m) => write!(f, "invalid model config: {m}"),
            PolicyError::SceneShape { width, height } => write!(f, "scene of {width}x{height} does not fit the model's patch grid"),
            PolicyError::SequenceTooLong { len, max } => write!(f, "sequence of {len} tokens exceeds max length {max}"),
            PolicyError::UnknownToken(id) => write!(f, "token id {id} not in vocabulary"),
            PolicyError::LatentCount { expected, got } => write!(f, "expected {expected} latent vectors, got {got}"),
            PolicyError::ShapeMismatch => f.write_str("gradient layout does not match parameters"),
            PolicyError::NonFiniteGradient => f.write_str("gradient contains non-finite values"),
        }
    }
}

impl core::error::Error for PolicyError {}

impl ModelConfig {
    pub fn vocabulary(&self) -> Vocabulary {
        Vocabulary::new(self.bins.max(2), self.latents).expect("bins >= 2")
    }

    pub fn vocab_size(&self) -> usize {
        self.bins as usize + 5 + self.latents as usize
    }

    pub fn num_patches(&self) -> usize {
        (self.scene_width / self.patch) * (self.scene_height / self.patch)
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        if self.bins < 2 {
            return Err(PolicyError::InvalidConfig("need at least 2 bins"));
        }
        if self.hidden == 0 || self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return Err(PolicyError::InvalidConfig("hidden width must be a positive multiple of heads"));
        }
        if self.ffn == 0 {
            return Err(PolicyError::InvalidConfig("ffn width must be positive"));
        }
        if self.patch == 0 || !self.scene_width.is_multiple_of(self.patch) || !self.scene_height.is_multiple_of(self.patch) {
            return Err(PolicyError::InvalidConfig("scene dimensions must be divisible by the patch size"));
        }
        if self.max_len < self.latents as usize + 2 {
            return Err(PolicyError::InvalidConfig("max_len cannot hold BOS, latents and EOS"));
        }
        Ok(())
    }

    /// Tokens needed to emit `n` detections with the latent prefix.
    pub fn sequence_len(&self, n: usize) -> usize {
        self.latents as usize + crate::tokenizer::encoded_len(n)
    }
}

/// Parameter snapshot. `version` counts applied updates.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    pub config: ModelConfig,
    pub set: ParamSet,
    pub version: u64,
}

impl PolicyParams {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, PolicyError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.hidden;
        let v = config.vocab_size();
        let k1 = config.bins as usize + 1;
        let pd = config.patch * config.patch;
        let np = config.num_patches();
        let f = config.ffn;
        let lin = |fan_in: usize| 1.0 / math::sqrt(fan_in as f64);
        let names = &model::TENSOR_NAMES;
        let tensors = alloc::vec![
            Tensor::normal(names[0], &[v, d], 0.5, &mut rng),
            Tensor::normal(names[1], &[config.max_len, d], 0.1, &mut rng),
            Tensor::normal(names[2], &[GrammarState::COUNT, d], 0.5, &mut rng),
            Tensor::normal(names[3], &[k1, d], 0.5, &mut rng),
            Tensor::normal(names[4], &[k1, d], 0.5, &mut rng),
            Tensor::normal(names[5], &[pd, d], lin(pd), &mut rng),
            Tensor::zeros(names[6], &[d]),
            Tensor::normal(names[7], &[np, d], 0.5, &mut rng),
            Tensor::filled(names[8], &[d], 1.0),
            Tensor::zeros(names[9], &[d]),
            Tensor::normal(names[10], &[d, d], lin(d), &mut rng),
            Tensor::normal(names[11], &[d, d], lin(d), &mut rng),
            Tensor::normal(names[12], &[d, d], lin(d), &mut rng),
            Tensor::normal(names[13], &[d, d], lin(d), &mut rng),
            Tensor::filled(names[14], &[d], 1.0),
            Tensor::zeros(names[15], &[d]),
            Tensor::normal(names[16], &[d, f], lin(d), &mut rng),
            Tensor::zeros(names[17], &[f]),
            Tensor::normal(names[18], &[f, d], lin(f), &mut rng),
            Tensor::zeros(names[19], &[d]),
            Tensor::filled(names[20], &[d], 1.0),
            Tensor::zeros(names[21], &[d]),
            Tensor::normal(names[22], &[d, v], lin(d), &mut rng),
            Tensor::zeros(names[23], &[v]),
            Tensor::zeros(names[24], &[model::BIAS_TABLES, config.heads, model::bias_span(&config)]),
            Tensor::filled(names[25], &[2], 1.0),
        ];
        Ok(Self { config, set: ParamSet { tensors }, version: 0 })
    }

    /// Rebuilds a snapshot from stored tensors, checking names and shapes.
    pub fn from_parts(config: ModelConfig, set: ParamSet, version: u64) -> Result<Self, PolicyError> {
        let reference = Self::init(config, 0)?;
        if !reference.set.same_layout(&set) {
            return Err(PolicyError::ShapeMismatch);
        }
        Ok(Self { config, set, version })
    }

    fn check_scene(&self, scene: &Scene) -> Result<(), PolicyError> {
        if scene.width != self.config.scene_width || scene.height != self.config.scene_height {
            return Err(PolicyError::SceneShape { width: scene.width, height: scene.height });
        }
        Ok(())
    }

    fn check_tokens(&self, tokens: &[TokenId]) -> Result<(), PolicyError> {
        if tokens.len() > self.config.max_len {
            return Err(PolicyError::SequenceTooLong { len: tokens.len(), max: self.config.max_len });
        }
        let v = self.config.vocab_size() as TokenId;
        if let Some(&bad) = tokens.iter().find(|&&t| t >= v) {
            return Err(PolicyError::UnknownToken(bad));
        }
        Ok(())
    }
}

/// Patch features (before the block's layer norm), one row per patch in
/// raster order.
pub fn encode_scene(params: &PolicyParams, scene: &Scene) -> Result<Vec<Vec<f64>>, PolicyError> {
    params.check_scene(scene)?;
    let patches = model::patches(scene, params.config.patch);
    Ok(model::scene_features(&params.set, &params.config, &patches))
}

/// Teacher-forced pass over a full sequence (including `BOS` and latents).
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `logits[n]` scores the token at position `n + 1`.
    pub logits: Vec<Vec<f64>>,
    /// Final hidden states at the latent positions.
    pub latents: Vec<Vec<f64>>,
    pub(crate) trace: model::Trace,
}

pub fn forward_teacher_forced(params: &PolicyParams, scene: &Scene, target: &TokenSequence) -> Result<ForwardOutput, PolicyError> {
    params.check_scene(scene)?;
    params.check_tokens(&target.ids)?;
    let trace = model::forward(params, scene, &target.ids);
    let logits = trace.positions.iter().map(|p| p.logits.clone()).collect();
    let l = params.config.latents as usize;
    let latents = trace.positions.iter().skip(1).take(l).map(|p| p.z.clone()).collect();
    Ok(ForwardOutput { logits, latents, trace })
}

impl ForwardOutput {
    /// Backpropagates upstream gradients on logits (per position) and on the
    /// latent vectors into parameter gradients.
    pub fn backward(&self, params: &PolicyParams, dlogits: &[Option<Vec<f64>>], dlatents: Option<&[Vec<f64>]>) -> ParamSet {
        let l = params.config.latents as usize;
        let mut dz: Vec<Option<Vec<f64>>> = alloc::vec![None; self.trace.positions.len()];
        if let Some(dl) = dlatents {
            for (i, g) in dl.iter().enumerate().take(l) {
                if 1 + i < dz.len() {
                    dz[1 + i] = Some(g.clone());
                }
            }
        }
        model::backward(params, &self.trace, dlogits, &dz)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Decoding {
    /// Argmax at every step (lowest id on ties).
    Greedy,
    Temperature(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    /// Full sequence including `BOS` and the latent prefix. `logprobs` holds
    /// untempered log-probabilities; prefix tokens carry 0.
    pub tokens: TokenSequence,
    /// Log-probabilities under the sampling distribution.
    pub sampling_logprobs: Vec<f64>,
    pub parsed: Result<ParsedDetections, FormatError>,
    pub latents: Vec<Vec<f64>>,
}

impl Rollout {
    /// Index of the first generated token.
    pub fn first_generated(&self, config: &ModelConfig) -> usize {
        1 + config.latents as usize
    }

    pub fn format_ok(&self) -> bool {
        self.parsed.is_ok()
    }
}

fn log_softmax_at(logits: &[f64], i: usize) -> f64 {
    let mut p = logits.to_vec();
    let lse = math::softmax_in_place(&mut p);
    logits[i] - lse
}

/// Picks the next token id and returns it with its log-probability under
/// the sampling distribution.
pub(crate) fn select_token<R: Rng>(logits: &[f64], decoding: Decoding, rng: &mut R) -> (usize, f64) {
    match decoding {
        Decoding::Greedy => {
            let mut best = 0;
            for (i, &z) in logits.iter().enumerate() {
                if z > logits[best] {
                    best = i;
                }
            }
            (best, log_softmax_at(logits, best))
        }
        Decoding::Temperature(temp) => {
            let mut p: Vec<f64> = logits.iter().map(|z| z / temp).collect();
            math::softmax_in_place(&mut p);
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let mut pick = p.len() - 1;
            for (i, &pi) in p.iter().enumerate() {
                acc += pi;
                if u < acc {
                    pick = i;
                    break;
                }
            }
            (pick, math::ln(p[pick]))
        }
    }
}

/// Autoregressive sampling after `BOS` and the latent prefix, stopping at
/// `EOS` or `max_len`.
pub fn sample_rollout(params: &PolicyParams, scene: &Scene, decoding: Decoding, seed: u64) -> Result<Rollout, PolicyError> {
    params.check_scene(scene)?;
    let cfg = &params.config;
    let vocab = cfg.vocabulary();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ctx = model::scene_context(params, scene);
    let mut cache = model::TokenCache::default();
    let mut tracker = model::InputTracker::new();

    let prefix = vocab.prefix();
    let mut ids: Vec<TokenId> = Vec::with_capacity(cfg.max_len);
    let mut logprobs = Vec::with_capacity(cfg.max_len);
    let mut sampling_logprobs = Vec::with_capacity(cfg.max_len);
    let mut latents = Vec::with_capacity(cfg.latents as usize);
    let mut last = None;
    for (i, &tok) in prefix.iter().enumerate() {
        let pt = model::position_forward(params, &ctx, &mut cache, tracker.push(cfg, tok));
        if i > 0 {
            latents.push(pt.z.clone());
        }
        ids.push(tok);
        logprobs.push(0.0);
        sampling_logprobs.push(0.0);
        last = Some(pt.logits);
    }
    while ids.len() < cfg.max_len {
        let logits = last.take().expect("prefix is non-empty");
        let (next, slp) = select_token(&logits, decoding, &mut rng);
        sampling_logprobs.push(slp);
        logprobs.push(log_softmax_at(&logits, next));
        let tok = next as TokenId;
        ids.push(tok);
        if tok == vocab.eos() || ids.len() == cfg.max_len {
            break;
        }
        let pt = model::position_forward(params, &ctx, &mut cache, tracker.push(cfg, tok));
        last = Some(pt.logits);
    }
    let tokens = TokenSequence { ids, logprobs: Some(logprobs) };
    let parsed = parse_sequence(&tokens, scene.width, scene.height, &vocab);
    Ok(Rollout { tokens, sampling_logprobs, parsed, latents })
}

/// Untempered per-token log-probabilities of a fixed sequence; prefix
/// positions (`BOS` and latents) score 0, matching [`sample_rollout`].
pub fn logprob_of(params: &PolicyParams, scene: &Scene, tokens: &TokenSequence) -> Result<Vec<f64>, PolicyError> {
    let out = forward_teacher_forced(params, scene, tokens)?;
    let start = 1 + params.config.latents as usize;
    let mut lp = alloc::vec![0.0; tokens.ids.len()];
    for n in start..tokens.ids.len() {
        lp[n] = log_softmax_at(&out.logits[n - 1], tokens.ids[n] as usize);
    }
    Ok(lp)
}

#[cfg(test)]
mod tests;
