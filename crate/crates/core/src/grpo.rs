//! Group-relative reinforcement fine-tuning.
//!
//! Each step samples a group of rollouts per scene from the current policy,
//! scores them, standardizes the rewards within the group and takes one
//! clipped-surrogate ascent step. Sampling and the update use the same
//! snapshot, so importance ratios are exactly 1 at update time; the clip is
//! still applied through [`surrogate_coefficient`].

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::exec::Executor;
use crate::math;
use crate::policy::{forward_teacher_forced, sample_rollout, AdamW, Decoding, ParamSet, PolicyParams, Rollout};
use crate::reward::{rollout_reward, MatchResult, RewardBreakdown, RewardConfig};
use crate::scene::Scene;
use crate::seed::derive_seed;
use crate::train::{clip_grad_norm, TrainError};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const SCENE_STREAM: u64 = 0x4f7;
const ROLLOUT_STREAM: u64 = 0x4f8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GrpoError {
    GroupTooSmall(usize),
    /// All rewards in the group are identical.
    ZeroStd,
    /// A format-valid rollout was passed without its match result.
    MissingMatch {
        rollout: usize,
    },
}

impl fmt::Display for GrpoError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GrpoError::GroupTooSmall(g) => write!(f, "group of {g} rollouts, need at least 2"),
            GrpoError::ZeroStd => f.write_str("group rewards have zero standard deviation"),
            GrpoError::MissingMatch { rollout } => write!(f, "rollout {rollout} parsed but has no match result"),
        }
    }
}

impl core::error::Error for GrpoError {}

/// Which tokens of a predicted point receive the shaped advantage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ShapingScope {
    #[default]
    Coordinates,
    /// The two coordinate tokens plus the enclosing brackets and inner
    /// separator.
    WholePoint,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RftConfig {
    pub group_size: usize,
    /// Scenes per step.
    pub scenes_per_step: usize,
    pub epsilon: f64,
    /// Groups whose reward std is below `delta` are dropped.
    pub delta: f64,
    pub beta: f64,
    pub temperature: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub steps: usize,
    pub kl_coeff: f64,
    pub filter_low_variance: bool,
    pub shape_advantages: bool,
    pub scope: ShapingScope,
    pub reward: RewardConfig,
}

impl Default for RftConfig {
    fn default() -> Self {
        Self {
            group_size: 8,
            scenes_per_step: 8,
            epsilon: 0.2,
            delta: 0.01,
            beta: 0.5,
            temperature: 1.2,
            lr: 5e-4,
            weight_decay: 0.0,
            grad_clip: 1.0,
            steps: 200,
            kl_coeff: 0.0,
            filter_low_variance: true,
            shape_advantages: true,
            scope: ShapingScope::Coordinates,
            reward: RewardConfig::default(),
        }
    }
}

impl RftConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.group_size < 2 {
            return Err(TrainError::InvalidConfig("group size must be at least 2"));
        }
        if self.scenes_per_step == 0 {
            return Err(TrainError::InvalidConfig("scenes_per_step must be positive"));
        }
        if !(self.epsilon > 0.0) {
            return Err(TrainError::InvalidConfig("epsilon must be positive"));
        }
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return Err(TrainError::InvalidConfig("beta must lie in (0, 1)"));
        }
        if !(self.delta >= 0.0) {
            return Err(TrainError::InvalidConfig("delta must be non-negative"));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(TrainError::InvalidConfig("temperature must be positive"));
        }
        if !(self.lr > 0.0) || !(self.kl_coeff >= 0.0) || !(self.grad_clip >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(TrainError::InvalidConfig("lr must be positive; kl_coeff, grad_clip and weight_decay non-negative"));
        }
        if !(self.reward.r_thresh > 0.0) || !(self.reward.gamma >= 0.0) {
            return Err(TrainError::InvalidConfig("r_thresh must be positive and gamma non-negative"));
        }
        Ok(())
    }
}

/// `(r - mean) / std` with the population standard deviation.
pub fn compute_advantages(rewards: &[f64]) -> Result<Vec<f64>, GrpoError> {
    if rewards.len() < 2 {
        return Err(GrpoError::GroupTooSmall(rewards.len()));
    }
    let (mean, std) = math::mean_std(rewards);
    if std == 0.0 {
        return Err(GrpoError::ZeroStd);
    }
    Ok(rewards.iter().map(|r| (r - mean) / std).collect())
}

/// Population standard deviation of a reward group.
pub fn reward_std(rewards: &[f64]) -> f64 {
    math::mean_std(rewards).1
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FilterOutcome {
    /// Indices of the groups that survive, in input order.
    pub retained: Vec<usize>,
    pub filtered: usize,
}

/// Keeps a group iff its reward std is at least `delta`.
pub fn lvgf_filter(groups: &[Vec<f64>], delta: f64) -> FilterOutcome {
    let retained: Vec<usize> = groups.iter().enumerate().filter(|(_, g)| reward_std(g) >= delta && reward_std(g) > 0.0).map(|(i, _)| i).collect();
    FilterOutcome { filtered: groups.len() - retained.len(), retained }
}

/// Per-token advantages for one rollout (same length as its token sequence).
///
/// A point's tokens get `beta * advantage` when the advantage is positive and
/// the point is a false positive, or negative and the point is a true
/// positive. Every other token, and every token of a rollout that failed to
/// parse, carries the plain advantage.
pub fn fgas_shape(advantage: f64, rollout: &Rollout, matches: Option<&MatchResult>, beta: f64, scope: ShapingScope) -> Result<Vec<f64>, GrpoError> {
    let mut out = vec![advantage; rollout.tokens.ids.len()];
    let parsed = match &rollout.parsed {
        Ok(p) => p,
        Err(_) => return Ok(out),
    };
    let m = matches.ok_or(GrpoError::MissingMatch { rollout: 0 })?;
    for (k, span) in parsed.token_spans.iter().enumerate() {
        let tp = m.is_tp(k);
        if (advantage > 0.0 && !tp) || (advantage < 0.0 && tp) {
            let shaped = beta * advantage;
            match scope {
                ShapingScope::Coordinates => {
                    out[span.start + 1] = shaped;
                    out[span.start + 3] = shaped;
                }
                ShapingScope::WholePoint => out[span.clone()].iter_mut().for_each(|a| *a = shaped),
            }
        }
    }
    Ok(out)
}

/// `min(ratio * A, clip(ratio, 1 - eps, 1 + eps) * A)`.
pub fn clipped_surrogate(ratio: f64, advantage: f64, epsilon: f64) -> f64 {
    let clipped = ratio.clamp(1.0 - epsilon, 1.0 + epsilon);
    (ratio * advantage).min(clipped * advantage)
}

/// Derivative of the per-token objective with respect to `log pi`.
///
/// The clipped branch has zero gradient. The KL term uses the
/// `ratio^-1 + ln ratio - 1` estimator, whose gradient vanishes at ratio 1.
pub fn surrogate_coefficient(ratio: f64, advantage: f64, epsilon: f64, kl_coeff: f64) -> f64 {
    let unclipped = ratio * advantage;
    let clipped = ratio.clamp(1.0 - epsilon, 1.0 + epsilon) * advantage;
    let pg = if unclipped <= clipped { unclipped } else { 0.0 };
    pg - kl_coeff * (1.0 - 1.0 / ratio)
}

/// Rewards and advantages of one scene's rollouts.
#[derive(Debug, Clone, PartialEq)]
pub struct Group {
    pub scene: usize,
    pub rollouts: Vec<Rollout>,
    pub rewards: Vec<RewardBreakdown>,
    pub matches: Vec<Option<MatchResult>>,
    pub reward_mean: f64,
    pub reward_std: f64,
    /// All zeros when the group is filtered.
    pub advantages: Vec<f64>,
    pub filtered: bool,
}

impl Group {
    pub fn totals(&self) -> Vec<f64> {
        self.rewards.iter().map(|r| r.r_total).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GrpoStepReport {
    pub mean_reward: f64,
    pub filtered_fraction: f64,
    pub format_failure_rate: f64,
    /// Over rollouts of retained groups; 0 when every group was filtered.
    pub mean_abs_advantage: f64,
    pub segmenter_calls: usize,
    pub mean_length: f64,
    pub grad_norm: f64,
    pub updated: bool,
}

/// Distinct training scenes for `step` plus the seed for its rollouts. Both
/// depend only on `(seed, step)`.
pub fn rft_batch(train: &[Scene], cfg: &RftConfig, seed: u64, step: u64) -> (Vec<Scene>, u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, SCENE_STREAM, step));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let take = cfg.scenes_per_step.min(train.len());
    let (picked, _) = order.partial_shuffle(&mut rng, take);
    (picked.iter().map(|&i| train[i].clone()).collect(), derive_seed(seed, ROLLOUT_STREAM, step))
}

/// Per-rollout stream seed derived from a step seed.
pub fn rollout_seed(step_seed: u64, scene: usize, member: usize) -> u64 {
    crate::seed::derive_seed(step_seed, scene as u64, member as u64)
}

/// Samples and scores a group for every scene.
pub fn collect_groups<E: Executor>(params: &PolicyParams, scenes: &[Scene], cfg: &RftConfig, seed: u64, exec: &E) -> Result<Vec<Group>, TrainError> {
    let g = cfg.group_size;
    let scored = exec.map_indexed(scenes.len() * g, &|i| {
        let (s, k) = (i / g, i % g);
        sample_rollout(params, &scenes[s], Decoding::Temperature(cfg.temperature), rollout_seed(seed, s, k)).map(|r| {
            let (rew, m) = rollout_reward(&r, &scenes[s], &cfg.reward);
            (r, rew, m)
        })
    });
    let mut groups = Vec::with_capacity(scenes.len());
    let mut iter = scored.into_iter();
    for s in 0..scenes.len() {
        let mut rollouts = Vec::with_capacity(g);
        let mut rewards = Vec::with_capacity(g);
        let mut matches = Vec::with_capacity(g);
        for _ in 0..g {
            let (r, rew, m) = iter.next().expect("one result per rollout")?;
            rollouts.push(r);
            rewards.push(rew);
            matches.push(m);
        }
        let totals: Vec<f64> = rewards.iter().map(|r| r.r_total).collect();
        let (mean, std) = math::mean_std(&totals);
        let delta = if cfg.filter_low_variance { cfg.delta } else { 0.0 };
        let filtered = !lvgf_filter(core::slice::from_ref(&totals), delta).retained.contains(&0);
        let advantages = if filtered { vec![0.0; g] } else { compute_advantages(&totals).expect("std checked by filter") };
        groups.push(Group { scene: s, rollouts, rewards, matches, reward_mean: mean, reward_std: std, advantages, filtered });
    }
    Ok(groups)
}

/// Gradient of the negated objective for one rollout, scaled by `weight`.
/// `shaped` holds one advantage per token of the rollout; tokens whose
/// advantage is zero contribute exactly nothing.
pub fn rollout_gradient(params: &PolicyParams, scene: &Scene, rollout: &Rollout, shaped: &[f64], cfg: &RftConfig, weight: f64) -> Result<ParamSet, TrainError> {
    let out = forward_teacher_forced(params, scene, &rollout.tokens)?;
    let start = rollout.first_generated(&params.config);
    let n = rollout.tokens.ids.len();
    let old = rollout.tokens.logprobs.as_ref().expect("sampled rollouts carry logprobs");
    let len = (n - start).max(1) as f64;
    let mut dlogits: Vec<Option<Vec<f64>>> = vec![None; n];
    for t in start..n {
        let mut p = out.logits[t - 1].clone();
        let lse = math::softmax_in_place(&mut p);
        let y = rollout.tokens.ids[t] as usize;
        let ratio = math::exp(out.logits[t - 1][y] - lse - old[t]);
        let c = surrogate_coefficient(ratio, shaped[t], cfg.epsilon, cfg.kl_coeff) * weight / len;
        if c == 0.0 {
            continue;
        }
        // Descent on -c * log p_y.
        p.iter_mut().for_each(|v| *v *= c);
        p[y] -= c;
        dlogits[t - 1] = Some(p);
    }
    Ok(out.backward(params, &dlogits, None))
}

/// One sampling round plus one update.
pub fn grpo_step<E: Executor>(params: &PolicyParams, opt: &mut AdamW, scenes: &[Scene], cfg: &RftConfig, seed: u64, exec: &E) -> Result<(PolicyParams, GrpoStepReport), TrainError> {
    cfg.validate()?;
    if scenes.is_empty() {
        return Err(TrainError::InvalidConfig("empty scene batch"));
    }
    let groups = collect_groups(params, scenes, cfg, seed, exec)?;
    let g = cfg.group_size;
    let total = (groups.len() * g) as f64;

    let mut work: Vec<(usize, usize, Vec<f64>)> = Vec::new();
    let (mut abs_adv, mut retained_rollouts) = (0.0, 0usize);
    for (gi, group) in groups.iter().enumerate() {
        if group.filtered {
            continue;
        }
        for k in 0..g {
            let a = group.advantages[k];
            abs_adv += a.abs();
            retained_rollouts += 1;
            let shaped = if cfg.shape_advantages {
                fgas_shape(a, &group.rollouts[k], group.matches[k].as_ref(), cfg.beta, cfg.scope).map_err(|_| TrainError::InvalidConfig("missing match result"))?
            } else {
                vec![a; group.rollouts[k].tokens.ids.len()]
            };
            work.push((gi, k, shaped));
        }
    }

    let rewards: Vec<&RewardBreakdown> = groups.iter().flat_map(|gr| gr.rewards.iter()).collect();
    let mut report = GrpoStepReport {
        mean_reward: rewards.iter().map(|r| r.r_total).sum::<f64>() / total,
        filtered_fraction: groups.iter().filter(|gr| gr.filtered).count() as f64 / groups.len() as f64,
        format_failure_rate: rewards.iter().filter(|r| !r.format_ok).count() as f64 / total,
        mean_abs_advantage: if retained_rollouts > 0 { abs_adv / retained_rollouts as f64 } else { 0.0 },
        segmenter_calls: rewards.iter().filter(|r| r.segmenter_called).count(),
        mean_length: groups.iter().flat_map(|gr| gr.rollouts.iter()).map(|r| r.tokens.ids.len() as f64).sum::<f64>() / total,
        grad_norm: 0.0,
        updated: false,
    };
    if work.is_empty() {
        return Ok((params.bumped(), report));
    }

    let grads = exec.map_indexed(work.len(), &|i| {
        let (gi, k, ref shaped) = work[i];
        let group = &groups[gi];
        rollout_gradient(params, &scenes[group.scene], &group.rollouts[k], shaped, cfg, 1.0 / total)
    });
    let mut sum = ParamSet::zeros_like(&params.set);
    for gr in grads {
        sum.add_assign(&gr?);
    }
    if !sum.all_finite() {
        return Err(TrainError::NonFinite { step: opt.step });
    }
    report.grad_norm = clip_grad_norm(&mut sum, cfg.grad_clip);
    let next = params.update(&sum, opt, cfg.lr, cfg.weight_decay)?;
    report.updated = true;
    Ok((next, report))
}
