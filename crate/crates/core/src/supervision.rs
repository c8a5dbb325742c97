//! Supervised fine-tuning losses.
//!
//! Coordinate targets are replaced by a Gaussian over neighbouring bins so
//! that near misses cost less than distant ones; structural targets stay
//! one-hot. The mask loss (BCE + Dice on logistic probabilities) trains the
//! latent tokens through the frozen mask decoder.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::math;
use crate::raster::Raster;
use crate::tokenizer::{TokenId, Vocabulary};

/// Dice smoothing constant.
pub const DICE_SMOOTH: f64 = 1.0;

#[derive(Debug, Clone, PartialEq)]
pub struct SoftLabel {
    pub probs: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub ntp: f64,
    pub covt: f64,
    pub total: f64,
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LossError {
    LengthMismatch { logits: usize, targets: usize },
    VocabularyMismatch { expected: usize, got: usize },
    ShapeMismatch,
    UnknownTarget(TokenId),
}

impl fmt::Display for LossError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LossError::LengthMismatch { logits, targets } => {
                write!(f, "{logits} logit rows for {targets} targets")
            }
            LossError::VocabularyMismatch { expected, got } => {
                write!(f, "logit row has width {got}, vocabulary has {expected}")
            }
            LossError::ShapeMismatch => f.write_str("prediction and mask rasters differ in shape"),
            LossError::UnknownTarget(id) => write!(f, "target id {id} is not in the vocabulary"),
        }
    }
}

impl core::error::Error for LossError {}

/// `probs[k] ∝ exp(-(k - target)^2 / (2 sigma^2))` over the `bins` coordinate
/// bins. `sigma == 0` gives the exact one-hot vector.
pub fn soft_label(target: u32, bins: u32, sigma: f64) -> SoftLabel {
    let mut probs = vec![0.0; bins as usize];
    if sigma <= 0.0 {
        probs[target as usize] = 1.0;
        return SoftLabel { probs };
    }
    let denom = 2.0 * sigma * sigma;
    for (k, p) in probs.iter_mut().enumerate() {
        let d = k as f64 - target as f64;
        *p = math::exp(-d * d / denom);
    }
    let z: f64 = probs.iter().sum();
    for p in &mut probs {
        *p /= z;
    }
    SoftLabel { probs }
}

/// Full-vocabulary target distribution for one position.
pub fn target_distribution(target: TokenId, vocab: &Vocabulary, sigma: f64) -> Result<Vec<f64>, LossError> {
    let v = vocab.size();
    if target as usize >= v {
        return Err(LossError::UnknownTarget(target));
    }
    let mut dist = vec![0.0; v];
    if vocab.is_coord(target) {
        let s = soft_label(target, vocab.bins(), sigma);
        dist[..s.probs.len()].copy_from_slice(&s.probs);
    } else {
        dist[target as usize] = 1.0;
    }
    Ok(dist)
}

/// Cross-entropy `-sum_k s_k ln softmax(z)_k`; returns the loss and
/// `dL/dz = softmax(z) - s`.
pub fn soft_cross_entropy(logits: &[f64], target: &[f64]) -> (f64, Vec<f64>) {
    let mut p = logits.to_vec();
    let lse = math::softmax_in_place(&mut p);
    let mut loss = 0.0;
    for (z, s) in logits.iter().zip(target) {
        if *s > 0.0 {
            loss -= s * (z - lse);
        }
    }
    for (pi, s) in p.iter_mut().zip(target) {
        *pi -= s;
    }
    (loss, p)
}

/// Soft-label NTP loss averaged over all supervised positions.
///
/// `logits` holds one row per target. The returned gradient has the same
/// layout and already includes the `1 / |T|` factor.
pub fn soft_ntp_loss(logits: &[Vec<f64>], targets: &[TokenId], vocab: &Vocabulary, sigma: f64) -> Result<(f64, Vec<Vec<f64>>), LossError> {
    if logits.len() != targets.len() {
        return Err(LossError::LengthMismatch { logits: logits.len(), targets: targets.len() });
    }
    if targets.is_empty() {
        return Ok((0.0, Vec::new()));
    }
    let scale = 1.0 / targets.len() as f64;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(targets.len());
    for (row, &t) in logits.iter().zip(targets) {
        if row.len() != vocab.size() {
            return Err(LossError::VocabularyMismatch { expected: vocab.size(), got: row.len() });
        }
        let dist = target_distribution(t, vocab, sigma)?;
        let (l, mut g) = soft_cross_entropy(row, &dist);
        total += l;
        for gi in &mut g {
            *gi *= scale;
        }
        grads.push(g);
    }
    Ok((total * scale, grads))
}

/// Mean BCE plus Dice loss of `sigmoid(logits)` against a binary mask.
/// Returns the loss and its gradient with respect to the logits.
pub fn covt_loss(pred_logits: &[f64], gt: &Raster) -> Result<(f64, Vec<f64>), LossError> {
    let n = pred_logits.len();
    if n != gt.width() * gt.height() {
        return Err(LossError::ShapeMismatch);
    }
    let m = gt.bits();
    let p: Vec<f64> = pred_logits.iter().map(|&z| math::sigmoid(z)).collect();
    let inv_n = 1.0 / n as f64;

    let mut bce = 0.0;
    let mut inter = 0.0;
    let mut sum_p = 0.0;
    let mut sum_m = 0.0;
    for i in 0..n {
        let mi = if m[i] { 1.0 } else { 0.0 };
        bce += math::softplus(pred_logits[i]) - mi * pred_logits[i];
        inter += p[i] * mi;
        sum_p += p[i];
        sum_m += mi;
    }
    bce *= inv_n;
    let num = 2.0 * inter + DICE_SMOOTH;
    let den = sum_p + sum_m + DICE_SMOOTH;
    let dice = 1.0 - num / den;

    let grad = (0..n)
        .map(|i| {
            let mi = if m[i] { 1.0 } else { 0.0 };
            let d_bce = (p[i] - mi) * inv_n;
            let d_dice_dp = -(2.0 * mi * den - num) / (den * den);
            d_bce + d_dice_dp * p[i] * (1.0 - p[i])
        })
        .collect();
    Ok((bce + dice, grad))
}

pub fn sft_loss(ntp: f64, covt: f64, alpha: f64) -> LossReport {
    let total = if alpha == 0.0 { ntp } else { ntp + alpha * covt };
    LossReport { ntp, covt, total, alpha }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
    }

    #[test]
    fn soft_label_examples() {
        let s = soft_label(3, 7, 0.0);
        assert_eq!(s.probs, vec![0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]);
        let s = soft_label(2, 5, 1.0);
        let want = [0.0545, 0.2442, 0.4026, 0.2442, 0.0545];
        for (a, b) in s.probs.iter().zip(want) {
            assert!((a - b).abs() < 1e-4, "{a} vs {b}");
        }
        for sigma in [0.3, 1.0, 2.5, 10.0] {
            let s = soft_label(2, 5, sigma);
            assert_eq!(s.probs[1], s.probs[3]);
            assert_eq!(s.probs[0], s.probs[4]);
            assert!((s.probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn soft_label_unimodal_and_symmetric() {
        let s = soft_label(10, 40, 2.0);
        let mode = s.probs.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        assert_eq!(mode, 10);
        for k in 0..10 {
            assert!(s.probs[k] <= s.probs[k + 1]);
            assert_eq!(s.probs[10 - k], s.probs[10 + k]);
        }
        for k in 10..39 {
            assert!(s.probs[k] >= s.probs[k + 1]);
        }
    }

    #[test]
    fn uniform_logits_cost_ln_v() {
        let (l, _) = soft_cross_entropy(&[0.3; 4], &[0.0, 1.0, 0.0, 0.0]);
        assert!((l - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn ntp_rejects_length_mismatch() {
        let v = Vocabulary::new(4, 0).unwrap();
        let logits = vec![vec![0.0; v.size()]; 2];
        assert!(matches!(soft_ntp_loss(&logits, &[1], &v, 1.0), Err(LossError::LengthMismatch { .. })));
        assert!(matches!(soft_ntp_loss(&[vec![0.0; 3]], &[1], &v, 1.0), Err(LossError::VocabularyMismatch { .. })));
    }

    #[test]
    fn ntp_gradient_matches_finite_differences() {
        let v = Vocabulary::new(12, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let targets = [3u32, v.sep(), 11, v.rbrack(), v.eos(), 0];
        let logits: Vec<Vec<f64>> = targets.iter().map(|_| (0..v.size()).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect();
        for sigma in [0.0, 0.7, 1.0, 3.0] {
            let (_, grad) = soft_ntp_loss(&logits, &targets, &v, sigma).unwrap();
            let h = 1e-4;
            for r in 0..logits.len() {
                for c in 0..v.size() {
                    let mut plus = logits.clone();
                    plus[r][c] += h;
                    let mut minus = logits.clone();
                    minus[r][c] -= h;
                    let fd = (soft_ntp_loss(&plus, &targets, &v, sigma).unwrap().0 - soft_ntp_loss(&minus, &targets, &v, sigma).unwrap().0) / (2.0 * h);
                    assert!(rel_err(grad[r][c], fd) < 1e-4, "sigma {sigma} [{r},{c}] {} vs {fd}", grad[r][c]);
                }
            }
        }
    }

    #[test]
    fn hard_gradient_is_asymmetric() {
        let v = Vocabulary::new(16, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let t: u32 = rng.gen_range(0..16);
            let row: Vec<f64> = (0..v.size()).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let (_, g) = soft_ntp_loss(core::slice::from_ref(&row), &[t], &v, 0.0).unwrap();
            let mut p = row.clone();
            math::softmax_in_place(&mut p);
            for i in 0..v.size() {
                let want = p[i] - if i == t as usize { 1.0 } else { 0.0 };
                assert!((g[0][i] - want).abs() < 1e-9);
                if i == t as usize {
                    assert!(g[0][i] < 0.0);
                } else {
                    assert!(g[0][i] > 0.0);
                }
            }
        }
    }

    #[test]
    fn soft_loss_converges_to_hard_and_helps_near_misses() {
        let v = Vocabulary::new(20, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let targets: Vec<u32> = (0..8).map(|_| rng.gen_range(0..20)).collect();
        let logits: Vec<Vec<f64>> = targets.iter().map(|_| (0..v.size()).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect();
        let soft = soft_ntp_loss(&logits, &targets, &v, 1e-6).unwrap().0;
        let hard = soft_ntp_loss(&logits, &targets, &v, 0.0).unwrap().0;
        assert!((soft - hard).abs() < 1e-6);

        // prediction concentrated one bin to the right of the target
        let mut row = vec![-4.0; v.size()];
        row[11] = 4.0;
        let soft = soft_ntp_loss(&[row.clone()], &[10], &v, 1.0).unwrap().0;
        let hard = soft_ntp_loss(&[row], &[10], &v, 0.0).unwrap().0;
        assert!(soft < hard);
        assert!(soft >= 0.0 && hard >= 0.0);
    }

    #[test]
    fn covt_limits() {
        let mut gt = Raster::new(8, 8);
        for i in 2..6 {
            for j in 1..5 {
                gt.set(i, j, true);
            }
        }
        let perfect: Vec<f64> = gt.bits().iter().map(|&b| if b { 20.0 } else { -20.0 }).collect();
        let (l, _) = covt_loss(&perfect, &gt).unwrap();
        assert!(l < 1e-6, "{l}");
        let empty = Raster::new(8, 8);
        let (l, _) = covt_loss(&[-20.0; 64], &empty).unwrap();
        assert!(l < 1e-6, "{l}");
        assert!(matches!(covt_loss(&[0.0; 63], &empty), Err(LossError::ShapeMismatch)));
    }

    #[test]
    fn covt_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let bits: Vec<bool> = (0..64).map(|_| rng.gen_bool(0.4)).collect();
        let gt = Raster::from_bits(8, 8, bits).unwrap();
        let z: Vec<f64> = (0..64).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let (_, g) = covt_loss(&z, &gt).unwrap();
        let h = 1e-4;
        for i in 0..64 {
            let mut zp = z.clone();
            zp[i] += h;
            let mut zm = z.clone();
            zm[i] -= h;
            let fd = (covt_loss(&zp, &gt).unwrap().0 - covt_loss(&zm, &gt).unwrap().0) / (2.0 * h);
            assert!(rel_err(g[i], fd) < 1e-4, "{i}: {} vs {fd}", g[i]);
        }
    }

    #[test]
    fn sft_weighting() {
        assert_eq!(sft_loss(0.5, 123.0, 0.0).total, 0.5);
        assert_eq!(sft_loss(0.5, 0.25, 1.0).total, 0.75);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let (n, c, a) = (rng.gen_range(0.0..5.0), rng.gen_range(0.0..2.0), rng.gen_range(0.0..3.0));
            let r = sft_loss(n, c, a);
            assert_eq!(r.total, n + a * c);
        }
    }
}
