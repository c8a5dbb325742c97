//! AdamW with decoupled weight decay.

use super::params::ParamSet;
use super::PolicyError;
use crate::math;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Optimizer state: first and second moments plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub m: ParamSet,
    pub v: ParamSet,
    pub step: u64,
}

/// Biases, gains and embedding tables are exempt from weight decay.
fn decays(name: &str) -> bool {
    !(name.ends_with("_b") || name.ends_with("_g") || name.contains("emb") || name.contains("pos") || name.starts_with("null") || name.contains("bias"))
}

impl AdamW {
    pub fn new(params: &ParamSet, config: AdamWConfig) -> Self {
        Self { config, m: ParamSet::zeros_like(params), v: ParamSet::zeros_like(params), step: 0 }
    }

    /// Applies one update in place. Rejects mismatched or non-finite
    /// gradients without touching anything.
    pub fn apply(&mut self, params: &mut ParamSet, grads: &ParamSet, lr: f64, weight_decay: f64) -> Result<(), PolicyError> {
        if !params.same_layout(grads) || !params.same_layout(&self.m) {
            return Err(PolicyError::ShapeMismatch);
        }
        if !grads.all_finite() {
            return Err(PolicyError::NonFiniteGradient);
        }
        self.step += 1;
        let AdamWConfig { beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - libm::pow(beta1, self.step as f64);
        let bc2 = 1.0 - libm::pow(beta2, self.step as f64);
        for (((p, g), m), v) in params.tensors.iter_mut().zip(&grads.tensors).zip(&mut self.m.tensors).zip(&mut self.v.tensors) {
            let wd = if decays(&p.name) { weight_decay } else { 0.0 };
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m.data[i] = beta1 * m.data[i] + (1.0 - beta1) * gi;
                v.data[i] = beta2 * v.data[i] + (1.0 - beta2) * gi * gi;
                let mhat = m.data[i] / bc1;
                let vhat = v.data[i] / bc2;
                p.data[i] -= lr * (mhat / (math::sqrt(vhat) + eps) + wd * p.data[i]);
            }
        }
        Ok(())
    }
}

impl super::PolicyParams {
    /// Returns the updated snapshot with its version bumped.
    pub fn update(&self, grads: &ParamSet, opt: &mut AdamW, lr: f64, weight_decay: f64) -> Result<super::PolicyParams, PolicyError> {
        let mut next = self.clone();
        opt.apply(&mut next.set, grads, lr, weight_decay)?;
        next.version += 1;
        Ok(next)
    }

    /// Version bump without touching any value (used when every group of a
    /// step was filtered out).
    pub fn bumped(&self) -> super::PolicyParams {
        let mut next = self.clone();
        next.version += 1;
        next
    }
}

#[cfg(test)]
mod tests {
    use super::super::params::Tensor;
    use super::*;
    use alloc::vec;

    #[test]
    fn zero_gradient_leaves_values() {
        let mut p = ParamSet { tensors: vec![Tensor::filled("w", &[3], 0.7)] };
        let before = p.clone();
        let mut opt = AdamW::new(&p, AdamWConfig::default());
        opt.apply(&mut p, &ParamSet::zeros_like(&before), 0.1, 0.0).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn descends_on_square() {
        let mut p = ParamSet { tensors: vec![Tensor::filled("w", &[1], 1.0)] };
        let mut opt = AdamW::new(&p, AdamWConfig::default());
        let g = ParamSet { tensors: vec![Tensor::filled("w", &[1], 2.0 * p.tensors[0].data[0])] };
        opt.apply(&mut p, &g, 0.1, 0.0).unwrap();
        assert!(p.tensors[0].data[0].abs() < 1.0);
    }

    #[test]
    fn rejects_bad_gradients() {
        let mut p = ParamSet { tensors: vec![Tensor::filled("w", &[2], 1.0)] };
        let before = p.clone();
        let mut opt = AdamW::new(&p, AdamWConfig::default());
        let nan = ParamSet { tensors: vec![Tensor::filled("w", &[2], f64::NAN)] };
        assert_eq!(opt.apply(&mut p, &nan, 0.1, 0.0), Err(PolicyError::NonFiniteGradient));
        let wrong = ParamSet { tensors: vec![Tensor::filled("w", &[3], 1.0)] };
        assert_eq!(opt.apply(&mut p, &wrong, 0.1, 0.0), Err(PolicyError::ShapeMismatch));
        assert_eq!(p, before);
        assert_eq!(opt.step, 0);
    }
}
