//! Prompt-conditioned mask decoder.
//!
//! The decoder has its own patch encoder. Each patch queries the latent
//! vectors (plus a learned null slot) with one cross-attention readout, and a
//! per-pixel head turns the result into mask logits. It is trained once
//! against an oracle that maps ground-truth centroids to latents, then
//! frozen; afterwards only gradients with respect to the latents are used.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::linalg::{add_assign, axpy, dot, outer_acc, vec_mat, vec_mat_t_acc};
use super::optim::{AdamW, AdamWConfig};
use super::params::{ParamSet, Tensor};
use super::{model, PolicyError};
use crate::math;
use crate::raster::Raster;
use crate::scene::{foreground_mask, generate_scene, Point, Scene, SceneConfig};
use crate::supervision::covt_loss;

const ENC_W: usize = 0;
const ENC_B: usize = 1;
const ENC_POS: usize = 2;
const WQ: usize = 3;
const WK: usize = 4;
const WV: usize = 5;
const NULL_K: usize = 6;
const NULL_V: usize = 7;
const PIX_W: usize = 8;
const PIX_B: usize = 9;
const PIX_INT: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecoderConfig {
    pub hidden: usize,
    pub latents: usize,
    pub patch: usize,
    pub scene_width: usize,
    pub scene_height: usize,
}

impl DecoderConfig {
    /// Decoder whose latent shape matches the policy's latent prefix.
    pub fn for_model(model: &super::ModelConfig) -> Self {
        Self { hidden: model.hidden, latents: model.latents as usize, patch: model.patch, scene_width: model.scene_width, scene_height: model.scene_height }
    }

    pub fn num_patches(&self) -> usize {
        (self.scene_width / self.patch) * (self.scene_height / self.patch)
    }

    fn grid_width(&self) -> usize {
        self.scene_width / self.patch
    }
}

/// Trainable decoder (used only during pre-training).
#[derive(Debug, Clone, PartialEq)]
pub struct MaskDecoder {
    pub config: DecoderConfig,
    pub set: ParamSet,
}

/// Decoder with immutable weights and a checksum taken at freeze time.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenMaskDecoder {
    inner: MaskDecoder,
    checksum: u64,
}

/// Intermediate values of one decode, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct DecodeTrace {
    patches: Vec<Vec<f64>>,
    g: Vec<Vec<f64>>,
    q: Vec<Vec<f64>>,
    keys: Vec<Vec<f64>>,
    vals: Vec<Vec<f64>>,
    alpha: Vec<Vec<f64>>,
    h: Vec<Vec<f64>>,
    /// Row-major `width x height` mask logits.
    pub logits: Vec<f64>,
}

impl MaskDecoder {
    pub fn init(config: DecoderConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.hidden;
        let pd = config.patch * config.patch;
        let np = config.num_patches();
        let s = |n: usize| 1.0 / math::sqrt(n as f64);
        let tensors = vec![
            Tensor::normal("enc_w", &[pd, d], s(pd), &mut rng),
            Tensor::zeros("enc_b", &[d]),
            Tensor::normal("enc_pos", &[np, d], 0.5, &mut rng),
            Tensor::normal("dec_wq", &[d, d], s(d), &mut rng),
            Tensor::normal("dec_wk", &[d, d], s(d), &mut rng),
            Tensor::normal("dec_wv", &[d, d], s(d), &mut rng),
            Tensor::normal("null_k", &[d], 0.5, &mut rng),
            Tensor::normal("null_v", &[d], 0.5, &mut rng),
            Tensor::normal("pix_w", &[d, pd], s(d), &mut rng),
            Tensor::zeros("pix_b", &[pd]),
            Tensor::filled("pix_int", &[pd], 1.0),
        ];
        Self { config, set: ParamSet { tensors } }
    }

    pub fn from_parts(config: DecoderConfig, set: ParamSet) -> Result<Self, PolicyError> {
        if !Self::init(config, 0).set.same_layout(&set) {
            return Err(PolicyError::ShapeMismatch);
        }
        Ok(Self { config, set })
    }

    pub fn freeze(self) -> FrozenMaskDecoder {
        let checksum = self.set.checksum();
        FrozenMaskDecoder { inner: self, checksum }
    }

    fn check(&self, latents: &[Vec<f64>], scene: &Scene) -> Result<(), PolicyError> {
        let c = &self.config;
        if latents.len() != c.latents || latents.iter().any(|l| l.len() != c.hidden) {
            return Err(PolicyError::LatentCount { expected: c.latents, got: latents.len() });
        }
        if scene.width != c.scene_width || scene.height != c.scene_height {
            return Err(PolicyError::SceneShape { width: scene.width, height: scene.height });
        }
        Ok(())
    }

    pub fn decode(&self, latents: &[Vec<f64>], scene: &Scene) -> Result<DecodeTrace, PolicyError> {
        self.check(latents, scene)?;
        let c = &self.config;
        let t = &self.set.tensors;
        let d = c.hidden;
        let pd = c.patch * c.patch;
        let scale = 1.0 / math::sqrt(d as f64);
        let patches = model::patches(scene, c.patch);

        let mut keys = Vec::with_capacity(c.latents + 1);
        let mut vals = Vec::with_capacity(c.latents + 1);
        for l in latents {
            let mut k = vec![0.0; d];
            let mut v = vec![0.0; d];
            vec_mat(l, &t[WK].data, &mut k);
            vec_mat(l, &t[WV].data, &mut v);
            keys.push(k);
            vals.push(v);
        }
        keys.push(t[NULL_K].data.clone());
        vals.push(t[NULL_V].data.clone());

        let np = patches.len();
        let mut g = Vec::with_capacity(np);
        let mut q = Vec::with_capacity(np);
        let mut alpha = Vec::with_capacity(np);
        let mut h = Vec::with_capacity(np);
        let mut logits = vec![0.0; c.scene_width * c.scene_height];
        let gw = c.grid_width();
        for (p, patch) in patches.iter().enumerate() {
            let mut gp = vec![0.0; d];
            vec_mat(patch, &t[ENC_W].data, &mut gp);
            add_assign(&mut gp, &t[ENC_B].data);
            add_assign(&mut gp, &t[ENC_POS].data[p * d..(p + 1) * d]);
            let mut qp = vec![0.0; d];
            vec_mat(&gp, &t[WQ].data, &mut qp);
            let mut a: Vec<f64> = keys.iter().map(|k| dot(&qp, k) * scale).collect();
            math::softmax_in_place(&mut a);
            let mut hp = gp.clone();
            for (aj, vj) in a.iter().zip(&vals) {
                axpy(*aj, vj, &mut hp);
            }
            for x in &mut hp {
                *x = math::tanh(*x);
            }
            let mut out = vec![0.0; pd];
            vec_mat(&hp, &t[PIX_W].data, &mut out);
            let (px, py) = (p % gw, p / gw);
            for j in 0..pd {
                let (dx, dy) = (j % c.patch, j / c.patch);
                let idx = (py * c.patch + dy) * c.scene_width + px * c.patch + dx;
                logits[idx] = out[j] + t[PIX_B].data[j] + t[PIX_INT].data[j] * patch[j];
            }
            g.push(gp);
            q.push(qp);
            alpha.push(a);
            h.push(hp);
        }
        Ok(DecodeTrace { patches, g, q, keys, vals, alpha, h, logits })
    }

    /// Gradients of a loss on the mask logits with respect to the latents
    /// and, when `weights` is set, the decoder parameters.
    pub fn backward(&self, trace: &DecodeTrace, latents: &[Vec<f64>], dlogits: &[f64], weights: bool) -> (Vec<Vec<f64>>, Option<ParamSet>) {
        let c = &self.config;
        let t = &self.set.tensors;
        let d = c.hidden;
        let pd = c.patch * c.patch;
        let scale = 1.0 / math::sqrt(d as f64);
        let gw = c.grid_width();
        let nk = trace.keys.len();
        let mut dkeys = vec![vec![0.0; d]; nk];
        let mut dvals = vec![vec![0.0; d]; nk];
        let mut gset = weights.then(|| ParamSet::zeros_like(&self.set));

        for p in 0..trace.g.len() {
            let (px, py) = (p % gw, p / gw);
            let mut dout = vec![0.0; pd];
            for (j, dj) in dout.iter_mut().enumerate() {
                let (dx, dy) = (j % c.patch, j / c.patch);
                *dj = dlogits[(py * c.patch + dy) * c.scene_width + px * c.patch + dx];
            }
            let hp = &trace.h[p];
            let mut dh = vec![0.0; d];
            vec_mat_t_acc(&dout, &t[PIX_W].data, &mut dh);
            let dpre: Vec<f64> = dh.iter().zip(hp).map(|(g, h)| g * (1.0 - h * h)).collect();
            let a = &trace.alpha[p];
            let da: Vec<f64> = trace.vals.iter().map(|v| dot(&dpre, v)).collect();
            let ada: f64 = a.iter().zip(&da).map(|(x, y)| x * y).sum();
            let mut dq = vec![0.0; d];
            for j in 0..nk {
                axpy(a[j], &dpre, &mut dvals[j]);
                let ds = a[j] * (da[j] - ada) * scale;
                axpy(ds, &trace.q[p], &mut dkeys[j]);
                axpy(ds, &trace.keys[j], &mut dq);
            }
            if let Some(gs) = gset.as_mut() {
                let gt = &mut gs.tensors;
                outer_acc(hp, &dout, &mut gt[PIX_W].data);
                add_assign(&mut gt[PIX_B].data, &dout);
                for j in 0..pd {
                    gt[PIX_INT].data[j] += dout[j] * trace.patches[p][j];
                }
                outer_acc(&trace.g[p], &dq, &mut gt[WQ].data);
                let mut dg = dpre.clone();
                vec_mat_t_acc(&dq, &t[WQ].data, &mut dg);
                outer_acc(&trace.patches[p], &dg, &mut gt[ENC_W].data);
                add_assign(&mut gt[ENC_B].data, &dg);
                add_assign(&mut gt[ENC_POS].data[p * d..(p + 1) * d], &dg);
            }
        }
        let mut dlat = vec![vec![0.0; d]; latents.len()];
        for (l, lat) in latents.iter().enumerate() {
            vec_mat_t_acc(&dkeys[l], &t[WK].data, &mut dlat[l]);
            vec_mat_t_acc(&dvals[l], &t[WV].data, &mut dlat[l]);
            if let Some(gs) = gset.as_mut() {
                outer_acc(lat, &dkeys[l], &mut gs.tensors[WK].data);
                outer_acc(lat, &dvals[l], &mut gs.tensors[WV].data);
            }
        }
        if let Some(gs) = gset.as_mut() {
            add_assign(&mut gs.tensors[NULL_K].data, &dkeys[nk - 1]);
            add_assign(&mut gs.tensors[NULL_V].data, &dvals[nk - 1]);
        }
        (dlat, gset)
    }
}

impl FrozenMaskDecoder {
    pub fn config(&self) -> &DecoderConfig {
        &self.inner.config
    }

    pub fn weights(&self) -> &ParamSet {
        &self.inner.set
    }

    pub fn checksum(&self) -> u64 {
        self.checksum
    }

    /// Recomputes the weight checksum and compares it with the one recorded
    /// at freeze time.
    pub fn verify(&self) -> bool {
        self.inner.set.checksum() == self.checksum
    }

    /// Mask logits for the given latents; deterministic.
    pub fn decode_mask(&self, latents: &[Vec<f64>], scene: &Scene) -> Result<DecodeTrace, PolicyError> {
        self.inner.decode(latents, scene)
    }

    /// Gradient with respect to the latents only; the weights have no update
    /// path.
    pub fn latent_gradient(&self, trace: &DecodeTrace, latents: &[Vec<f64>], dlogits: &[f64]) -> Vec<Vec<f64>> {
        self.inner.backward(trace, latents, dlogits, false).0
    }
}

/// Linear map from a centroid heatmap (one value per patch) to latents.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleLatents {
    pub config: DecoderConfig,
    pub set: ParamSet,
}

impl OracleLatents {
    pub fn init(config: DecoderConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let np = config.num_patches();
        let out = config.latents * config.hidden;
        let set = ParamSet { tensors: vec![Tensor::normal("oracle_w", &[np, out], 0.3, &mut rng), Tensor::zeros("oracle_b", &[out])] };
        Self { config, set }
    }

    /// Gaussian bump per point at patch-centre resolution.
    pub fn heatmap(&self, points: &[Point]) -> Vec<f64> {
        let c = &self.config;
        let gw = c.grid_width();
        let s2 = 2.0 * (c.patch * c.patch) as f64;
        (0..c.num_patches())
            .map(|p| {
                let cx = ((p % gw) as f64 + 0.5) * c.patch as f64;
                let cy = ((p / gw) as f64 + 0.5) * c.patch as f64;
                points.iter().map(|q| math::exp(-((q.x - cx) * (q.x - cx) + (q.y - cy) * (q.y - cy)) / s2)).sum()
            })
            .collect()
    }

    pub fn latents(&self, points: &[Point]) -> (Vec<f64>, Vec<Vec<f64>>) {
        let heat = self.heatmap(points);
        let d = self.config.hidden;
        let mut flat = vec![0.0; self.config.latents * d];
        vec_mat(&heat, &self.set.tensors[0].data, &mut flat);
        add_assign(&mut flat, &self.set.tensors[1].data);
        (heat, flat.chunks(d).map(|c| c.to_vec()).collect())
    }

    fn backward(&self, heat: &[f64], dlat: &[Vec<f64>]) -> ParamSet {
        let mut g = ParamSet::zeros_like(&self.set);
        let flat: Vec<f64> = dlat.iter().flatten().copied().collect();
        outer_acc(heat, &flat, &mut g.tensors[0].data);
        add_assign(&mut g.tensors[1].data, &flat);
        g
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderPretrainConfig {
    pub scene: SceneConfig,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Probability that a training target keeps only a random subset of the
    /// instances (forcing the decoder to follow the prompts).
    pub subset_prob: f64,
    pub seed: u64,
    pub eval_scenes: usize,
}

impl Default for DecoderPretrainConfig {
    fn default() -> Self {
        Self { scene: SceneConfig::default(), steps: 600, batch: 8, lr: 3e-3, subset_prob: 0.5, seed: 0xdec0de, eval_scenes: 32 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderPretrainReport {
    pub final_loss: f64,
    /// Mean IoU of thresholded masks against the full foreground, using
    /// oracle latents on held-out scenes.
    pub heldout_iou: f64,
}

/// Binary mask `sigmoid(logit) > 0.5`.
pub fn threshold_mask(width: usize, height: usize, logits: &[f64]) -> Raster {
    Raster::from_bits(width, height, logits.iter().map(|&z| z > 0.0).collect()).expect("logit grid matches shape")
}

/// Jointly trains the decoder and the oracle latent producer, then freezes
/// the decoder.
pub fn pretrain_decoder(config: DecoderConfig, train: &DecoderPretrainConfig) -> Result<(FrozenMaskDecoder, OracleLatents, DecoderPretrainReport), PolicyError> {
    let mut dec = MaskDecoder::init(config, train.seed);
    let mut oracle = OracleLatents::init(config, train.seed ^ 0x5eed);
    let mut opt_d = AdamW::new(&dec.set, AdamWConfig::default());
    let mut opt_o = AdamW::new(&oracle.set, AdamWConfig::default());
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
    let mut final_loss = 0.0;
    for _ in 0..train.steps {
        let mut gd = ParamSet::zeros_like(&dec.set);
        let mut go = ParamSet::zeros_like(&oracle.set);
        let mut loss = 0.0;
        for _ in 0..train.batch {
            let scene = generate_scene(&train.scene, rng.gen()).map_err(|_| PolicyError::InvalidConfig("decoder pre-training scene config"))?;
            let keep: Vec<bool> = if rng.gen_bool(train.subset_prob) { scene.instances.iter().map(|_| rng.gen_bool(0.5)).collect() } else { vec![true; scene.instances.len()] };
            let mut target = Raster::new(scene.width, scene.height);
            let mut prompts = Vec::new();
            for (inst, &k) in scene.instances.iter().zip(&keep) {
                if k {
                    target.or_assign(&inst.mask);
                    prompts.push(inst.centroid);
                }
            }
            let (heat, lat) = oracle.latents(&prompts);
            let trace = dec.decode(&lat, &scene)?;
            let (l, dlogits) = covt_loss(&trace.logits, &target).map_err(|_| PolicyError::ShapeMismatch)?;
            loss += l;
            let (dlat, gw) = dec.backward(&trace, &lat, &dlogits, true);
            gd.add_assign(&gw.expect("weights requested"));
            go.add_assign(&oracle.backward(&heat, &dlat));
        }
        let s = 1.0 / train.batch as f64;
        gd.scale(s);
        go.scale(s);
        opt_d.apply(&mut dec.set, &gd, train.lr, 0.0)?;
        opt_o.apply(&mut oracle.set, &go, train.lr, 0.0)?;
        final_loss = loss * s;
    }
    let frozen = dec.freeze();
    let heldout_iou = oracle_iou(&frozen, &oracle, &train.scene, train.seed.wrapping_add(1_000_003), train.eval_scenes)?;
    Ok((frozen, oracle, DecoderPretrainReport { final_loss, heldout_iou }))
}

/// Mean IoU of oracle-prompted masks against the foreground on fresh scenes.
pub fn oracle_iou(decoder: &FrozenMaskDecoder, oracle: &OracleLatents, scene_cfg: &SceneConfig, seed: u64, n: usize) -> Result<f64, PolicyError> {
    let mut total = 0.0;
    for i in 0..n {
        let scene = generate_scene(scene_cfg, seed.wrapping_add(i as u64)).map_err(|_| PolicyError::InvalidConfig("evaluation scene config"))?;
        let (_, lat) = oracle.latents(&scene.centroids());
        let trace = decoder.decode_mask(&lat, &scene)?;
        let pred = threshold_mask(scene.width, scene.height, &trace.logits);
        let fg = foreground_mask(&scene);
        total += if fg.is_empty() && pred.is_empty() { 1.0 } else { pred.iou(&fg) };
    }
    Ok(total / n.max(1) as f64)
}
