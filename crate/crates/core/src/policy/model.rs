//! Forward and backward passes of the policy.
//!
//! One pre-norm block over `[scene patches ∥ tokens]`: scene patches form a
//! fully visible prefix, tokens attend causally to the prefix and to earlier
//! tokens. Since there is a single block, outputs at patch positions are
//! never read, so only token positions run queries, the MLP and the head.
//!
//! Scene keys also receive a learned per-head bias indexed by the patch's
//! offset (in patch rows and columns) from the most recently emitted point,
//! with a separate table for positions that predict a y coordinate.
//!
//! At positions that predict a coordinate, head 0 doubles as a pointer: the
//! attention mass it puts on each patch column (x) or row (y) is added, in
//! log space and scaled by a learned gain, to the logits of the bins inside
//! that column or row.
//!
//! The input at token position `n` is the sum of the token embedding, an
//! absolute position embedding, a grammar-state embedding and embeddings of
//! the most recent x and y bins, all derived from `t_0..=t_n`.

use alloc::vec;
use alloc::vec::Vec;

use super::linalg::{add_assign, axpy, dot, layer_norm, layer_norm_back, outer_acc, vec_mat, vec_mat_t_acc};
use super::params::ParamSet;
use super::{ModelConfig, PolicyParams};
use crate::math;
use crate::scene::Scene;
use crate::tokenizer::{GrammarState, GrammarTracker, TokenId};

pub(crate) const TOK_EMB: usize = 0;
pub(crate) const POS_EMB: usize = 1;
pub(crate) const ROLE_EMB: usize = 2;
pub(crate) const CARRY_X: usize = 3;
pub(crate) const CARRY_Y: usize = 4;
pub(crate) const PATCH_W: usize = 5;
pub(crate) const PATCH_B: usize = 6;
pub(crate) const PATCH_POS: usize = 7;
pub(crate) const LN1_G: usize = 8;
pub(crate) const LN1_B: usize = 9;
pub(crate) const WQ: usize = 10;
pub(crate) const WK: usize = 11;
pub(crate) const WV: usize = 12;
pub(crate) const WO: usize = 13;
pub(crate) const LN2_G: usize = 14;
pub(crate) const LN2_B: usize = 15;
pub(crate) const W1: usize = 16;
pub(crate) const B1: usize = 17;
pub(crate) const W2: usize = 18;
pub(crate) const B2: usize = 19;
pub(crate) const LNF_G: usize = 20;
pub(crate) const LNF_B: usize = 21;
pub(crate) const HEAD_W: usize = 22;
pub(crate) const HEAD_B: usize = 23;
pub(crate) const REL_BIAS: usize = 24;
pub(crate) const PTR_GAIN: usize = 25;

/// Floor inside the pointer log so empty columns stay finite.
const PTR_EPS: f64 = 1e-4;

pub(crate) const TENSOR_NAMES: [&str; 26] = [
    "tok_emb",
    "pos_emb",
    "role_emb",
    "carry_x_emb",
    "carry_y_emb",
    "patch_w",
    "patch_b",
    "patch_pos",
    "ln1_g",
    "ln1_b",
    "wq",
    "wk",
    "wv",
    "wo",
    "ln2_g",
    "ln2_b",
    "mlp_w1",
    "mlp_b1",
    "mlp_w2",
    "mlp_b2",
    "lnf_g",
    "lnf_b",
    "head_w",
    "head_b",
    "rel_bias",
    "ptr_g",
];

/// Which axis a position points along, if any.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Axis {
    X,
    Y,
}

fn pointer_axis(ids: &InputIds) -> Option<Axis> {
    if ids.role == GrammarState::ExpectX.index() {
        Some(Axis::X)
    } else if ids.role == GrammarState::ExpectY.index() {
        Some(Axis::Y)
    } else {
        None
    }
}

/// Patch column (x) or row (y) containing the centre of coordinate bin `b`.
fn bin_cell(cfg: &ModelConfig, axis: Axis, b: usize) -> usize {
    let extent = match axis {
        Axis::X => cfg.scene_width,
        Axis::Y => cfg.scene_height,
    };
    let px = (b as f64 + 0.5) / cfg.bins as f64 * extent as f64;
    math::floor(px) as usize / cfg.patch
}

fn patch_cell(cfg: &ModelConfig, axis: Axis, p: usize) -> usize {
    let cols = cfg.scene_width / cfg.patch;
    match axis {
        Axis::X => p % cols,
        Axis::Y => p / cols,
    }
}

/// Pointer state kept for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct Pointer {
    pub axis: Axis,
    /// Head-0 attention mass per column or row.
    pub mass: Vec<f64>,
}

/// Relative-bias tables: one for y-predicting positions, one for the rest.
pub(crate) const BIAS_TABLES: usize = 2;

/// Number of offsets per table and head.
pub(crate) fn bias_span(cfg: &ModelConfig) -> usize {
    let (cols, rows) = (cfg.scene_width / cfg.patch, cfg.scene_height / cfg.patch);
    (2 * rows + 1) * (2 * cols + 1)
}

/// Offset into the bias tensor of head 0 for this position, plus the carry
/// point in patch coordinates (`-1` when no coordinate has been emitted).
fn bias_origin(cfg: &ModelConfig, ids: &InputIds) -> (usize, isize, isize) {
    let none = cfg.bins as usize;
    let to_patch = |bin: usize, extent: usize| -> isize {
        if bin == none {
            -1
        } else {
            let px = (bin as f64 + 0.5) / cfg.bins as f64 * extent as f64;
            (math::floor(px) as usize / cfg.patch) as isize
        }
    };
    let table = usize::from(ids.role == GrammarState::ExpectY.index());
    (table * cfg.heads * bias_span(cfg), to_patch(ids.carry_y, cfg.scene_height), to_patch(ids.carry_x, cfg.scene_width))
}

/// Index within one head's table for scene patch `p`.
fn bias_offset(cfg: &ModelConfig, cy: isize, cx: isize, p: usize) -> usize {
    let (cols, rows) = ((cfg.scene_width / cfg.patch) as isize, (cfg.scene_height / cfg.patch) as isize);
    let (pr, pc) = ((p as isize) / cols, (p as isize) % cols);
    ((pr - cy + rows) * (2 * cols + 1) + (pc - cx + cols)) as usize
}

/// Extracts the non-overlapping `patch x patch` blocks of the intensity grid.
pub(crate) fn patches(scene: &Scene, patch: usize) -> Vec<Vec<f64>> {
    let (pw, ph) = (scene.width / patch, scene.height / patch);
    let mut out = Vec::with_capacity(pw * ph);
    for py in 0..ph {
        for px in 0..pw {
            let mut v = Vec::with_capacity(patch * patch);
            for dy in 0..patch {
                let row = (py * patch + dy) * scene.width + px * patch;
                v.extend_from_slice(&scene.intensity[row..row + patch]);
            }
            out.push(v);
        }
    }
    out
}

/// Patch features plus their layer-normed keys and values.
#[derive(Debug, Clone)]
pub(crate) struct SceneContext {
    pub patches: Vec<Vec<f64>>,
    pub feats: Vec<Vec<f64>>,
    pub xhat: Vec<Vec<f64>>,
    pub inv: Vec<f64>,
    pub normed: Vec<Vec<f64>>,
    pub keys: Vec<Vec<f64>>,
    pub vals: Vec<Vec<f64>>,
}

pub(crate) fn scene_features(p: &ParamSet, cfg: &ModelConfig, patches: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let d = cfg.hidden;
    let t = &p.tensors;
    patches
        .iter()
        .enumerate()
        .map(|(i, patch)| {
            let mut f = vec![0.0; d];
            vec_mat(patch, &t[PATCH_W].data, &mut f);
            add_assign(&mut f, &t[PATCH_B].data);
            add_assign(&mut f, &t[PATCH_POS].data[i * d..(i + 1) * d]);
            f
        })
        .collect()
}

pub(crate) fn scene_context(params: &PolicyParams, scene: &Scene) -> SceneContext {
    let cfg = &params.config;
    let d = cfg.hidden;
    let t = &params.set.tensors;
    let patches = patches(scene, cfg.patch);
    let feats = scene_features(&params.set, cfg, &patches);
    let n = feats.len();
    let mut ctx = SceneContext { patches, xhat: vec![vec![0.0; d]; n], inv: vec![0.0; n], normed: vec![vec![0.0; d]; n], keys: vec![vec![0.0; d]; n], vals: vec![vec![0.0; d]; n], feats };
    for i in 0..n {
        ctx.inv[i] = layer_norm(&ctx.feats[i], &t[LN1_G].data, &t[LN1_B].data, &mut ctx.xhat[i], &mut ctx.normed[i]);
        vec_mat(&ctx.normed[i], &t[WK].data, &mut ctx.keys[i]);
        vec_mat(&ctx.normed[i], &t[WV].data, &mut ctx.vals[i]);
    }
    ctx
}

/// Indices into the embedding tables for one token position.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct InputIds {
    pub token: TokenId,
    pub pos: usize,
    pub role: usize,
    pub carry_x: usize,
    pub carry_y: usize,
}

/// Derives the per-position embedding ids for a token prefix.
pub(crate) fn input_ids(cfg: &ModelConfig, tokens: &[TokenId]) -> Vec<InputIds> {
    let vocab = cfg.vocabulary();
    let mut tracker = GrammarTracker::new();
    let none = cfg.bins as usize;
    tokens
        .iter()
        .enumerate()
        .map(|(pos, &token)| {
            let _ = tracker.push(token, &vocab);
            InputIds { token, pos, role: tracker.state().index(), carry_x: tracker.last_x().map_or(none, |b| b as usize), carry_y: tracker.last_y().map_or(none, |b| b as usize) }
        })
        .collect()
}

/// Incremental variant of [`input_ids`] used while sampling.
#[derive(Debug, Clone)]
pub(crate) struct InputTracker {
    tracker: GrammarTracker,
    pos: usize,
}

impl InputTracker {
    pub fn new() -> Self {
        Self { tracker: GrammarTracker::new(), pos: 0 }
    }

    pub fn push(&mut self, cfg: &ModelConfig, token: TokenId) -> InputIds {
        let none = cfg.bins as usize;
        let _ = self.tracker.push(token, &cfg.vocabulary());
        let ids = InputIds {
            token,
            pos: self.pos,
            role: self.tracker.state().index(),
            carry_x: self.tracker.last_x().map_or(none, |b| b as usize),
            carry_y: self.tracker.last_y().map_or(none, |b| b as usize),
        };
        self.pos += 1;
        ids
    }
}

pub(crate) fn embed(p: &ParamSet, d: usize, ids: &InputIds) -> Vec<f64> {
    let t = &p.tensors;
    let row = |k: usize, i: usize| &t[k].data[i * d..(i + 1) * d];
    let mut x = row(TOK_EMB, ids.token as usize).to_vec();
    add_assign(&mut x, row(POS_EMB, ids.pos));
    add_assign(&mut x, row(ROLE_EMB, ids.role));
    add_assign(&mut x, row(CARRY_X, ids.carry_x));
    add_assign(&mut x, row(CARRY_Y, ids.carry_y));
    x
}

/// Keys and values of the tokens processed so far.
#[derive(Debug, Clone, Default)]
pub(crate) struct TokenCache {
    pub keys: Vec<Vec<f64>>,
    pub vals: Vec<Vec<f64>>,
}

/// Everything the backward pass needs from one token position.
#[derive(Debug, Clone)]
pub(crate) struct PositionTrace {
    pub ids: InputIds,
    pub xhat1: Vec<f64>,
    pub inv1: f64,
    pub a1: Vec<f64>,
    pub q: Vec<f64>,
    /// Softmax weights, `heads x (patches + n + 1)`.
    pub attn: Vec<f64>,
    pub o: Vec<f64>,
    pub xhat2: Vec<f64>,
    pub inv2: f64,
    pub a2: Vec<f64>,
    pub pre: Vec<f64>,
    pub xhatf: Vec<f64>,
    pub invf: f64,
    /// Final normed hidden state (the latent vector at latent positions).
    pub z: Vec<f64>,
    pub logits: Vec<f64>,
    pub pointer: Option<Pointer>,
}

/// Runs one token position against the scene prefix and the cached earlier
/// tokens, appending this position's key and value to the cache.
pub(crate) fn position_forward(params: &PolicyParams, ctx: &SceneContext, cache: &mut TokenCache, ids: InputIds) -> PositionTrace {
    let cfg = &params.config;
    let t = &params.set.tensors;
    let d = cfg.hidden;
    let heads = cfg.heads;
    let dh = d / heads;
    let scale = 1.0 / math::sqrt(dh as f64);

    let x = embed(&params.set, d, &ids);
    let mut xhat1 = vec![0.0; d];
    let mut a1 = vec![0.0; d];
    let inv1 = layer_norm(&x, &t[LN1_G].data, &t[LN1_B].data, &mut xhat1, &mut a1);
    let mut q = vec![0.0; d];
    let mut k = vec![0.0; d];
    let mut v = vec![0.0; d];
    vec_mat(&a1, &t[WQ].data, &mut q);
    vec_mat(&a1, &t[WK].data, &mut k);
    vec_mat(&a1, &t[WV].data, &mut v);
    cache.keys.push(k);
    cache.vals.push(v);

    let n_scene = ctx.keys.len();
    let n_keys = n_scene + cache.keys.len();
    let mut attn = vec![0.0; heads * n_keys];
    let mut o = vec![0.0; d];
    let (origin, cy, cx) = bias_origin(cfg, &ids);
    let span = bias_span(cfg);
    let offsets: Vec<usize> = (0..n_scene).map(|p| bias_offset(cfg, cy, cx, p)).collect();
    for h in 0..heads {
        let r = h * dh..(h + 1) * dh;
        let w = &mut attn[h * n_keys..(h + 1) * n_keys];
        let qh = &q[r.clone()];
        for (j, kj) in ctx.keys.iter().chain(cache.keys.iter()).enumerate() {
            w[j] = dot(qh, &kj[r.clone()]) * scale;
        }
        let table = &t[REL_BIAS].data[origin + h * span..origin + (h + 1) * span];
        for (wj, &off) in w.iter_mut().zip(&offsets) {
            *wj += table[off];
        }
        math::softmax_in_place(w);
        let oh = &mut o[r.clone()];
        for (j, vj) in ctx.vals.iter().chain(cache.vals.iter()).enumerate() {
            axpy(w[j], &vj[r.clone()], oh);
        }
    }
    let mut hres = x;
    let mut att = vec![0.0; d];
    vec_mat(&o, &t[WO].data, &mut att);
    add_assign(&mut hres, &att);

    let mut xhat2 = vec![0.0; d];
    let mut a2 = vec![0.0; d];
    let inv2 = layer_norm(&hres, &t[LN2_G].data, &t[LN2_B].data, &mut xhat2, &mut a2);
    let mut pre = vec![0.0; cfg.ffn];
    vec_mat(&a2, &t[W1].data, &mut pre);
    add_assign(&mut pre, &t[B1].data);
    let act: Vec<f64> = pre.iter().map(|&p| p.max(0.0)).collect();
    let mut f = vec![0.0; d];
    vec_mat(&act, &t[W2].data, &mut f);
    add_assign(&mut f, &t[B2].data);
    let mut y = hres;
    add_assign(&mut y, &f);

    let mut xhatf = vec![0.0; d];
    let mut z = vec![0.0; d];
    let invf = layer_norm(&y, &t[LNF_G].data, &t[LNF_B].data, &mut xhatf, &mut z);
    let mut logits = vec![0.0; cfg.vocab_size()];
    vec_mat(&z, &t[HEAD_W].data, &mut logits);
    add_assign(&mut logits, &t[HEAD_B].data);

    let pointer = pointer_axis(&ids).map(|axis| {
        let cells = match axis {
            Axis::X => cfg.scene_width / cfg.patch,
            Axis::Y => cfg.scene_height / cfg.patch,
        };
        let mut mass = vec![0.0; cells];
        for (p, w) in attn[..n_scene].iter().enumerate() {
            mass[patch_cell(cfg, axis, p)] += w;
        }
        let gain = t[PTR_GAIN].data[axis as usize];
        for (b, l) in logits.iter_mut().take(cfg.bins as usize).enumerate() {
            *l += gain * math::ln(mass[bin_cell(cfg, axis, b)] + PTR_EPS);
        }
        Pointer { axis, mass }
    });

    PositionTrace { ids, xhat1, inv1, a1, q, attn, o, xhat2, inv2, a2, pre, xhatf, invf, z, logits, pointer }
}

#[derive(Debug, Clone)]
pub(crate) struct Trace {
    pub ctx: SceneContext,
    pub cache: TokenCache,
    pub positions: Vec<PositionTrace>,
}

pub(crate) fn forward(params: &PolicyParams, scene: &Scene, tokens: &[TokenId]) -> Trace {
    let ctx = scene_context(params, scene);
    let mut cache = TokenCache::default();
    let positions = input_ids(&params.config, tokens).into_iter().map(|ids| position_forward(params, &ctx, &mut cache, ids)).collect();
    Trace { ctx, cache, positions }
}

/// Reverse-mode pass. `dlogits[n]` and `dz[n]` are upstream gradients at
/// token position `n` (either may be `None`).
pub(crate) fn backward(params: &PolicyParams, trace: &Trace, dlogits: &[Option<Vec<f64>>], dz_extra: &[Option<Vec<f64>>]) -> ParamSet {
    let cfg = &params.config;
    let t = &params.set.tensors;
    let d = cfg.hidden;
    let heads = cfg.heads;
    let dh = d / heads;
    let scale = 1.0 / math::sqrt(dh as f64);
    let n_scene = trace.ctx.keys.len();
    let n_tok = trace.positions.len();

    let mut g = ParamSet::zeros_like(&params.set);
    let mut dk_scene = vec![vec![0.0; d]; n_scene];
    let mut dv_scene = vec![vec![0.0; d]; n_scene];
    let mut dk_tok = vec![vec![0.0; d]; n_tok];
    let mut dv_tok = vec![vec![0.0; d]; n_tok];
    let mut da1 = vec![vec![0.0; d]; n_tok];
    let mut dx = vec![vec![0.0; d]; n_tok];

    for (n, pt) in trace.positions.iter().enumerate() {
        let dl = dlogits.get(n).and_then(|o| o.as_ref());
        let de = dz_extra.get(n).and_then(|o| o.as_ref());
        if dl.is_none() && de.is_none() {
            continue;
        }
        // head
        let mut dz = vec![0.0; d];
        if let Some(dl) = dl {
            vec_mat_t_acc(dl, &t[HEAD_W].data, &mut dz);
            outer_acc(&pt.z, dl, &mut g.tensors[HEAD_W].data);
            add_assign(&mut g.tensors[HEAD_B].data, dl);
        }
        if let Some(de) = de {
            add_assign(&mut dz, de);
        }
        // final norm
        let mut dy = vec![0.0; d];
        {
            let (gf, rest) = g.tensors.split_at_mut(LNF_B);
            layer_norm_back(&dz, &pt.xhatf, pt.invf, &t[LNF_G].data, &mut gf[LNF_G].data, &mut rest[0].data, &mut dy);
        }
        // mlp
        let mut dhres = dy.clone();
        add_assign(&mut g.tensors[B2].data, &dy);
        let act: Vec<f64> = pt.pre.iter().map(|&p| p.max(0.0)).collect();
        outer_acc(&act, &dy, &mut g.tensors[W2].data);
        let mut dact = vec![0.0; cfg.ffn];
        vec_mat_t_acc(&dy, &t[W2].data, &mut dact);
        for (da, &p) in dact.iter_mut().zip(&pt.pre) {
            if p <= 0.0 {
                *da = 0.0;
            }
        }
        add_assign(&mut g.tensors[B1].data, &dact);
        outer_acc(&pt.a2, &dact, &mut g.tensors[W1].data);
        let mut da2 = vec![0.0; d];
        vec_mat_t_acc(&dact, &t[W1].data, &mut da2);
        {
            let (g2, rest) = g.tensors.split_at_mut(LN2_B);
            layer_norm_back(&da2, &pt.xhat2, pt.inv2, &t[LN2_G].data, &mut g2[LN2_G].data, &mut rest[0].data, &mut dhres);
        }
        // attention output
        add_assign(&mut dx[n], &dhres);
        outer_acc(&pt.o, &dhres, &mut g.tensors[WO].data);
        let mut do_ = vec![0.0; d];
        vec_mat_t_acc(&dhres, &t[WO].data, &mut do_);

        let n_keys = n_scene + n + 1;
        let mut dq = vec![0.0; d];
        // d loss / d (head-0 mass) per cell, from the pointer term.
        let mut dmass: Option<(Axis, Vec<f64>)> = None;
        if let (Some(ptr), Some(dl)) = (&pt.pointer, dl) {
            let gain = t[PTR_GAIN].data[ptr.axis as usize];
            let mut dm = vec![0.0; ptr.mass.len()];
            for (b, g_b) in dl.iter().take(cfg.bins as usize).enumerate() {
                let c = bin_cell(cfg, ptr.axis, b);
                let lm = math::ln(ptr.mass[c] + PTR_EPS);
                g.tensors[PTR_GAIN].data[ptr.axis as usize] += g_b * lm;
                dm[c] += g_b * gain / (ptr.mass[c] + PTR_EPS);
            }
            dmass = Some((ptr.axis, dm));
        }
        let (origin, cy, cx) = bias_origin(cfg, &pt.ids);
        let span = bias_span(cfg);
        for h in 0..heads {
            let r = h * dh..(h + 1) * dh;
            let w = &pt.attn[h * n_keys..(h + 1) * n_keys];
            let doh = &do_[r.clone()];
            let mut dw = vec![0.0; n_keys];
            for j in 0..n_keys {
                let (vj, dvj) = if j < n_scene { (&trace.ctx.vals[j], &mut dv_scene[j]) } else { (&trace.cache.vals[j - n_scene], &mut dv_tok[j - n_scene]) };
                dw[j] = dot(doh, &vj[r.clone()]);
                axpy(w[j], doh, &mut dvj[r.clone()]);
            }
            if let (0, Some((axis, dm))) = (h, &dmass) {
                for (j, dwj) in dw.iter_mut().enumerate().take(n_scene) {
                    *dwj += dm[patch_cell(cfg, *axis, j)];
                }
            }
            let wdw: f64 = w.iter().zip(&dw).map(|(a, b)| a * b).sum();
            let qh = &pt.q[r.clone()];
            for j in 0..n_keys {
                let raw = w[j] * (dw[j] - wdw);
                if raw == 0.0 {
                    continue;
                }
                if j < n_scene {
                    g.tensors[REL_BIAS].data[origin + h * span + bias_offset(cfg, cy, cx, j)] += raw;
                }
                let ds = raw * scale;
                let (kj, dkj) = if j < n_scene { (&trace.ctx.keys[j], &mut dk_scene[j]) } else { (&trace.cache.keys[j - n_scene], &mut dk_tok[j - n_scene]) };
                axpy(ds, &kj[r.clone()], &mut dq[r.clone()]);
                axpy(ds, qh, &mut dkj[r.clone()]);
            }
        }
        outer_acc(&pt.a1, &dq, &mut g.tensors[WQ].data);
        vec_mat_t_acc(&dq, &t[WQ].data, &mut da1[n]);
    }

    // keys / values of tokens back to their normed inputs
    for (n, pt) in trace.positions.iter().enumerate() {
        outer_acc(&pt.a1, &dk_tok[n], &mut g.tensors[WK].data);
        outer_acc(&pt.a1, &dv_tok[n], &mut g.tensors[WV].data);
        vec_mat_t_acc(&dk_tok[n], &t[WK].data, &mut da1[n]);
        vec_mat_t_acc(&dv_tok[n], &t[WV].data, &mut da1[n]);
        {
            let (g1, rest) = g.tensors.split_at_mut(LN1_B);
            layer_norm_back(&da1[n], &pt.xhat1, pt.inv1, &t[LN1_G].data, &mut g1[LN1_G].data, &mut rest[0].data, &mut dx[n]);
        }
        let ids = &pt.ids;
        let rows = [(TOK_EMB, ids.token as usize), (POS_EMB, ids.pos), (ROLE_EMB, ids.role), (CARRY_X, ids.carry_x), (CARRY_Y, ids.carry_y)];
        for (k, i) in rows {
            add_assign(&mut g.tensors[k].data[i * d..(i + 1) * d], &dx[n]);
        }
    }

    // scene prefix
    let ctx = &trace.ctx;
    for p in 0..n_scene {
        let mut da = vec![0.0; d];
        outer_acc(&ctx.normed[p], &dk_scene[p], &mut g.tensors[WK].data);
        outer_acc(&ctx.normed[p], &dv_scene[p], &mut g.tensors[WV].data);
        vec_mat_t_acc(&dk_scene[p], &t[WK].data, &mut da);
        vec_mat_t_acc(&dv_scene[p], &t[WV].data, &mut da);
        let mut df = vec![0.0; d];
        {
            let (g1, rest) = g.tensors.split_at_mut(LN1_B);
            layer_norm_back(&da, &ctx.xhat[p], ctx.inv[p], &t[LN1_G].data, &mut g1[LN1_G].data, &mut rest[0].data, &mut df);
        }
        outer_acc(&ctx.patches[p], &df, &mut g.tensors[PATCH_W].data);
        add_assign(&mut g.tensors[PATCH_B].data, &df);
        add_assign(&mut g.tensors[PATCH_POS].data[p * d..(p + 1) * d], &df);
    }
    g
}
