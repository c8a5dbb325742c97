use alloc::vec;
use alloc::vec::Vec;
use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::scene::{generate_scene, Point, SceneConfig};
use crate::tokenizer::{encode_points, with_latent_prefix};

fn small_config() -> ModelConfig {
    ModelConfig { bins: 16, latents: 2, hidden: 8, heads: 2, ffn: 12, patch: 8, max_len: 40, scene_width: 32, scene_height: 32 }
}

fn small_scene(seed: u64) -> Scene {
    let cfg = SceneConfig { width: 32, height: 32, count_min: 2, count_max: 3, min_sep: 10.0, ..SceneConfig::default() };
    generate_scene(&cfg, seed).unwrap()
}

fn target_for(params: &PolicyParams, scene: &Scene) -> TokenSequence {
    let vocab = params.config.vocabulary();
    let seq = encode_points(&scene.centroids(), scene.width, scene.height, &vocab).unwrap();
    with_latent_prefix(&seq, &vocab)
}

fn random_rows(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<Vec<f64>> {
    (0..rows).map(|_| (0..cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()
}

/// Scalar probe: a fixed random linear functional of all logits and latents.
fn probe(params: &PolicyParams, scene: &Scene, seq: &TokenSequence, wl: &[Vec<f64>], wz: &[Vec<f64>]) -> f64 {
    let out = forward_teacher_forced(params, scene, seq).unwrap();
    let a: f64 = out.logits.iter().zip(wl).map(|(l, w)| l.iter().zip(w).map(|(x, y)| x * y).sum::<f64>()).sum();
    let b: f64 = out.latents.iter().zip(wz).map(|(l, w)| l.iter().zip(w).map(|(x, y)| x * y).sum::<f64>()).sum();
    a + b
}

#[test]
fn gradients_match_finite_differences() {
    let cfg = small_config();
    let params = PolicyParams::init(cfg, 3).unwrap();
    let scene = small_scene(11);
    let seq = target_for(&params, &scene);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let wl = random_rows(&mut rng, seq.ids.len(), cfg.vocab_size());
    let wz = random_rows(&mut rng, cfg.latents as usize, cfg.hidden);

    let out = forward_teacher_forced(&params, &scene, &seq).unwrap();
    let dl: Vec<Option<Vec<f64>>> = wl.iter().cloned().map(Some).collect();
    let grads = out.backward(&params, &dl, Some(&wz));

    let h = 1e-5;
    for (ti, tensor) in params.set.tensors.iter().enumerate() {
        let mut checked = 0;
        // Half the probes target entries that actually receive gradient.
        let live: Vec<usize> = (0..tensor.data.len()).filter(|&k| grads.tensors[ti].data[k] != 0.0).collect();
        for probe_i in 0..6 {
            let k = if probe_i % 2 == 0 && !live.is_empty() { live[rng.gen_range(0..live.len())] } else { rng.gen_range(0..tensor.data.len()) };
            let analytic = grads.tensors[ti].data[k];
            let mut plus = params.clone();
            plus.set.tensors[ti].data[k] += h;
            let mut minus = params.clone();
            minus.set.tensors[ti].data[k] -= h;
            let numeric = (probe(&plus, &scene, &seq, &wl, &wz) - probe(&minus, &scene, &seq, &wl, &wz)) / (2.0 * h);
            let scale = analytic.abs().max(numeric.abs());
            if scale < 1e-7 {
                continue;
            }
            let rel = (analytic - numeric).abs() / scale;
            assert!(rel < 1e-3, "{}[{k}]: analytic {analytic} numeric {numeric}", tensor.name);
            checked += 1;
        }
        // Embedding rows for unused ids have zero gradient; everything else
        // must have been exercised.
        if !tensor.name.ends_with("emb") || !live.is_empty() {
            assert!(checked > 0, "{} never checked", tensor.name);
        }
    }
}

#[test]
fn later_tokens_do_not_affect_earlier_logits() {
    let cfg = small_config();
    let params = PolicyParams::init(cfg, 1).unwrap();
    let scene = small_scene(2);
    let seq = target_for(&params, &scene);
    let base = forward_teacher_forced(&params, &scene, &seq).unwrap();
    let cut = seq.ids.len() / 2;
    let mut changed = seq.clone();
    for id in changed.ids.iter_mut().skip(cut) {
        *id = (*id + 1) % cfg.vocab_size() as TokenId;
    }
    let other = forward_teacher_forced(&params, &scene, &changed).unwrap();
    for n in 0..cut {
        assert_eq!(base.logits[n], other.logits[n], "position {n}");
    }
    assert_ne!(base.logits[cut], other.logits[cut]);
}

#[test]
fn rollouts_are_deterministic_per_seed() {
    let params = PolicyParams::init(small_config(), 4).unwrap();
    let scene = small_scene(9);
    let a = sample_rollout(&params, &scene, Decoding::Temperature(1.0), 77).unwrap();
    let b = sample_rollout(&params, &scene, Decoding::Temperature(1.0), 77).unwrap();
    assert_eq!(a, b);
    let g1 = sample_rollout(&params, &scene, Decoding::Greedy, 1).unwrap();
    let g2 = sample_rollout(&params, &scene, Decoding::Greedy, 2).unwrap();
    assert_eq!(g1.tokens, g2.tokens);
}

#[test]
fn sampled_logprobs_match_teacher_forced_scores() {
    let params = PolicyParams::init(small_config(), 6).unwrap();
    for seed in 0..5 {
        let scene = small_scene(seed);
        let r = sample_rollout(&params, &scene, Decoding::Temperature(1.0), seed).unwrap();
        let lp = logprob_of(&params, &scene, &r.tokens).unwrap();
        assert_eq!(lp, *r.tokens.logprobs.as_ref().unwrap());
        // At temperature 1 the sampling distribution is the model itself.
        for (a, b) in lp.iter().zip(&r.sampling_logprobs) {
            assert!((a - b).abs() < 1e-12);
        }
        let out = forward_teacher_forced(&params, &scene, &r.tokens).unwrap();
        for (a, b) in out.latents.iter().zip(&r.latents) {
            assert_eq!(a, b);
        }
    }
}

#[test]
fn temperature_sampling_follows_softmax() {
    let logits = [1.0, 0.0, -1.0];
    let expected: [f64; 3] = [0.665_240_955_774_821_2, 0.244_728_471_054_797_6, 0.090_030_573_170_380_46];
    let n = 40_000;
    let mut rng = ChaCha8Rng::seed_from_u64(123);
    let mut counts = [0usize; 3];
    for _ in 0..n {
        let (i, lp) = select_token(&logits, Decoding::Temperature(1.0), &mut rng);
        assert!((lp - expected[i].ln()).abs() < 1e-12);
        counts[i] += 1;
    }
    for i in 0..3 {
        let p = expected[i];
        let se = (p * (1.0 - p) / n as f64).sqrt();
        let freq = counts[i] as f64 / n as f64;
        assert!((freq - p).abs() < 4.0 * se, "token {i}: {freq} vs {p}");
    }
}

#[test]
fn temperature_sharpens_and_flattens() {
    let logits = [1.0, 0.0, -1.0];
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut hist = BTreeMap::new();
    for _ in 0..5_000 {
        *hist.entry(select_token(&logits, Decoding::Temperature(0.25), &mut rng).0).or_insert(0) += 1;
    }
    assert!(hist[&0] > 4_800);
    assert_eq!(select_token(&logits, Decoding::Greedy, &mut rng).0, 0);
}

#[test]
fn gradient_step_raises_sequence_likelihood() {
    let cfg = small_config();
    let params = PolicyParams::init(cfg, 8).unwrap();
    let scene = small_scene(3);
    let r = sample_rollout(&params, &scene, Decoding::Temperature(1.0), 3).unwrap();
    let before: f64 = logprob_of(&params, &scene, &r.tokens).unwrap().iter().sum();

    let out = forward_teacher_forced(&params, &scene, &r.tokens).unwrap();
    let start = r.first_generated(&cfg);
    let mut dl: Vec<Option<Vec<f64>>> = vec![None; r.tokens.ids.len()];
    for n in start..r.tokens.ids.len() {
        // d(-log p_y)/dz = p - onehot(y)
        let mut p = out.logits[n - 1].clone();
        math::softmax_in_place(&mut p);
        p[r.tokens.ids[n] as usize] -= 1.0;
        dl[n - 1] = Some(p);
    }
    let grads = out.backward(&params, &dl, None);
    let mut stepped = params.clone();
    let mut g = grads.clone();
    g.scale(-1e-3);
    stepped.set.add_assign(&g);
    let after: f64 = logprob_of(&stepped, &scene, &r.tokens).unwrap().iter().sum();
    assert!(after > before, "{after} <= {before}");
}

#[test]
fn patch_features_are_local() {
    let cfg = small_config();
    let params = PolicyParams::init(cfg, 2).unwrap();
    let scene = small_scene(4);
    let base = encode_scene(&params, &scene).unwrap();
    let mut poked = scene.clone();
    // Pixel (9, 17) lies in patch column 1, row 2 of a 4-wide grid.
    poked.intensity[17 * 32 + 9] += 0.5;
    let after = encode_scene(&params, &poked).unwrap();
    for (i, (a, b)) in base.iter().zip(&after).enumerate() {
        if i == 2 * 4 + 1 {
            assert_ne!(a, b);
        } else {
            assert_eq!(a, b, "patch {i}");
        }
    }

    let mut blank = scene.clone();
    blank.intensity.iter_mut().for_each(|v| *v = 0.0);
    let feats = encode_scene(&params, &blank).unwrap();
    let t = &params.set.tensors;
    for (i, f) in feats.iter().enumerate() {
        for j in 0..cfg.hidden {
            let expect = t[model::PATCH_B].data[j] + t[model::PATCH_POS].data[i * cfg.hidden + j];
            assert!((f[j] - expect).abs() < 1e-15);
        }
    }
}

#[test]
fn rejects_mismatched_inputs() {
    let params = PolicyParams::init(small_config(), 0).unwrap();
    let mut scene = small_scene(0);
    let seq = target_for(&params, &scene);
    let mut bad = seq.clone();
    bad.ids.push(10_000);
    assert!(matches!(forward_teacher_forced(&params, &scene, &bad), Err(PolicyError::UnknownToken { .. })));
    scene.width = 16;
    assert!(matches!(sample_rollout(&params, &scene, Decoding::Greedy, 0), Err(PolicyError::SceneShape { .. })));
}

#[test]
fn decoder_gradients_match_finite_differences() {
    let cfg = DecoderConfig { hidden: 6, latents: 2, patch: 8, scene_width: 32, scene_height: 32 };
    let dec = MaskDecoder::init(cfg, 9);
    let scene = small_scene(5);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let lat = random_rows(&mut rng, 2, 6);
    let w: Vec<f64> = (0..32 * 32).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let probe = |d: &MaskDecoder, l: &[Vec<f64>]| -> f64 { d.decode(l, &scene).unwrap().logits.iter().zip(&w).map(|(a, b)| a * b).sum() };
    let trace = dec.decode(&lat, &scene).unwrap();
    let (dlat, gw) = dec.backward(&trace, &lat, &w, true);
    let gw = gw.unwrap();
    let h = 1e-5;
    for i in 0..2 {
        for j in 0..6 {
            let mut p = lat.clone();
            p[i][j] += h;
            let mut m = lat.clone();
            m[i][j] -= h;
            let num = (probe(&dec, &p) - probe(&dec, &m)) / (2.0 * h);
            assert!((num - dlat[i][j]).abs() <= 1e-6 * (1.0 + num.abs()), "latent {i},{j}: {num} vs {}", dlat[i][j]);
        }
    }
    for (ti, t) in dec.set.tensors.iter().enumerate() {
        for _ in 0..4 {
            let k = rng.gen_range(0..t.data.len());
            let mut p = dec.clone();
            p.set.tensors[ti].data[k] += h;
            let mut m = dec.clone();
            m.set.tensors[ti].data[k] -= h;
            let num = (probe(&p, &lat) - probe(&m, &lat)) / (2.0 * h);
            let a = gw.tensors[ti].data[k];
            assert!((num - a).abs() <= 1e-6 * (1.0 + num.abs()), "{}[{k}]: {num} vs {a}", t.name);
        }
    }
}

#[test]
fn frozen_decoder_is_stable_and_checks_latent_count() {
    let cfg = DecoderConfig { hidden: 6, latents: 2, patch: 8, scene_width: 32, scene_height: 32 };
    let frozen = MaskDecoder::init(cfg, 1).freeze();
    assert!(frozen.verify());
    let scene = small_scene(1);
    let lat = vec![vec![0.1; 6]; 2];
    let a = frozen.decode_mask(&lat, &scene).unwrap();
    let b = frozen.decode_mask(&lat, &scene).unwrap();
    assert_eq!(a.logits, b.logits);
    assert!(matches!(frozen.decode_mask(&lat[..1], &scene), Err(PolicyError::LatentCount { expected: 2, got: 1 })));
    assert_eq!(frozen.checksum(), frozen.weights().checksum());
}

#[test]
fn oracle_heatmap_peaks_at_prompt() {
    let cfg = DecoderConfig { hidden: 6, latents: 2, patch: 8, scene_width: 32, scene_height: 32 };
    let oracle = OracleLatents::init(cfg, 0);
    let heat = oracle.heatmap(&[Point::new(20.0, 4.0)]);
    let best = heat.iter().enumerate().fold(0, |b, (i, v)| if *v > heat[b] { i } else { b });
    assert_eq!(best, 2);
    assert!(oracle.heatmap(&[]).iter().all(|&v| v == 0.0));
}
