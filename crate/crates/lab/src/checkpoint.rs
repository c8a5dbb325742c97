//! Binary artifacts for policy checkpoints and the frozen mask decoder.
//!
//! ```text
//! magic (8 bytes) | version u32 LE | header length u64 LE | header JSON
//! | tensor values as f64 LE, in header order | sha256 of everything before
//! ```

use std::fs;
use std::path::Path;

use nextpoint_core::policy::params::{ParamSet, Tensor};
use nextpoint_core::policy::{AdamW, AdamWConfig, DecoderConfig, DecoderPretrainReport, FrozenMaskDecoder, MaskDecoder, ModelConfig, PolicyParams};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{LabError, Result};

const POLICY_MAGIC: &[u8; 8] = b"NXPTPOL\0";
const DECODER_MAGIC: &[u8; 8] = b"NXPTDEC\0";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
struct ModelRecord {
    bins: u32,
    latents: u32,
    hidden: usize,
    heads: usize,
    ffn: usize,
    patch: usize,
    max_len: usize,
    scene_width: usize,
    scene_height: usize,
}

impl From<ModelConfig> for ModelRecord {
    fn from(c: ModelConfig) -> Self {
        Self { bins: c.bins, latents: c.latents, hidden: c.hidden, heads: c.heads, ffn: c.ffn, patch: c.patch, max_len: c.max_len, scene_width: c.scene_width, scene_height: c.scene_height }
    }
}

impl From<ModelRecord> for ModelConfig {
    fn from(r: ModelRecord) -> Self {
        Self { bins: r.bins, latents: r.latents, hidden: r.hidden, heads: r.heads, ffn: r.ffn, patch: r.patch, max_len: r.max_len, scene_width: r.scene_width, scene_height: r.scene_height }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct AdamRecord {
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PolicyHeader {
    model: ModelRecord,
    version: u64,
    stage: String,
    step: u64,
    vocab_hash: String,
    decoder_checksum: String,
    params: Vec<TensorRecord>,
    /// Moments are stored with the same layout as `params`.
    adam: Option<AdamRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct DecoderHeader {
    hidden: usize,
    latents: usize,
    patch: usize,
    scene_width: usize,
    scene_height: usize,
    checksum: String,
    final_loss: f64,
    heldout_iou: f64,
    params: Vec<TensorRecord>,
}

/// Hex sha256 of the vocabulary layout; checkpoints are only usable with an
/// identical token layout.
pub fn vocab_hash(config: &ModelConfig) -> String {
    hex::encode(Sha256::digest(config.vocabulary().layout_descriptor().as_bytes()))
}

/// Policy weights plus everything needed to resume training.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: PolicyParams,
    pub optimizer: Option<AdamW>,
    /// `init`, `sft` or `rft`.
    pub stage: String,
    /// Completed steps of `stage`.
    pub step: u64,
    pub decoder_checksum: u64,
}

impl Checkpoint {
    pub fn vocab_hash(&self) -> String {
        vocab_hash(&self.params.config)
    }
}

fn layout(set: &ParamSet) -> Vec<TensorRecord> {
    set.tensors.iter().map(|t| TensorRecord { name: t.name.clone(), shape: t.shape.clone() }).collect()
}

fn write_container<H: Serialize>(magic: &[u8; 8], header: &H, sets: &[&ParamSet]) -> Vec<u8> {
    let head = serde_json::to_vec(header).expect("header serializes");
    let mut out = Vec::new();
    out.extend_from_slice(magic);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(head.len() as u64).to_le_bytes());
    out.extend_from_slice(&head);
    for set in sets {
        for t in &set.tensors {
            for x in &t.data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

/// Splits a container into its header and payload after checking magic,
/// version and trailer.
fn read_container<'a>(magic: &[u8; 8], bytes: &'a [u8]) -> Result<(&'a [u8], &'a [u8]), String> {
    if bytes.len() < 8 + 4 + 8 + 32 {
        return Err("file is truncated".into());
    }
    if &bytes[..8] != magic {
        return Err("wrong file type".into());
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(format!("unsupported format version {version} (this build reads {FORMAT_VERSION})"));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != trailer {
        return Err("checksum mismatch (file is corrupt or truncated)".into());
    }
    let hlen = u64::from_le_bytes(body[12..20].try_into().unwrap()) as usize;
    if 20 + hlen > body.len() {
        return Err("header length exceeds file size".into());
    }
    Ok((&body[20..20 + hlen], &body[20 + hlen..]))
}

fn read_sets(records: &[TensorRecord], copies: usize, payload: &[u8]) -> Result<Vec<ParamSet>, String> {
    let per: usize = records.iter().map(|r| r.shape.iter().product::<usize>()).sum();
    if payload.len() != per * copies * 8 {
        return Err(format!("payload holds {} bytes, header describes {}", payload.len(), per * copies * 8));
    }
    let mut values = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    Ok((0..copies)
        .map(|_| ParamSet { tensors: records.iter().map(|r| Tensor { name: r.name.clone(), shape: r.shape.clone(), data: values.by_ref().take(r.shape.iter().product()).collect() }).collect() })
        .collect())
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let adam = ckpt.optimizer.as_ref().map(|o| AdamRecord { beta1: o.config.beta1, beta2: o.config.beta2, eps: o.config.eps, step: o.step });
    let header = PolicyHeader {
        model: ckpt.params.config.into(),
        version: ckpt.params.version,
        stage: ckpt.stage.clone(),
        step: ckpt.step,
        vocab_hash: ckpt.vocab_hash(),
        decoder_checksum: format!("{:016x}", ckpt.decoder_checksum),
        params: layout(&ckpt.params.set),
        adam,
    };
    let mut sets = vec![&ckpt.params.set];
    if let Some(o) = &ckpt.optimizer {
        sets.push(&o.m);
        sets.push(&o.v);
    }
    write_container(POLICY_MAGIC, &header, &sets)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint, String> {
    let (head, payload) = read_container(POLICY_MAGIC, bytes)?;
    let header: PolicyHeader = serde_json::from_slice(head).map_err(|e| format!("bad header: {e}"))?;
    let config: ModelConfig = header.model.into();
    config.validate().map_err(|e| e.to_string())?;
    if header.vocab_hash != vocab_hash(&config) {
        return Err("stored vocabulary hash does not match the stored model config".into());
    }
    let mut sets = read_sets(&header.params, if header.adam.is_some() { 3 } else { 1 }, payload)?;
    let set = sets.remove(0);
    let reference = PolicyParams::init(config, 0).map_err(|e| e.to_string())?;
    if !reference.set.same_layout(&set) {
        return Err("tensor layout does not match the model config".into());
    }
    let optimizer = header.adam.map(|a| {
        let v = sets.pop().expect("three sets");
        let m = sets.pop().expect("three sets");
        AdamW { config: AdamWConfig { beta1: a.beta1, beta2: a.beta2, eps: a.eps }, m, v, step: a.step }
    });
    let decoder_checksum = u64::from_str_radix(&header.decoder_checksum, 16).map_err(|_| "bad decoder checksum field".to_string())?;
    Ok(Checkpoint { params: PolicyParams { config, set, version: header.version }, optimizer, stage: header.stage, step: header.step, decoder_checksum })
}

/// Frozen decoder plus the pre-training summary.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderArtifact {
    pub decoder: FrozenMaskDecoder,
    pub report: DecoderPretrainReport,
}

pub fn encode_decoder(a: &DecoderArtifact) -> Vec<u8> {
    let c = a.decoder.config();
    let header = DecoderHeader {
        hidden: c.hidden,
        latents: c.latents,
        patch: c.patch,
        scene_width: c.scene_width,
        scene_height: c.scene_height,
        checksum: format!("{:016x}", a.decoder.checksum()),
        final_loss: a.report.final_loss,
        heldout_iou: a.report.heldout_iou,
        params: layout(a.decoder.weights()),
    };
    write_container(DECODER_MAGIC, &header, &[a.decoder.weights()])
}

pub fn decode_decoder(bytes: &[u8]) -> Result<DecoderArtifact, String> {
    let (head, payload) = read_container(DECODER_MAGIC, bytes)?;
    let h: DecoderHeader = serde_json::from_slice(head).map_err(|e| format!("bad header: {e}"))?;
    let config = DecoderConfig { hidden: h.hidden, latents: h.latents, patch: h.patch, scene_width: h.scene_width, scene_height: h.scene_height };
    if config.patch == 0 || !config.scene_width.is_multiple_of(config.patch) || !config.scene_height.is_multiple_of(config.patch) {
        return Err("decoder patch size does not divide the scene".into());
    }
    let set = read_sets(&h.params, 1, payload)?.remove(0);
    let decoder = MaskDecoder::from_parts(config, set).map_err(|e| e.to_string())?.freeze();
    if format!("{:016x}", decoder.checksum()) != h.checksum {
        return Err("decoder weights do not match the stored checksum".into());
    }
    Ok(DecoderArtifact { decoder, report: DecoderPretrainReport { final_loss: h.final_loss, heldout_iou: h.heldout_iou } })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    // Write then rename so an interrupted run never leaves a torn artifact.
    let tmp = path.with_extension("partial");
    fs::write(&tmp, bytes).map_err(|e| LabError::io(format!("writing {}", tmp.display()), e))?;
    fs::rename(&tmp, path).map_err(|e| LabError::io(format!("renaming {} to {}", tmp.display(), path.display()), e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| LabError::io(format!("reading {}", path.display()), e))
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    write_file(path, &encode_checkpoint(ckpt))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&read_file(path)?).map_err(|m| LabError::artifact(path, m))
}

pub fn save_decoder(a: &DecoderArtifact, path: &Path) -> Result<()> {
    write_file(path, &encode_decoder(a))
}

pub fn load_decoder(path: &Path) -> Result<DecoderArtifact> {
    decode_decoder(&read_file(path)?).map_err(|m| LabError::artifact(path, m))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig { hidden: 8, heads: 2, ffn: 16, patch: 16, ..ModelConfig::default() }
    }

    fn sample() -> Checkpoint {
        let params = PolicyParams::init(small(), 3).unwrap();
        let mut opt = AdamW::new(&params.set, AdamWConfig::default());
        opt.step = 12;
        opt.m.tensors[0].data[0] = 0.25;
        opt.v.tensors[1].data[0] = 1e-7;
        Checkpoint { params, optimizer: Some(opt), stage: "sft".into(), step: 12, decoder_checksum: 0xabc }
    }

    #[test]
    fn policy_round_trip() {
        let c = sample();
        assert_eq!(decode_checkpoint(&encode_checkpoint(&c)).unwrap(), c);
        let bare = Checkpoint { optimizer: None, ..c };
        assert_eq!(decode_checkpoint(&encode_checkpoint(&bare)).unwrap(), bare);
    }

    #[test]
    fn corruption_and_truncation() {
        let bytes = encode_checkpoint(&sample());
        assert!(decode_checkpoint(&bytes[..bytes.len() - 40]).unwrap_err().contains("checksum"));
        let mut flipped = bytes.clone();
        flipped[200] ^= 1;
        assert!(decode_checkpoint(&flipped).is_err());
        assert!(decode_checkpoint(&bytes[..10]).unwrap_err().contains("truncated"));
        let mut future = bytes.clone();
        future[8] = 9;
        assert!(decode_checkpoint(&future).unwrap_err().contains("version"));
    }

    #[test]
    fn decoder_round_trip() {
        let d = MaskDecoder::init(DecoderConfig::for_model(&small()), 4).freeze();
        let a = DecoderArtifact { decoder: d, report: DecoderPretrainReport { final_loss: 0.3, heldout_iou: 0.8 } };
        let bytes = encode_decoder(&a);
        assert_eq!(decode_decoder(&bytes).unwrap(), a);
        assert!(decode_checkpoint(&bytes).unwrap_err().contains("wrong file type"));
    }

    #[test]
    fn vocab_hash_tracks_layout() {
        let a = small();
        assert_eq!(vocab_hash(&a), vocab_hash(&ModelConfig { hidden: 16, ..a }));
        assert_ne!(vocab_hash(&a), vocab_hash(&ModelConfig { bins: 32, ..a }));
        assert_ne!(vocab_hash(&a), vocab_hash(&ModelConfig { latents: 2, ..a }));
    }
}
