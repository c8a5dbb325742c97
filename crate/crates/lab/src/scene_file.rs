//! Versioned JSON scene files.
//!
//! ```text
//! { "format": "nextpoint-scene", "version": 1, "sha256": "<hex>", "body": { ... } }
//! ```
//!
//! The body holds the dimensions, seed, instances (centroid, radius and a
//! run-length mask starting with an unset run) and one base64 string of
//! little-endian `f64` values per intensity row. The checksum covers the
//! compact JSON serialization of the body.

use std::fs;
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use nextpoint_core::{Instance, Point, Raster, Scene};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{LabError, Result, SceneFileError};

pub const FORMAT: &str = "nextpoint-scene";
pub const VERSION: u64 = 1;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
struct InstanceRecord {
    centroid: [f64; 2],
    radius: f64,
    mask_runs: Vec<u32>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
struct Body {
    width: usize,
    height: usize,
    seed: u64,
    instances: Vec<InstanceRecord>,
    intensity_rows: Vec<String>,
}

#[derive(Debug, Serialize)]
struct Envelope<'a> {
    format: &'a str,
    version: u64,
    sha256: String,
    body: &'a Body,
}

fn body_digest(body: &Body) -> String {
    let bytes = serde_json::to_vec(body).expect("scene body serializes");
    hex::encode(Sha256::digest(bytes))
}

fn to_body(scene: &Scene) -> Body {
    let rows = scene
        .intensity
        .chunks(scene.width)
        .map(|row| {
            let bytes: Vec<u8> = row.iter().flat_map(|v| v.to_le_bytes()).collect();
            B64.encode(bytes)
        })
        .collect();
    let instances = scene.instances.iter().map(|i| InstanceRecord { centroid: [i.centroid.x, i.centroid.y], radius: i.radius, mask_runs: i.mask.to_runs() }).collect();
    Body { width: scene.width, height: scene.height, seed: scene.seed, instances, intensity_rows: rows }
}

fn from_body(body: Body) -> Result<Scene, SceneFileError> {
    let bad = |m: &str| SceneFileError::Malformed(m.to_string());
    if body.intensity_rows.len() != body.height {
        return Err(bad("intensity row count differs from height"));
    }
    let mut intensity = Vec::with_capacity(body.width * body.height);
    for row in &body.intensity_rows {
        let bytes = B64.decode(row).map_err(|_| bad("intensity row is not valid base64"))?;
        if bytes.len() != body.width * 8 {
            return Err(bad("intensity row has the wrong length"));
        }
        intensity.extend(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))));
    }
    let instances = body
        .instances
        .into_iter()
        .map(|r| {
            let mask = Raster::from_runs(body.width, body.height, &r.mask_runs).ok_or_else(|| bad("mask runs do not cover the raster"))?;
            Ok(Instance { centroid: Point::new(r.centroid[0], r.centroid[1]), radius: r.radius, mask })
        })
        .collect::<Result<Vec<_>, SceneFileError>>()?;
    Ok(Scene { width: body.width, height: body.height, intensity, instances, seed: body.seed })
}

pub fn encode_scene_file(scene: &Scene) -> Vec<u8> {
    let body = to_body(scene);
    let env = Envelope { format: FORMAT, version: VERSION, sha256: body_digest(&body), body: &body };
    let mut out = serde_json::to_vec(&env).expect("scene envelope serializes");
    out.push(b'\n');
    out
}

pub fn decode_scene_file(bytes: &[u8]) -> Result<Scene, SceneFileError> {
    let value: serde_json::Value = serde_json::from_slice(bytes).map_err(|e| if e.is_eof() { SceneFileError::Truncated } else { SceneFileError::Malformed(e.to_string()) })?;
    if value.get("format").and_then(|f| f.as_str()) != Some(FORMAT) {
        return Err(SceneFileError::Malformed("missing or foreign format tag".into()));
    }
    let version = value.get("version").and_then(|v| v.as_u64()).ok_or_else(|| SceneFileError::Malformed("missing version".into()))?;
    if version != VERSION {
        return Err(SceneFileError::Version { found: version, supported: VERSION });
    }
    let stored = value.get("sha256").and_then(|v| v.as_str()).ok_or_else(|| SceneFileError::Malformed("missing checksum".into()))?.to_string();
    let body_value = value.get("body").cloned().ok_or_else(|| SceneFileError::Malformed("missing body".into()))?;
    let body: Body = serde_json::from_value(body_value).map_err(|e| SceneFileError::Malformed(e.to_string()))?;
    let computed = body_digest(&body);
    if computed != stored {
        return Err(SceneFileError::Checksum { stored, computed });
    }
    from_body(body)
}

pub fn save_scene(scene: &Scene, path: &Path) -> Result<()> {
    fs::write(path, encode_scene_file(scene)).map_err(|e| LabError::io(format!("writing {}", path.display()), e))
}

pub fn load_scene(path: &Path) -> Result<Scene> {
    let bytes = fs::read(path).map_err(|e| LabError::io(format!("reading {}", path.display()), e))?;
    decode_scene_file(&bytes).map_err(|source| LabError::SceneFile { path: path.to_path_buf(), source })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nextpoint_core::scene::{generate_scene, SceneConfig};

    fn sample() -> Scene {
        generate_scene(&SceneConfig::default(), 17).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        for seed in 0..20 {
            let s = generate_scene(&SceneConfig::default(), seed).unwrap();
            assert_eq!(decode_scene_file(&encode_scene_file(&s)).unwrap(), s);
        }
    }

    #[test]
    fn encoding_is_stable() {
        assert_eq!(encode_scene_file(&sample()), encode_scene_file(&sample()));
    }

    #[test]
    fn truncated_file() {
        let bytes = encode_scene_file(&sample());
        assert_eq!(decode_scene_file(&bytes[..bytes.len() / 2]), Err(SceneFileError::Truncated));
    }

    #[test]
    fn corrupted_checksum() {
        let text = String::from_utf8(encode_scene_file(&sample())).unwrap();
        let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
        v["body"]["seed"] = serde_json::json!(99);
        let err = decode_scene_file(&serde_json::to_vec(&v).unwrap()).unwrap_err();
        assert!(matches!(err, SceneFileError::Checksum { .. }));
        v = serde_json::from_str(&text).unwrap();
        v["sha256"] = serde_json::json!("00");
        assert!(matches!(decode_scene_file(&serde_json::to_vec(&v).unwrap()), Err(SceneFileError::Checksum { .. })));
    }

    #[test]
    fn future_version() {
        let text = String::from_utf8(encode_scene_file(&sample())).unwrap();
        let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
        v["version"] = serde_json::json!(VERSION + 1);
        assert_eq!(decode_scene_file(&serde_json::to_vec(&v).unwrap()), Err(SceneFileError::Version { found: VERSION + 1, supported: VERSION }));
    }
}
