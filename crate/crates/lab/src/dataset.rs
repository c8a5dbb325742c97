//! Scene datasets on disk: one scene file per sample plus `manifest.json`.

use std::fs;
use std::path::{Path, PathBuf};

use nextpoint_core::exec::Executor;
use nextpoint_core::scene::{generate_scene, SceneConfig};
use nextpoint_core::seed::derive_seed;
use nextpoint_core::Scene;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::scene_file::{encode_scene_file, load_scene};

pub const MANIFEST: &str = "manifest.json";
const MANIFEST_FORMAT: &str = "nextpoint-dataset";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }

    fn stream(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Val => 1,
        }
    }
}

impl std::str::FromStr for Split {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            other => Err(LabError::Config(format!("unknown split `{other}` (expected train or val)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub split: Split,
    pub index: usize,
    pub seed: u64,
    pub sha256: String,
    pub instances: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u64,
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(bytes))
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let bytes = fs::read(&path).map_err(|e| LabError::io(format!("reading {}", path.display()), e))?;
    let manifest: Manifest = serde_json::from_slice(&bytes).map_err(|e| LabError::artifact(&path, e.to_string()))?;
    if manifest.format != MANIFEST_FORMAT || manifest.version != 1 {
        return Err(LabError::artifact(&path, "not a version 1 dataset manifest"));
    }
    Ok(manifest)
}

/// Writes `train` + `val` scene files and the manifest into `dir`.
///
/// An existing non-empty directory is refused unless `force` is set; with
/// `force`, files listed in a previous manifest are removed first and
/// anything else is left alone.
pub fn generate<E: Executor>(dir: &Path, scene: &SceneConfig, train: usize, val: usize, seed: u64, force: bool, exec: &E) -> Result<Manifest> {
    scene.validate().map_err(|e| LabError::Config(e.to_string()))?;
    let non_empty = fs::read_dir(dir).map(|mut d| d.next().is_some()).unwrap_or(false);
    if non_empty {
        if !force {
            return Err(LabError::Config(format!("{} is not empty; pass --force to regenerate", dir.display())));
        }
        if let Ok(old) = read_manifest(dir) {
            for e in &old.entries {
                let p = dir.join(&e.file);
                if p.exists() {
                    fs::remove_file(&p).map_err(|err| LabError::io(format!("removing {}", p.display()), err))?;
                }
            }
        }
    }
    fs::create_dir_all(dir).map_err(|e| LabError::io(format!("creating {}", dir.display()), e))?;

    let jobs: Vec<(Split, usize)> = (0..train).map(|i| (Split::Train, i)).chain((0..val).map(|i| (Split::Val, i))).collect();
    let generated = exec.map_indexed(jobs.len(), &|j| {
        let (split, index) = jobs[j];
        let s = derive_seed(seed, split.stream(), index as u64);
        generate_scene(scene, s).map(|sc| (split, index, s, sc.instances.len(), encode_scene_file(&sc)))
    });
    let mut entries = Vec::with_capacity(jobs.len());
    for g in generated {
        let (split, index, s, instances, bytes) = g.map_err(|e| LabError::Config(e.to_string()))?;
        let file = format!("{}_{index:04}.json", split.name());
        let path = dir.join(&file);
        fs::write(&path, &bytes).map_err(|e| LabError::io(format!("writing {}", path.display()), e))?;
        entries.push(ManifestEntry { file, split, index, seed: s, sha256: sha256_hex(&bytes), instances });
    }
    let manifest = Manifest { format: MANIFEST_FORMAT.into(), version: 1, seed, width: scene.width, height: scene.height, entries };
    let path = dir.join(MANIFEST);
    let mut text = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    text.push(b'\n');
    fs::write(&path, text).map_err(|e| LabError::io(format!("writing {}", path.display()), e))?;
    Ok(manifest)
}

/// Loads one split in manifest order, checking every file hash.
pub fn load_split(dir: &Path, split: Split) -> Result<Vec<Scene>> {
    let manifest = read_manifest(dir)?;
    manifest
        .split(split)
        .map(|e| {
            let path: PathBuf = dir.join(&e.file);
            let bytes = fs::read(&path).map_err(|err| LabError::io(format!("reading {}", path.display()), err))?;
            if sha256_hex(&bytes) != e.sha256 {
                return Err(LabError::artifact(&path, "file hash differs from the manifest"));
            }
            load_scene(&path)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use nextpoint_core::exec::Sequential;

    #[test]
    fn counts_and_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate(dir.path(), &SceneConfig::default(), 10, 3, 5, false, &Sequential).unwrap();
        assert_eq!(m.split(Split::Train).count(), 10);
        assert_eq!(m.split(Split::Val).count(), 3);
        let mut listed: Vec<String> = m.entries.iter().map(|e| e.file.clone()).collect();
        listed.push(MANIFEST.into());
        listed.sort();
        let mut on_disk: Vec<String> = fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
        on_disk.sort();
        assert_eq!(listed, on_disk);
        assert_eq!(load_split(dir.path(), Split::Val).unwrap().len(), 3);
    }

    #[test]
    fn refuses_non_empty_without_force() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("keep.txt"), "x").unwrap();
        assert!(matches!(generate(dir.path(), &SceneConfig::default(), 2, 1, 5, false, &Sequential), Err(LabError::Config(_))));
        generate(dir.path(), &SceneConfig::default(), 4, 1, 5, true, &Sequential).unwrap();
        generate(dir.path(), &SceneConfig::default(), 2, 1, 5, true, &Sequential).unwrap();
        assert!(dir.path().join("keep.txt").exists());
        assert!(!dir.path().join("train_0003.json").exists());
    }

    #[test]
    fn tampered_file_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        generate(dir.path(), &SceneConfig::default(), 1, 1, 5, false, &Sequential).unwrap();
        let p = dir.path().join("val_0000.json");
        let mut bytes = fs::read(&p).unwrap();
        bytes.push(b' ');
        fs::write(&p, bytes).unwrap();
        assert!(matches!(load_split(dir.path(), Split::Val), Err(LabError::Artifact { .. })));
    }
}
