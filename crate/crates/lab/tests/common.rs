#![allow(dead_code)]

use std::path::Path;

use nextpoint::config::ExperimentConfig;

/// Small, fast configuration: 32x32 scenes, a width-8 model and short runs.
pub const TINY: &str = r#"
[scene]
width = 32
height = 32
count_min = 1
count_max = 3
radius_min = 3.0
radius_max = 5.0
min_sep = 10.0

[data]
train = 12
val = 4
seed = 3

[model]
bins = 32
latents = 2
hidden = 8
heads = 2
ffn = 16
patch = 8
max_len = 24

[decoder]
steps = 20
batch = 4
eval_scenes = 4
min_iou = 0.0

[sft]
steps = 6
batch = 4
warmup = 2
eval_every = 3
eval_scenes = 4

[rft]
group_size = 4
scenes_per_step = 2
steps = 4
eval_every = 2
eval_scenes = 4
"#;

pub fn tiny(overrides: &[&str]) -> ExperimentConfig {
    let o: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
    ExperimentConfig::from_toml_str(TINY, &o).unwrap()
}

pub fn read(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

/// Every file of a directory tree as (relative path, bytes), sorted.
pub fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), read(&p)));
            }
        }
    }
    out.sort();
    out
}
