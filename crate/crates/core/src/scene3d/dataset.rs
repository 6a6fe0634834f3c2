use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::sample::{sample_scene_with, SceneSampler};
use super::{read_record, render_pair, write_record};
use crate::error::{Error, Result};
use crate::viewgen::ViewPair;

const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneManifest {
    pub version: u32,
    pub hash: String,
    pub seed: u64,
    pub sampler: SceneSampler,
}

/// Hash of everything that determines record contents. The record count is
/// excluded: record `i` does not depend on how many records exist.
pub fn scene_dataset_hash(sampler: &SceneSampler, seed: u64) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(sampler).expect("sampler serializes"));
    h.update(seed.to_le_bytes());
    h.update(DATASET_VERSION.to_le_bytes());
    hex::encode(h.finalize())[..16].to_string()
}

pub fn scene_dataset_dir(root: &Path, sampler: &SceneSampler, seed: u64) -> PathBuf {
    root.join("scenes3d").join(scene_dataset_hash(sampler, seed))
}

pub fn record_dir(dataset: &Path, index: usize) -> PathBuf {
    dataset.join(format!("pair-{index:05}"))
}

fn record_complete(dir: &Path) -> bool {
    ["view1.png", "view2.png", "corr.oxcr"].iter().all(|f| dir.join(f).is_file())
}

/// Scene, cameras and rendered pair number `index` of the dataset.
pub fn scene_pair(sampler: &SceneSampler, seed: u64, index: usize) -> Result<ViewPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let (scene, cam1, cam2) = sample_scene_with(&mut rng, sampler)?;
    render_pair(&scene, &cam1, &cam2, sampler.epsilon)
}

/// Ensures records `0..count` exist under the dataset directory and returns
/// `(directory, records written now)`. Existing complete records are kept.
pub fn generate_scene_records(root: &Path, sampler: &SceneSampler, seed: u64, count: usize) -> Result<(PathBuf, usize)> {
    let dir = scene_dataset_dir(root, sampler, seed);
    std::fs::create_dir_all(&dir)?;
    let manifest = SceneManifest {
        version: DATASET_VERSION,
        hash: scene_dataset_hash(sampler, seed),
        seed,
        sampler: sampler.clone(),
    };
    let manifest_path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest)? + "\n";
    if std::fs::read_to_string(&manifest_path).ok().as_deref() != Some(text.as_str()) {
        std::fs::write(&manifest_path, text)?;
    }
    let mut written = 0;
    for i in 0..count {
        let rec = record_dir(&dir, i);
        if record_complete(&rec) {
            continue;
        }
        write_record(&rec, &scene_pair(sampler, seed, i)?)?;
        written += 1;
    }
    Ok((dir, written))
}

/// Loads records `0..count`; a missing record is a dependency error.
pub fn load_scene_records(dir: &Path, count: usize) -> Result<Vec<ViewPair>> {
    (0..count)
        .map(|i| {
            let rec = record_dir(dir, i);
            if !record_complete(&rec) {
                return Err(Error::Dependency(format!(
                    "scene record {} is missing; run `oxel data` first",
                    rec.display()
                )));
            }
            read_record(&rec)
        })
        .collect()
}
