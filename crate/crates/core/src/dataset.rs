//! Train/val scene collections, on disk and in memory.
//!
//! On disk a dataset is a directory holding one image and one label file per
//! scene plus `manifest.json`:
//!
//! ```json
//! {"version":1,"train":[{"rgb":"train/0000_rgb.vvox","labels":"train/0000_labels.vvox","seed":17}],"val":[...]}
//! ```
//!
//! Paths are relative to the manifest's directory.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::CameraGrid;
use crate::error::{AmaaError, Result};
use crate::objective::LabelVolume;
use crate::rng::SplitMix64;
use crate::scene::{make_sample, SceneSpec};
use crate::tensor::Image2D;
use crate::volfile;

pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub rgb: String,
    pub labels: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub train: Vec<ManifestEntry>,
    pub val: Vec<ManifestEntry>,
}

/// Scene seeds for each split: consecutive values after a seed-derived base,
/// train first, so the two ranges never overlap.
pub fn split_seeds(n_train: usize, n_val: usize, seed: u64) -> (Vec<u64>, Vec<u64>) {
    let base = SplitMix64::for_stream(seed, "dataset").next_u64();
    let at = |i: usize| base.wrapping_add(i as u64);
    (
        (0..n_train).map(at).collect(),
        (n_train..n_train + n_val).map(at).collect(),
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub rgb: Image2D,
    pub labels: LabelVolume,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<Example>,
    pub val: Vec<Example>,
}

fn render_split(spec: &SceneSpec, grid: &CameraGrid, seeds: &[u64]) -> Result<Vec<Example>> {
    seeds
        .par_iter()
        .map(|&s| {
            let sample = make_sample(spec, grid, s)?;
            Ok(Example {
                rgb: sample.rgb,
                labels: sample.labels,
                seed: s,
            })
        })
        .collect()
}

impl Dataset {
    pub fn generate(spec: &SceneSpec, grid: &CameraGrid, n_train: usize, n_val: usize, seed: u64) -> Result<Self> {
        if n_train == 0 || n_val == 0 {
            return Err(AmaaError::Config("n_train and n_val must be >= 1".into()));
        }
        let (tr, va) = split_seeds(n_train, n_val, seed);
        Ok(Self {
            train: render_split(spec, grid, &tr)?,
            val: render_split(spec, grid, &va)?,
        })
    }

    /// Per-class voxel counts over the training split.
    pub fn train_histogram(&self, classes: usize) -> Vec<u64> {
        let mut h = vec![0u64; classes];
        for ex in &self.train {
            for (a, b) in h.iter_mut().zip(ex.labels.histogram(classes)) {
                *a += b;
            }
        }
        h
    }

    pub fn load(manifest_path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(manifest_path).map_err(|e| AmaaError::io(manifest_path, e))?;
        let m: Manifest = serde_json::from_str(&text)?;
        if m.version != 1 {
            return Err(AmaaError::Config(format!("unsupported manifest version {}", m.version)));
        }
        let root = manifest_path.parent().unwrap_or(Path::new("."));
        let load = |entries: &[ManifestEntry]| -> Result<Vec<Example>> {
            entries
                .iter()
                .map(|e| {
                    Ok(Example {
                        rgb: volfile::load_image(&root.join(&e.rgb))?,
                        labels: volfile::load_labels(&root.join(&e.labels))?,
                        seed: e.seed,
                    })
                })
                .collect()
        };
        let ds = Self {
            train: load(&m.train)?,
            val: load(&m.val)?,
        };
        if ds.train.is_empty() || ds.val.is_empty() {
            return Err(AmaaError::Config("dataset splits must be non-empty".into()));
        }
        Ok(ds)
    }

    /// Writes all scenes and the manifest under `dir`; returns the manifest path.
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        let write = |split: &str, examples: &[Example]| -> Result<Vec<ManifestEntry>> {
            examples
                .iter()
                .enumerate()
                .map(|(i, ex)| {
                    let rgb = format!("{split}/{i:04}_rgb.vvox");
                    let labels = format!("{split}/{i:04}_labels.vvox");
                    volfile::save_image(&dir.join(&rgb), &ex.rgb)?;
                    volfile::save_labels(&dir.join(&labels), &ex.labels)?;
                    Ok(ManifestEntry {
                        rgb,
                        labels,
                        seed: ex.seed,
                    })
                })
                .collect()
        };
        let manifest = Manifest {
            version: 1,
            train: write("train", &self.train)?,
            val: write("val", &self.val)?,
        };
        let path = dir.join(MANIFEST_NAME);
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        volfile::write_atomic(&path, text.as_bytes())?;
        Ok(path)
    }
}

/// Generates, renders and saves a dataset; returns the manifest.
pub fn make_dataset(
    spec: &SceneSpec,
    grid: &CameraGrid,
    n_train: usize,
    n_val: usize,
    seed: u64,
    dir: &Path,
) -> Result<Manifest> {
    let path = Dataset::generate(spec, grid, n_train, n_val, seed)?.save(dir)?;
    let text = std::fs::read_to_string(&path).map_err(|e| AmaaError::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}
