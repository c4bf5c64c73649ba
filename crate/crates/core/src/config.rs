//! TOML run configuration covering camera, scenes, dataset, model, training
//! and experiment settings. Unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::camera::CameraGrid;
use crate::error::{AmaaError, Result};
use crate::experiment::DEFAULT_ALPHAS;
use crate::model::ModelConfig;
use crate::scene::SceneSpec;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub n_train: usize,
    pub n_val: usize,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            n_train: 64,
            n_val: 16,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Seeds of the variant ablation.
    pub seeds: Vec<u64>,
    /// Coefficients of the injection sweep.
    pub alphas: Vec<f64>,
    /// Gradient-check step and tolerance.
    pub gradcheck_h: f64,
    pub gradcheck_tol: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2],
            alphas: DEFAULT_ALPHAS.to_vec(),
            gradcheck_h: 1e-3,
            gradcheck_tol: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub camera: CameraGrid,
    pub scene: SceneSpec,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub experiment: ExperimentConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            camera: CameraGrid::default(),
            scene: SceneSpec::default(),
            dataset: DatasetConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::desk(),
            experiment: ExperimentConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.camera.validate()?;
        self.scene.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if self.scene.dims != self.camera.dims {
            return Err(AmaaError::Config(format!(
                "scene.dims {:?} must equal camera.dims {:?}",
                self.scene.dims, self.camera.dims
            )));
        }
        if self.scene.classes != self.model.classes {
            return Err(AmaaError::Config(format!(
                "scene.classes {} must equal model.classes {}",
                self.scene.classes, self.model.classes
            )));
        }
        if self.dataset.n_train == 0 || self.dataset.n_val == 0 {
            return Err(AmaaError::Config("dataset.n_train and dataset.n_val must be >= 1".into()));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| AmaaError::Config(describe(text, &e)))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; the literal path `default` yields [`RunConfig::default`].
    pub fn load(path: &Path) -> Result<Self> {
        if path.as_os_str() == "default" {
            return Ok(Self::default());
        }
        let text = std::fs::read_to_string(path).map_err(|e| AmaaError::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            AmaaError::Config(m) => AmaaError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// `line N, key `k`: message` for a TOML deserialization error.
fn describe(text: &str, e: &toml::de::Error) -> String {
    let msg = e.message().to_string();
    let Some(span) = e.span() else {
        return msg;
    };
    let start = span.start.min(text.len());
    let line_no = text[..start].matches('\n').count() + 1;
    let line = text.lines().nth(line_no - 1).unwrap_or("");
    let key = line.split('=').next().map(str::trim).filter(|k| !k.is_empty() && !k.starts_with('['));
    let table = text[..start]
        .lines()
        .rev()
        .find_map(|l| {
            let l = l.trim();
            (l.starts_with('[') && l.ends_with(']')).then(|| l.trim_matches(|c| c == '[' || c == ']').to_string())
        });
    match (key, table) {
        (Some(k), Some(t)) => format!("line {line_no}, key `{t}.{k}`: {msg}"),
        (Some(k), None) => format!("line {line_no}, key `{k}`: {msg}"),
        (None, _) => format!("line {line_no}: {msg}"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_roundtrips_through_toml() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn unknown_key_names_key_and_line() {
        let mut text = RunConfig::default().to_toml();
        text = text.replacen("[train]\n", "[train]\nlearning_rate = 0.1\n", 1);
        let line = text.lines().position(|l| l.starts_with("learning_rate")).unwrap() + 1;
        let err = RunConfig::from_toml(&text).unwrap_err().to_string();
        assert!(err.contains("learning_rate"), "{err}");
        assert!(err.contains(&format!("line {line}")), "{err}");
    }

    #[test]
    fn bad_value_names_key() {
        let text = RunConfig::default().to_toml().replacen("epochs = 15", "epochs = \"many\"", 1);
        let err = RunConfig::from_toml(&text).unwrap_err().to_string();
        assert!(err.contains("train.epochs"), "{err}");
    }

    #[test]
    fn inconsistent_sections_rejected() {
        let mut cfg = RunConfig::default();
        cfg.model.classes = 4;
        assert!(matches!(RunConfig::from_toml(&cfg.to_toml()), Err(AmaaError::Config(_))));
    }
}
