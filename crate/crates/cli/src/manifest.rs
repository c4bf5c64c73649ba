use std::collections::BTreeMap;
use std::path::Path;

use amaa_core::config::RunConfig;
use amaa_core::volfile::write_atomic;
use chrono::{SecondsFormat, Utc};
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const RUN_MANIFEST: &str = "run.json";

/// Record of one CLI invocation, written last into its output directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seed: Option<u64>,
    pub config: RunConfig,
    pub started_at: String,
    pub finished_at: String,
    /// Artifact name to path relative to the output directory.
    pub artifacts: BTreeMap<String, String>,
}

pub fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

impl RunManifest {
    pub fn begin(command: &str, seed: Option<u64>, config: &RunConfig) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            seed,
            config: config.clone(),
            started_at: now(),
            finished_at: String::new(),
            artifacts: BTreeMap::new(),
        }
    }

    pub fn add(&mut self, name: &str, rel: &str) {
        self.artifacts.insert(name.into(), rel.into());
    }

    pub fn finish(mut self, out: &Path) -> Result<(), CliError> {
        self.finished_at = now();
        let text = serde_json::to_string_pretty(&self).map_err(amaa_core::AmaaError::from)?;
        write_atomic(&out.join(RUN_MANIFEST), format!("{text}\n").as_bytes())?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, CliError> {
        let path = dir.join(RUN_MANIFEST);
        let text = std::fs::read_to_string(&path)
            .map_err(|e| CliError::Validation(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
    }
}
