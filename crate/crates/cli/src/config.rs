use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use mmap_core::ingest::{IngestConfig, SynthConfig};
use mmap_core::model::ModelConfig;
use mmap_core::train::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VizConfig {
    /// Cluster count; 5 when unset.
    pub k: Option<usize>,
    pub slide: Option<String>,
}

/// Everything a command may need, as read from `--config` and then
/// overridden by flags.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub ingest: IngestConfig,
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub stage1: TrainConfig,
    pub stage2: TrainConfig,
    pub viz: VizConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            ingest: IngestConfig::default(),
            synth: SynthConfig::default(),
            model: ModelConfig::default(),
            stage1: TrainConfig::default(),
            stage2: TrainConfig::default(),
            viz: VizConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        if !path.exists() {
            return Err(mmap_core::MmapError::FileNotFound(path.to_path_buf()).into());
        }
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    /// Pushes the run seed into both training stages.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.stage1.seed = seed;
        self.stage2.seed = seed;
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub config_path: Option<PathBuf>,
    pub config: serde_json::Value,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub started_at: String,
    pub finished_at: String,
}

pub const MANIFEST_FILE: &str = "run_manifest.json";

impl RunManifest {
    pub fn write(&self) -> Result<()> {
        let path = self.out_dir.join(MANIFEST_FILE);
        fs::write(&path, serde_json::to_string_pretty(self)? + "\n").with_context(|| format!("writing {}", path.display()))
    }
}
