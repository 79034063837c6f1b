//! `RunConfig`: the JSON file read by `train`.

use std::fs;
use std::path::{Path, PathBuf};

use cdformer::attention::PositionEncoding;
use cdformer::model::{ModelConfig, Task};
use cdformer::training::TrainConfig;
use cdformer::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

/// A preset plus per-field overrides. The task always comes from the
/// dataset.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub preset: Option<String>,
    pub blocks: Option<Vec<usize>>,
    pub channels: Option<Vec<usize>>,
    pub heads: Option<Vec<usize>>,
    pub k_neighbors: Option<usize>,
    pub scale_s: Option<usize>,
    pub block_scale: Option<usize>,
    pub in_channels: Option<usize>,
    pub collect: Option<bool>,
    pub distribute: Option<bool>,
    pub position_encoding: Option<PositionEncoding>,
    pub ffn_ratio: Option<usize>,
}

impl ModelSection {
    pub fn resolve(&self, task: Task, in_channels: usize) -> Result<ModelConfig> {
        let mut c = ModelConfig::preset(self.preset.as_deref().unwrap_or("cdformer-s"))?;
        c.task = task;
        c.in_channels = in_channels;
        if let Some(v) = &self.blocks {
            c.blocks = v.clone();
        }
        if let Some(v) = &self.channels {
            c.channels = v.clone();
        }
        if let Some(v) = &self.heads {
            c.heads = v.clone();
        }
        if let Some(v) = self.k_neighbors {
            c.k_neighbors = v;
        }
        if let Some(v) = self.scale_s {
            c.scale_s = v;
        }
        if self.block_scale.is_some() {
            c.block_scale = self.block_scale;
        }
        if let Some(v) = self.in_channels {
            c.in_channels = v;
        }
        if let Some(v) = self.collect {
            c.collect = v;
        }
        if let Some(v) = self.distribute {
            c.distribute = v;
        }
        if let Some(v) = self.position_encoding {
            c.position_encoding = v;
        }
        if let Some(v) = self.ffn_ratio {
            c.ffn_ratio = v;
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Directory written by `gen-data`.
    pub dataset: PathBuf,
    pub out_dir: PathBuf,
    #[serde(default)]
    pub model: ModelSection,
    pub train: TrainConfig,
    #[serde(default)]
    pub precision: Precision,
}

impl RunConfig {
    /// Parses the file; relative paths are taken from the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.dataset, &mut cfg.out_dir] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn check_paths(&self) -> Result<()> {
        if !self.dataset.join(cdformer::data::MANIFEST).is_file() {
            return Err(Error::Config(format!(
                "dataset `{}` has no {}",
                self.dataset.display(),
                cdformer::data::MANIFEST
            )));
        }
        Ok(())
    }
}
