use serde::{Deserialize, Serialize};

use crate::attention::PositionEncoding;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Task {
    Classification { classes: usize },
    Segmentation { classes: usize },
}

impl Task {
    pub fn classes(&self) -> usize {
        match *self {
            Task::Classification { classes } | Task::Segmentation { classes } => classes,
        }
    }

    pub fn is_segmentation(&self) -> bool {
        matches!(self, Task::Segmentation { .. })
    }
}

fn default_true() -> bool {
    true
}

fn default_ffn_ratio() -> usize {
    4
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// CD blocks per stage.
    pub blocks: Vec<usize>,
    pub channels: Vec<usize>,
    pub heads: Vec<usize>,
    pub k_neighbors: usize,
    /// Point-count ratio between consecutive stages.
    pub scale_s: usize,
    /// Points per proxy inside a block; defaults to `scale_s`.
    #[serde(default)]
    pub block_scale: Option<usize>,
    pub task: Task,
    /// Input feature channels per point.
    pub in_channels: usize,
    #[serde(default = "default_true")]
    pub collect: bool,
    #[serde(default = "default_true")]
    pub distribute: bool,
    #[serde(default)]
    pub position_encoding: PositionEncoding,
    #[serde(default = "default_ffn_ratio")]
    pub ffn_ratio: usize,
}

pub const PRESETS: &[&str] = &[
    "modelnet-like",
    "s3dis-like",
    "cdformer-s",
    "cdformer-b",
    "cdformer-l",
    "table4-i",
    "table4-ii",
    "table4-iii",
    "table4-iv",
    "table5-i",
    "table5-ii",
    "table5-iii",
    "table5-iv",
    "table7-k4",
    "table7-k8",
    "table7-k16",
];

impl ModelConfig {
    fn segmentation(channels: [usize; 4], heads: [usize; 4], scale_s: usize) -> Self {
        ModelConfig {
            blocks: vec![2, 2, 6, 2],
            channels: channels.to_vec(),
            heads: heads.to_vec(),
            k_neighbors: 16,
            scale_s,
            block_scale: None,
            task: Task::Segmentation { classes: 13 },
            in_channels: 6,
            collect: true,
            distribute: true,
            position_encoding: PositionEncoding::Contextual,
            ffn_ratio: 4,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        let large = || Self::segmentation([48, 96, 192, 384], [3, 6, 12, 24], 8);
        let with = |f: &dyn Fn(&mut ModelConfig)| {
            let mut c = large();
            f(&mut c);
            c
        };
        Ok(match name {
            "modelnet-like" => ModelConfig {
                blocks: vec![1, 1, 3, 1],
                channels: vec![64, 128, 256, 512],
                heads: vec![4, 8, 16, 32],
                k_neighbors: 16,
                scale_s: 4,
                block_scale: None,
                task: Task::Classification { classes: 40 },
                in_channels: 3,
                collect: true,
                distribute: true,
                position_encoding: PositionEncoding::Contextual,
                ffn_ratio: 4,
            },
            "s3dis-like" | "cdformer-l" | "table4-iv" | "table5-iii" | "table7-k16" => large(),
            "cdformer-s" => Self::segmentation([16, 32, 64, 128], [1, 2, 4, 8], 8),
            "cdformer-b" => Self::segmentation([32, 64, 128, 256], [2, 4, 8, 16], 8),
            "table4-i" => with(&|c| {
                c.collect = false;
                c.distribute = false;
            }),
            "table4-ii" => with(&|c| c.distribute = false),
            "table4-iii" => with(&|c| c.collect = false),
            "table5-i" => with(&|c| c.position_encoding = PositionEncoding::None),
            "table5-ii" => with(&|c| c.position_encoding = PositionEncoding::Relative),
            "table5-iv" => with(&|c| c.position_encoding = PositionEncoding::Absolute),
            "table7-k4" => with(&|c| c.k_neighbors = 4),
            "table7-k8" => with(&|c| c.k_neighbors = 8),
            other => {
                return Err(Error::Config(format!(
                    "unknown preset `{other}`; known presets: {}",
                    PRESETS.join(", ")
                )))
            }
        })
    }

    pub fn stages(&self) -> usize {
        self.blocks.len()
    }

    pub fn block_scale(&self) -> usize {
        self.block_scale.unwrap_or(self.scale_s)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.blocks.len();
        if n == 0 {
            return Err(Error::Config("at least one stage is required".into()));
        }
        if self.channels.len() != n || self.heads.len() != n {
            return Err(Error::Config(format!(
                "blocks, channels and heads must have equal lengths ({}, {}, {})",
                n,
                self.channels.len(),
                self.heads.len()
            )));
        }
        for (i, (&c, &h)) in self.channels.iter().zip(&self.heads).enumerate() {
            if c == 0 || h == 0 || c % h != 0 {
                return Err(Error::Config(format!(
                    "stage {i}: channels {c} must be a positive multiple of heads {h}"
                )));
            }
        }
        if self.k_neighbors == 0 {
            return Err(Error::Config("k_neighbors must be positive".into()));
        }
        if self.scale_s == 0 || self.block_scale() == 0 {
            return Err(Error::Config("scale_s and block_scale must be positive".into()));
        }
        if self.task.classes() == 0 {
            return Err(Error::Config("task needs at least one class".into()));
        }
        if self.in_channels == 0 {
            return Err(Error::Config("in_channels must be positive".into()));
        }
        if self.ffn_ratio == 0 {
            return Err(Error::Config("ffn_ratio must be positive".into()));
        }
        Ok(())
    }
}
