//! Run configuration: one TOML document covering data handling, the model,
//! training, and the synthetic generator. The CLI treats the file as the
//! source of truth, with `--override key=value` patches applied on top.

use serde::{Deserialize, Serialize};

use crate::data::TteRange;
use crate::features::DEFAULT_ALPHA;
use crate::model::ModelConfig;
use crate::synthetic::ScenarioParams;
use crate::training::TrainConfig;

/// How pedestrian ids are partitioned into train/val/test.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SplitKind {
    /// Seeded shuffled partition by pedestrian id.
    Id { ratios: (f64, f64, f64) },
    /// Partition by video-set labels.
    Set {
        train_sets: Vec<String>,
        val_sets: Vec<String>,
        test_sets: Vec<String>,
    },
}

impl Default for SplitKind {
    fn default() -> Self {
        SplitKind::Id {
            ratios: (0.5, 0.1, 0.4),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// Annotation file path, resolved against the data directory env var
    /// when relative.
    pub annotations: String,
    pub split: SplitKind,
    /// Inclusive time-to-event window, frames.
    pub tte: TteRange,
    pub overlap: f64,
    /// Area-ratio scaling factor.
    pub alpha: f64,
    /// Subsample never-crossing training windows to the crossing count.
    pub balance: bool,
    /// Vocabulary for the categorical ego mode, in one-hot order.
    pub ego_vocabulary: Vec<String>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            annotations: "annotations.jsonl".into(),
            split: SplitKind::default(),
            tte: (30, 60),
            overlap: 0.6,
            alpha: DEFAULT_ALPHA,
            balance: false,
            ego_vocabulary: ["stopped", "decelerating", "moving_slow", "moving_fast", "accelerating"]
                .map(String::from)
                .to_vec(),
        }
    }
}

/// The full run configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synth: ScenarioParams,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::pie_style(7),
            synth: ScenarioParams::default(),
        }
    }
}
