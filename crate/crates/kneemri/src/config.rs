//! Run configuration for the four training setups.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use kneemri_core::augment::{AugmentationPolicy, ChannelMode};
use kneemri_core::model::{AdamConfig, Aggregation, ModelConfig};
use kneemri_core::resample::ResampleSpec;
use kneemri_core::{Plane, Task};
use serde::{Deserialize, Serialize};

use crate::error::{IoContext, PipelineError, Result};

/// Desk-scale learning rate; the optimizer's own default is 1e-5.
pub const DESK_LR: f64 = 1e-3;
/// Crop edge for 64-pixel inputs, the same fraction as 150 of 256.
pub const DESK_CROP: usize = 38;
pub const DESK_EPOCHS: usize = 10;

/// Training setup.
///
/// * `c41`: single-slice network on three repeated channels, exam score is
///   the max over slices, one volume per batch.
/// * `c42`: single-channel slices from a fixed-count stack, each trained
///   with its exam's label; the exam score is the max over slices.
///   Batches of volumes.
/// * `c43`: the fixed-count stacks of all three planes as 45 input channels,
///   one task.
/// * `c44`: as `c43` with one output per task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConfigId {
    C41,
    C42,
    C43,
    C44,
}

impl ConfigId {
    pub fn as_str(self) -> &'static str {
        match self {
            ConfigId::C41 => "c41",
            ConfigId::C42 => "c42",
            ConfigId::C43 => "c43",
            ConfigId::C44 => "c44",
        }
    }

    pub fn is_stacked(self) -> bool {
        matches!(self, ConfigId::C43 | ConfigId::C44)
    }
}

impl fmt::Display for ConfigId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ConfigId {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "c41" => Ok(ConfigId::C41),
            "c42" => Ok(ConfigId::C42),
            "c43" => Ok(ConfigId::C43),
            "c44" => Ok(ConfigId::C44),
            _ => Err(PipelineError::Config(format!("unknown config id {s:?}"))),
        }
    }
}

fn desk_optimizer() -> AdamConfig {
    AdamConfig {
        lr: DESK_LR,
        ..AdamConfig::default()
    }
}

fn default_epochs() -> usize {
    DESK_EPOCHS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub config_id: ConfigId,
    pub tasks: Vec<Task>,
    pub planes: Vec<Plane>,
    /// Slice-count normalization; `None` keeps every slice (`c41` only).
    #[serde(default)]
    pub resample: Option<ResampleSpec>,
    pub augmentation: AugmentationPolicy,
    pub model: ModelConfig,
    #[serde(default = "desk_optimizer")]
    pub optimizer: AdamConfig,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    /// Volumes (`c41`, `c42`) or exams (`c43`, `c44`) per step.
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    /// Stop after this many epochs without a lower validation loss.
    #[serde(default)]
    pub patience: Option<usize>,
    pub data_root: PathBuf,
    pub out_dir: PathBuf,
}

impl RunConfig {
    /// Desk-scale defaults for one setup. `c44` ignores `task` and trains
    /// all three; `c43`/`c44` ignore `plane` and use all three.
    pub fn desk(
        config_id: ConfigId,
        task: Task,
        plane: Plane,
        data_root: impl Into<PathBuf>,
        out_dir: impl Into<PathBuf>,
    ) -> Self {
        let fixed = ResampleSpec::interpolate(ResampleSpec::DEFAULT_INTERPOLATED);
        let (tasks, planes, resample, model, batch_size, channel_mode) = match config_id {
            ConfigId::C41 => (
                vec![task],
                vec![plane],
                None,
                ModelConfig::new(3, 1, Aggregation::MaxOverSlices),
                1,
                ChannelMode::ThreeChannel,
            ),
            ConfigId::C42 => (
                vec![task],
                vec![plane],
                Some(fixed),
                ModelConfig::new(1, 1, Aggregation::MaxOverSlices),
                4,
                ChannelMode::SingleChannel,
            ),
            ConfigId::C43 => (
                vec![task],
                Plane::ALL.to_vec(),
                Some(fixed),
                ModelConfig::new(45, 1, Aggregation::StackedChannels),
                8,
                ChannelMode::SingleChannel,
            ),
            ConfigId::C44 => (
                Task::ALL.to_vec(),
                Plane::ALL.to_vec(),
                Some(fixed),
                ModelConfig::new(45, 3, Aggregation::StackedChannels),
                8,
                ChannelMode::SingleChannel,
            ),
        };
        RunConfig {
            config_id,
            tasks,
            planes,
            resample,
            augmentation: AugmentationPolicy {
                p: 0.0,
                channel_mode,
                baseline_extras: false,
                crop_size: DESK_CROP,
            },
            model,
            optimizer: desk_optimizer(),
            epochs: DESK_EPOCHS,
            batch_size,
            seed: 0,
            patience: None,
            data_root: data_root.into(),
            out_dir: out_dir.into(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).at(path)?;
        let config: RunConfig = serde_json::from_str(&text).map_err(|e| PipelineError::json(path, e))?;
        Ok(config)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("config serializes");
        fs::write(path, text + "\n").at(path)
    }

    /// Checks everything except the one-task/one-plane rule of
    /// single-plane setups, so a grid-search base may list several.
    pub fn validate_base(&self) -> Result<()> {
        let err = |msg: String| Err(PipelineError::Config(format!("{}: {msg}", self.config_id)));
        self.model.validate()?;
        self.augmentation.validate()?;
        if self.tasks.is_empty() || self.planes.is_empty() {
            return err("tasks and planes must be non-empty".into());
        }
        if has_duplicates(&self.tasks) || has_duplicates(&self.planes) {
            return err("tasks and planes must not repeat".into());
        }
        if self.batch_size == 0 {
            return err("batch_size must be at least 1".into());
        }
        if self.augmentation.crop_size > self.model.input_size {
            return err(format!(
                "crop_size {} exceeds input_size {}",
                self.augmentation.crop_size, self.model.input_size
            ));
        }
        if let Some(spec) = &self.resample {
            spec.validate()?;
        }
        let m = &self.model;
        match self.config_id {
            ConfigId::C41 => {
                if m.aggregation != Aggregation::MaxOverSlices || m.in_channels != 3 || m.out_tasks != 1 {
                    return err("needs a 3-channel single-task max-over-slices model".into());
                }
                if self.batch_size != 1 {
                    return err("variable slice counts allow one volume per batch".into());
                }
            }
            ConfigId::C42 => {
                if m.aggregation != Aggregation::MaxOverSlices || m.in_channels != 1 || m.out_tasks != 1 {
                    return err("needs a 1-channel single-task max-over-slices model".into());
                }
                if self.resample.is_none() {
                    return err("needs a fixed slice count".into());
                }
            }
            ConfigId::C43 | ConfigId::C44 => {
                if m.aggregation != Aggregation::StackedChannels || m.in_channels != 45 {
                    return err("needs a 45-channel stacked model".into());
                }
                if self.planes != Plane::ALL {
                    return err("stacks axial, coronal and sagittal in that order".into());
                }
                match self.resample {
                    Some(spec) if spec.target_count * 3 == m.in_channels => {}
                    _ => return err("needs 15 slices per plane".into()),
                }
                let tasks = if self.config_id == ConfigId::C43 { 1 } else { 3 };
                if m.out_tasks != tasks {
                    return err(format!("needs out_tasks = {tasks}"));
                }
                if self.config_id == ConfigId::C44 && self.tasks != Task::ALL {
                    return err("predicts acl, meniscus and abnormal in that order".into());
                }
            }
        }
        Ok(())
    }

    /// Full check for a training run.
    pub fn validate(&self) -> Result<()> {
        self.validate_base()?;
        let single_task = self.config_id != ConfigId::C44;
        if single_task && self.tasks.len() != 1 {
            return Err(PipelineError::Config(format!(
                "{} trains one task, got {}",
                self.config_id,
                self.tasks.len()
            )));
        }
        if !self.config_id.is_stacked() && self.planes.len() != 1 {
            return Err(PipelineError::Config(format!(
                "{} trains one plane, got {}",
                self.config_id,
                self.planes.len()
            )));
        }
        Ok(())
    }
}

fn has_duplicates<T: PartialEq>(items: &[T]) -> bool {
    items.iter().enumerate().any(|(i, a)| items[..i].contains(a))
}
