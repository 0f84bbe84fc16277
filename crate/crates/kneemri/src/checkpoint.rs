//! Model checkpoints: a format-version byte, a little-endian `u32` header
//! length, the JSON header, then every parameter block and every
//! normalization buffer as little-endian `f32`.

use std::fs;
use std::path::{Path, PathBuf};

use kneemri_core::model::{Model, ModelConfig};
use kneemri_core::resample::ResampleSpec;
use kneemri_core::{Plane, Task};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{ConfigId, RunConfig};
use crate::error::{IoContext, PipelineError, Result};

pub const FORMAT_VERSION: u8 = 1;

/// Everything needed to prepare inputs for a saved model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub config_id: ConfigId,
    pub tasks: Vec<Task>,
    pub planes: Vec<Plane>,
    pub resample: Option<ResampleSpec>,
    pub model: ModelConfig,
    pub data_root: PathBuf,
    pub seed: u64,
    pub best_epoch: usize,
}

impl CheckpointHeader {
    pub fn from_config(config: &RunConfig, best_epoch: usize) -> Self {
        CheckpointHeader {
            config_id: config.config_id,
            tasks: config.tasks.clone(),
            planes: config.planes.clone(),
            resample: config.resample,
            model: config.model.clone(),
            data_root: config.data_root.clone(),
            seed: config.seed,
            best_epoch,
        }
    }
}

pub fn encode_checkpoint(header: &CheckpointHeader, model: &Model<f32>) -> Vec<u8> {
    let json = serde_json::to_vec(header).expect("header serializes");
    let mut out = Vec::with_capacity(5 + json.len() + 4 * model.param_count());
    out.push(FORMAT_VERSION);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for block in model.params().into_iter().chain(model.buffers()) {
        for v in block {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> std::result::Result<(CheckpointHeader, Model<f32>), String> {
    let (&version, rest) = bytes.split_first().ok_or("empty file")?;
    if version != FORMAT_VERSION {
        return Err(format!("unsupported checkpoint version {version}"));
    }
    if rest.len() < 4 {
        return Err("truncated header length".into());
    }
    let len = u32::from_le_bytes(rest[..4].try_into().expect("4 bytes")) as usize;
    let rest = &rest[4..];
    if rest.len() < len {
        return Err("truncated header".into());
    }
    let header: CheckpointHeader = serde_json::from_slice(&rest[..len]).map_err(|e| e.to_string())?;
    let mut floats = rest[len..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")));
    // Initialization only fixes the layout; every value is overwritten.
    let mut model = Model::<f32>::new(header.model.clone(), &mut ChaCha8Rng::seed_from_u64(0))
        .map_err(|e| e.to_string())?;
    let expected = model.param_count() + model.buffers().iter().map(|b| b.len()).sum::<usize>();
    if rest[len..].len() != 4 * expected {
        return Err(format!(
            "expected {expected} parameters, found {} bytes",
            rest[len..].len()
        ));
    }
    for block in model.params_mut() {
        block.iter_mut().for_each(|v| *v = floats.next().expect("length checked"));
    }
    for block in model.buffers_mut() {
        block.iter_mut().for_each(|v| *v = floats.next().expect("length checked"));
    }
    Ok((header, model))
}

pub fn save_checkpoint(path: &Path, header: &CheckpointHeader, model: &Model<f32>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).at(path)?;
    }
    fs::write(path, encode_checkpoint(header, model)).at(path)
}

pub fn load_checkpoint(path: &Path) -> Result<(CheckpointHeader, Model<f32>)> {
    let bytes = fs::read(path).at(path)?;
    decode_checkpoint(&bytes).map_err(|reason| PipelineError::Config(format!("{}: {reason}", path.display())))
}
