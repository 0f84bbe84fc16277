//! File formats, synthetic data, training, evaluation, grid search and
//! explorer export for the knee MRI classifiers in `kneemri-core`.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod evaluate;
pub mod explorer;
pub mod grid;
pub mod labels;
pub mod npy;
pub mod predictions;
pub mod synth;
pub mod train;

pub use config::{ConfigId, RunConfig};
pub use dataset::{scan_dataset, DatasetManifest, Split};
pub use error::{PipelineError, Result};
pub use kneemri_core as core;
