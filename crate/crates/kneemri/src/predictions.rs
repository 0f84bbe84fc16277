//! Per-exam probabilities as `case_id,task,plane,probability` CSV.

use std::fmt;
use std::fs::File;
use std::path::Path;

use kneemri_core::{Plane, Task};
use serde::{Deserialize, Serialize};

use crate::error::{IoContext, PipelineError, Result};

/// Input a prediction came from: one plane, or all three stacked.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum View {
    Axial,
    Coronal,
    Sagittal,
    Stacked,
}

impl From<Plane> for View {
    fn from(plane: Plane) -> Self {
        match plane {
            Plane::Axial => View::Axial,
            Plane::Coronal => View::Coronal,
            Plane::Sagittal => View::Sagittal,
        }
    }
}

impl View {
    pub fn as_str(self) -> &'static str {
        match self {
            View::Axial => "axial",
            View::Coronal => "coronal",
            View::Sagittal => "sagittal",
            View::Stacked => "stacked",
        }
    }
}

impl fmt::Display for View {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub case_id: String,
    pub task: Task,
    pub plane: View,
    pub probability: f64,
}

pub fn write_predictions(path: &Path, records: &[PredictionRecord]) -> Result<()> {
    let file = File::create(path).at(path)?;
    let mut writer = csv::Writer::from_writer(file);
    for r in records {
        writer.serialize(r).map_err(|e| csv_error(path, e))?;
    }
    writer.flush().at(path)
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRecord>> {
    let file = File::open(path).at(path)?;
    let mut reader = csv::Reader::from_reader(file);
    let mut out = Vec::new();
    for (i, row) in reader.deserialize().enumerate() {
        let record: PredictionRecord = row.map_err(|e| PipelineError::Parse {
            path: path.to_path_buf(),
            line: i + 2,
            reason: e.to_string(),
        })?;
        if !(0.0..=1.0).contains(&record.probability) {
            return Err(PipelineError::Parse {
                path: path.to_path_buf(),
                line: i + 2,
                reason: format!("probability {} outside [0, 1]", record.probability),
            });
        }
        out.push(record);
    }
    Ok(out)
}

fn csv_error(path: &Path, e: csv::Error) -> PipelineError {
    PipelineError::Parse {
        path: path.to_path_buf(),
        line: e.position().map_or(0, |p| p.line() as usize),
        reason: e.to_string(),
    }
}
