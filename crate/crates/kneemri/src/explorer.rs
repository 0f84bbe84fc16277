//! Static bundle for the slice browser: one PNG per slice plus a manifest.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use kneemri_core::{MriVolume, Plane, Task};
use serde::{Deserialize, Serialize};

use crate::dataset::{scan_dataset, Split};
use crate::error::{IoContext, PipelineError, Result};
use crate::npy::quantize;
use crate::predictions::PredictionRecord;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlaneEntry {
    pub count: usize,
    /// Relative to the bundle root, in slice order.
    pub files: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseManifest {
    pub id: String,
    pub split: Split,
    pub planes: BTreeMap<Plane, PlaneEntry>,
    pub labels: BTreeMap<Task, Option<u8>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub predictions: Option<BTreeMap<Task, f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplorerManifest {
    pub cases: Vec<CaseManifest>,
}

pub fn slice_file(case_id: &str, plane: Plane, index: usize) -> String {
    format!("cases/{case_id}/{plane}/{index}.png")
}

/// 8-bit grayscale PNG of one slice, intensities `round(255 v)`.
pub fn write_slice_png(path: &Path, vol: &MriVolume, index: usize) -> Result<()> {
    let file = File::create(path).at(path)?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), vol.width() as u32, vol.height() as u32);
    encoder.set_color(png::ColorType::Grayscale);
    encoder.set_depth(png::BitDepth::Eight);
    let pixels: Vec<u8> = vol.slice(index).iter().map(|&v| quantize(v)).collect();
    let encoding = |e: png::EncodingError| PipelineError::io(path, std::io::Error::other(e));
    let mut writer = encoder.write_header().map_err(encoding)?;
    writer.write_image_data(&pixels).map_err(encoding)?;
    writer.finish().map_err(encoding)
}

/// Mean probability per case and task. A case scored by several models
/// (one per plane, say) shows their average.
fn mean_predictions(records: &[PredictionRecord]) -> BTreeMap<String, BTreeMap<Task, f64>> {
    let mut sums: BTreeMap<(String, Task), (f64, usize)> = BTreeMap::new();
    for r in records {
        let e = sums.entry((r.case_id.clone(), r.task)).or_default();
        e.0 += r.probability;
        e.1 += 1;
    }
    let mut out: BTreeMap<String, BTreeMap<Task, f64>> = BTreeMap::new();
    for ((case, task), (sum, n)) in sums {
        out.entry(case).or_default().insert(task, sum / n as f64);
    }
    out
}

/// Renders every case of both splits under `out` and writes the manifest.
/// Cases whose labels file lacks them get `null` labels.
pub fn export_explorer(data_root: &Path, out: &Path, predictions: Option<&[PredictionRecord]>) -> Result<ExplorerManifest> {
    let predicted = predictions.map(mean_predictions);
    let mut cases = Vec::new();
    for split in Split::ALL {
        let manifest = scan_dataset(data_root, split)?;
        let tables = Task::ALL
            .iter()
            .map(|&t| manifest.labels(t).ok())
            .collect::<Vec<_>>();
        for case in &manifest.cases {
            let mut planes = BTreeMap::new();
            for plane in Plane::ALL {
                let vol = case.load(plane)?;
                let dir: PathBuf = out.join("cases").join(&case.case_id).join(plane.as_str());
                fs::create_dir_all(&dir).at(&dir)?;
                let files: Vec<String> = (0..vol.slices())
                    .map(|i| {
                        let rel = slice_file(&case.case_id, plane, i);
                        write_slice_png(&out.join(&rel), &vol, i).map(|_| rel)
                    })
                    .collect::<Result<_>>()?;
                planes.insert(
                    plane,
                    PlaneEntry {
                        count: files.len(),
                        files,
                    },
                );
            }
            let labels = Task::ALL
                .iter()
                .zip(&tables)
                .map(|(&t, table)| (t, table.as_ref().and_then(|tb| tb.get(&case.case_id))))
                .collect();
            cases.push(CaseManifest {
                id: case.case_id.clone(),
                split,
                planes,
                labels,
                predictions: predicted
                    .as_ref()
                    .map(|p| p.get(&case.case_id).cloned().unwrap_or_default()),
            });
        }
    }
    let manifest = ExplorerManifest { cases };
    let path = out.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| PipelineError::json(&path, e))?;
    fs::write(&path, json + "\n").at(&path)?;
    Ok(manifest)
}
