//! Dataset layout: `<root>/<split>/<plane>/<case_id>.npy` volumes and
//! `<root>/<split>-<task>.csv` label tables.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use kneemri_core::{MriVolume, Plane, Task};
use serde::{Deserialize, Serialize};

use crate::error::{IoContext, PipelineError, Result};
use crate::labels::{load_labels, LabelTable};
use crate::npy::{load_volume, read_npy_shape};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
}

impl Split {
    pub const ALL: [Split; 2] = [Split::Train, Split::Valid];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            _ => Err(PipelineError::Config(format!("unknown split {s:?}"))),
        }
    }
}

pub fn volume_path(root: &Path, split: Split, plane: Plane, case_id: &str) -> PathBuf {
    root.join(split.as_str())
        .join(plane.as_str())
        .join(format!("{case_id}.npy"))
}

pub fn labels_path(root: &Path, split: Split, task: Task) -> PathBuf {
    root.join(format!("{split}-{task}.csv"))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CaseEntry {
    pub case_id: String,
    /// Indexed by [`Plane::index`].
    pub paths: [PathBuf; 3],
    pub slice_counts: [usize; 3],
}

impl CaseEntry {
    pub fn path(&self, plane: Plane) -> &Path {
        &self.paths[plane.index()]
    }

    pub fn slices(&self, plane: Plane) -> usize {
        self.slice_counts[plane.index()]
    }

    pub fn load(&self, plane: Plane) -> Result<MriVolume> {
        load_volume(self.path(plane), &self.case_id, plane)
    }
}

/// A case left out because some plane file is missing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Exclusion {
    pub case_id: String,
    pub missing: Vec<Plane>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub split: Split,
    /// Sorted by case id.
    pub cases: Vec<CaseEntry>,
    pub excluded: Vec<Exclusion>,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.cases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cases.is_empty()
    }

    pub fn labels(&self, task: Task) -> Result<LabelTable> {
        load_labels(&labels_path(&self.root, self.split, task), task)
    }

    /// Labels for every listed case, in manifest order.
    pub fn case_labels(&self, task: Task) -> Result<Vec<u8>> {
        let table = self.labels(task)?;
        self.cases
            .iter()
            .map(|c| {
                table.get(&c.case_id).ok_or_else(|| {
                    PipelineError::Layout(format!(
                        "case {} has no {task} label in the {} split",
                        c.case_id, self.split
                    ))
                })
            })
            .collect()
    }
}

fn list_npy(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    if !dir.is_dir() {
        return Ok(out);
    }
    for entry in fs::read_dir(dir).at(dir)? {
        let path = entry.at(dir)?.path();
        if path.extension().is_some_and(|e| e == "npy") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string(), path);
            }
        }
    }
    Ok(out)
}

/// Lists the cases of one split that have all three planes. Slice counts
/// come from the file headers.
pub fn scan_dataset(root: &Path, split: Split) -> Result<DatasetManifest> {
    let split_dir = root.join(split.as_str());
    if !split_dir.is_dir() {
        return Err(PipelineError::Layout(format!(
            "missing split directory {}",
            split_dir.display()
        )));
    }
    let per_plane: Vec<BTreeMap<String, PathBuf>> = Plane::ALL
        .iter()
        .map(|p| list_npy(&split_dir.join(p.as_str())))
        .collect::<Result<_>>()?;
    let ids: BTreeSet<&String> = per_plane.iter().flat_map(|m| m.keys()).collect();

    let mut cases = Vec::new();
    let mut excluded = Vec::new();
    for id in ids {
        let missing: Vec<Plane> = Plane::ALL
            .iter()
            .filter(|p| !per_plane[p.index()].contains_key(id))
            .copied()
            .collect();
        if !missing.is_empty() {
            excluded.push(Exclusion {
                case_id: id.clone(),
                missing,
            });
            continue;
        }
        let paths: [PathBuf; 3] = Plane::ALL.map(|p| per_plane[p.index()][id].clone());
        let mut slice_counts = [0; 3];
        for (count, path) in slice_counts.iter_mut().zip(&paths) {
            *count = read_npy_shape(path)?[0];
        }
        cases.push(CaseEntry {
            case_id: id.clone(),
            paths,
            slice_counts,
        });
    }
    Ok(DatasetManifest {
        root: root.to_path_buf(),
        split,
        cases,
        excluded,
    })
}
