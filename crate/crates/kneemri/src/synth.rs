//! Synthetic stand-in for the knee MRI dataset: noisy "joint" volumes with
//! bright ellipsoidal lesions marking positive labels.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use kneemri_core::{Plane, Task};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::dataset::{labels_path, scan_dataset, volume_path, DatasetManifest, Split};
use crate::error::{IoContext, PipelineError, Result};
use crate::labels::{write_labels, LabelTable};
use crate::npy::{quantize, write_npy_u8};

/// Positive rate per task, in [`Task::ALL`] order.
pub const PREVALENCE: [f64; 3] = [0.233, 0.371, 0.806];
pub const MIN_SLICES: usize = 17;
pub const MAX_SLICES: usize = 61;
pub const DEFAULT_SIZE: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SynthOptions {
    pub cases: usize,
    pub seed: u64,
    /// Slice edge length in pixels.
    pub size: usize,
}

impl SynthOptions {
    pub fn new(cases: usize, seed: u64) -> Self {
        SynthOptions {
            cases,
            seed,
            size: DEFAULT_SIZE,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub train: DatasetManifest,
    pub valid: DatasetManifest,
}

/// Lesion geometry per task: in-plane center and radii as fractions of the
/// slice size (row, col).
struct LesionShape {
    center: (f64, f64),
    radii: (f64, f64),
}

const LESIONS: [LesionShape; 3] = [
    // acl: round
    LesionShape {
        center: (0.45, 0.40),
        radii: (0.08, 0.08),
    },
    // meniscus: flat
    LesionShape {
        center: (0.66, 0.55),
        radii: (0.045, 0.13),
    },
    // abnormal: tall
    LesionShape {
        center: (0.34, 0.66),
        radii: (0.13, 0.05),
    },
];

pub fn case_id(index: usize) -> String {
    format!("{index:04}")
}

/// Number of validation cases: a quarter, but at least two so both classes
/// can appear.
pub fn valid_count(cases: usize) -> usize {
    (cases / 4).max(2)
}

/// Labels per case in [`Task::ALL`] order. Each split is forced to contain
/// both classes of every task by flipping its first case when needed.
pub fn sample_labels(cases: usize, seed: u64) -> Vec<[u8; 3]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0);
    let mut labels: Vec<[u8; 3]> = (0..cases)
        .map(|_| PREVALENCE.map(|p| u8::from(rng.random::<f64>() < p)))
        .collect();
    let n_train = cases - valid_count(cases);
    for range in [0..n_train, n_train..cases] {
        for t in 0..3 {
            let positives = labels[range.clone()].iter().filter(|l| l[t] == 1).count();
            if positives == 0 || positives == range.len() {
                labels[range.start][t] ^= 1;
            }
        }
    }
    labels
}

/// Writes `cases` exams under `out` and returns the scanned manifests.
pub fn generate_synthetic(options: &SynthOptions, out: &Path) -> Result<SynthDataset> {
    if options.cases < 4 {
        return Err(PipelineError::Config(format!(
            "need at least 4 cases, got {}",
            options.cases
        )));
    }
    if options.size < 8 {
        return Err(PipelineError::Config(format!(
            "slice size must be at least 8, got {}",
            options.size
        )));
    }
    fs::create_dir_all(out).at(out)?;
    let labels = sample_labels(options.cases, options.seed);
    let n_train = options.cases - valid_count(options.cases);

    let mut tables: BTreeMap<(Split, Task), LabelTable> = BTreeMap::new();
    for (index, case_labels) in labels.iter().enumerate() {
        let split = if index < n_train { Split::Train } else { Split::Valid };
        let id = case_id(index);
        for plane in Plane::ALL {
            let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
            rng.set_stream(1 + 3 * index as u64 + plane.index() as u64);
            let (slices, data) = synth_volume(&mut rng, options.size, case_labels);
            write_npy_u8(
                &volume_path(out, split, plane, &id),
                [slices, options.size, options.size],
                &data,
            )?;
        }
        for task in Task::ALL {
            tables
                .entry((split, task))
                .or_insert_with(|| LabelTable {
                    task,
                    entries: BTreeMap::new(),
                })
                .entries
                .insert(id.clone(), case_labels[task.index()]);
        }
    }
    for ((split, task), table) in &tables {
        write_labels(&labels_path(out, *split, *task), table)?;
    }
    Ok(SynthDataset {
        train: scan_dataset(out, Split::Train)?,
        valid: scan_dataset(out, Split::Valid)?,
    })
}

fn synth_volume(rng: &mut ChaCha8Rng, size: usize, labels: &[u8; 3]) -> (usize, Vec<u8>) {
    let slices = rng.random_range(MIN_SLICES..=MAX_SLICES);
    let noise = Normal::new(0.0, 0.05).expect("positive std");
    let n = size as f64;

    // Joint outline: an ellipse that narrows toward the outer slices.
    let joint_radii = (rng.random_range(0.30..0.38) * n, rng.random_range(0.32..0.40) * n);
    let joint_level = rng.random_range(0.30..0.40);

    struct Placed {
        slice: f64,
        slice_radius: f64,
        row: f64,
        col: f64,
        radii: (f64, f64),
        gain: f64,
    }
    let mut lesions = Vec::new();
    for (t, shape) in LESIONS.iter().enumerate() {
        if labels[t] == 0 {
            continue;
        }
        let s = slices as f64;
        let jitter = 0.04 * n;
        lesions.push(Placed {
            slice: rng.random_range(s / 3.0..2.0 * s / 3.0),
            slice_radius: (s / 8.0).max(2.0),
            row: shape.center.0 * n + rng.random_range(-jitter..jitter),
            col: shape.center.1 * n + rng.random_range(-jitter..jitter),
            radii: (shape.radii.0 * n, shape.radii.1 * n),
            gain: rng.random_range(0.45..0.55),
        });
    }

    let mut data = Vec::with_capacity(slices * size * size);
    let mid = (slices as f64 - 1.0) / 2.0;
    for k in 0..slices {
        let depth = (k as f64 - mid) / (mid + 1.0);
        let taper = (1.0 - 0.5 * depth * depth).max(0.1);
        for r in 0..size {
            for c in 0..size {
                let (y, x) = (r as f64 + 0.5, c as f64 + 0.5);
                let dy = (y - n / 2.0) / (joint_radii.0 * taper);
                let dx = (x - n / 2.0) / (joint_radii.1 * taper);
                let inside = dy * dy + dx * dx;
                let mut v = if inside < 1.0 {
                    joint_level + 0.1 * (1.0 - inside)
                } else {
                    0.08
                };
                for l in &lesions {
                    let dz = (k as f64 - l.slice) / l.slice_radius;
                    let dr = (y - l.row) / l.radii.0;
                    let dc = (x - l.col) / l.radii.1;
                    let d = dz * dz + dr * dr + dc * dc;
                    if d < 1.0 {
                        v += l.gain * (1.0 - d);
                    }
                }
                v += noise.sample(rng);
                data.push(quantize(v.clamp(0.0, 1.0)));
            }
        }
    }
    (slices, data)
}
