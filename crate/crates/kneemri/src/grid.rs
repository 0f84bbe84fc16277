//! Grid search over the augmentation probability `p` in steps of 0.05.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use kneemri_core::ensemble::DEFAULT_LAMBDA;
use kneemri_core::{Plane, Task};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ConfigId, RunConfig};
use crate::dataset::{scan_dataset, Split};
use crate::error::{IoContext, PipelineError, Result};
use crate::evaluate::{combine, FitSummary};
use crate::train::{predict_logits, prepare_split, sigmoid, train_prepared, PreparedCase, PreparedData, TrainOutcome};

pub const GRID_POINTS: usize = 21;

/// `k / 20` for `k = 0..=20`.
pub fn p_grid() -> Vec<f64> {
    (0..GRID_POINTS).map(|k| k as f64 / 20.0).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridEntry {
    pub p: f64,
    pub auc: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub task: Task,
    pub plane: Plane,
    /// Ordered by increasing `p`.
    pub entries: Vec<GridEntry>,
    pub chosen_p: Option<f64>,
    pub chosen_auc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CombinedReport {
    pub task: Task,
    pub auc: Option<f64>,
    pub fit: Option<FitSummary>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSearchReport {
    pub config_id: ConfigId,
    pub seed: u64,
    pub epochs: usize,
    pub cells: Vec<CellReport>,
    /// Present for tasks searched on all three planes.
    pub combined: Vec<CombinedReport>,
}

/// Highest AUC among successful entries; ties go to the smallest `p`.
pub fn select(entries: &[GridEntry]) -> Option<(f64, f64)> {
    let mut best: Option<(f64, f64)> = None;
    for e in entries {
        if let Some(a) = e.auc {
            let better = match best {
                None => true,
                Some((bp, ba)) => a > ba || (a == ba && e.p < bp),
            };
            if better {
                best = Some((e.p, a));
            }
        }
    }
    best
}

/// Seed of one grid point, mixed from the master seed and its coordinates.
pub fn cell_seed(seed: u64, task: Task, plane: Plane, k: usize) -> u64 {
    let mut x = seed
        ^ ((task.index() as u64) << 48)
        ^ ((plane.index() as u64) << 40)
        ^ ((k as u64) << 32);
    // splitmix64 finalizer
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

pub fn percent(p: f64) -> String {
    format!("{:.0}%", p * 100.0)
}

fn task_view(cases: &[PreparedCase], t: usize) -> Vec<PreparedCase> {
    cases
        .iter()
        .map(|c| PreparedCase {
            labels: vec![c.labels[t]],
            ..c.clone()
        })
        .collect()
}

struct Job {
    task: Task,
    plane: Plane,
    k: usize,
    config: RunConfig,
}

/// Trains one model per `(task, plane, p)` and picks `p` per `(task,
/// plane)`. Individual failures are recorded; the search fails only when
/// every cell does.
pub fn grid_search(base: &RunConfig) -> Result<GridSearchReport> {
    base.validate_base()?;
    if base.config_id.is_stacked() {
        return Err(PipelineError::Config(format!(
            "grid search runs per plane; {} stacks all planes",
            base.config_id
        )));
    }
    let grid = p_grid();

    // Data per (task, plane), prepared once and shared by its 21 cells.
    let mut data = Vec::new();
    for &plane in &base.planes {
        let load = |split| -> Result<Vec<PreparedCase>> {
            let manifest = scan_dataset(&base.data_root, split)?;
            prepare_split(&manifest, &base.tasks, &[plane], base.resample.as_ref(), base.model.input_size)
        };
        let (train, valid) = (load(Split::Train)?, load(Split::Valid)?);
        for (t, &task) in base.tasks.iter().enumerate() {
            let prepared = PreparedData {
                train: task_view(&train, t),
                valid: task_view(&valid, t),
            };
            data.push(((task, plane), prepared));
        }
    }
    data.sort_by_key(|((task, plane), _)| (task.index(), plane.index()));

    let jobs: Vec<(usize, Job)> = data
        .iter()
        .enumerate()
        .flat_map(|(d, ((task, plane), _))| {
            grid.iter().enumerate().map(move |(k, &p)| {
                let mut config = base.clone();
                config.tasks = vec![*task];
                config.planes = vec![*plane];
                config.augmentation.p = p;
                config.seed = cell_seed(base.seed, *task, *plane, k);
                (
                    d,
                    Job {
                        task: *task,
                        plane: *plane,
                        k,
                        config,
                    },
                )
            })
        })
        .collect();

    let results: Vec<Result<TrainOutcome>> = jobs
        .par_iter()
        .map(|(d, job)| train_prepared(&job.config, &data[*d].1))
        .collect();
    if results.iter().all(|r| r.is_err()) {
        let first = results.into_iter().find_map(|r| r.err()).expect("non-empty grid");
        return Err(PipelineError::Search(format!("every cell failed; first error: {first}")));
    }

    let mut cells = Vec::new();
    let mut chosen_models = Vec::new();
    for (d, ((task, plane), _)) in data.iter().enumerate() {
        let mut entries = Vec::with_capacity(GRID_POINTS);
        let mut outcomes = Vec::with_capacity(GRID_POINTS);
        for ((_, job), result) in jobs.iter().zip(&results).filter(|((jd, _), _)| *jd == d) {
            let entry = match result {
                Ok(outcome) => GridEntry {
                    p: grid[job.k],
                    auc: outcome.metrics[0].auc,
                    error: outcome.metrics[0].auc.is_none().then(|| "AUC undefined".to_string()),
                },
                Err(e) => GridEntry {
                    p: grid[job.k],
                    auc: None,
                    error: Some(e.to_string()),
                },
            };
            debug_assert_eq!((job.task, job.plane), (*task, *plane));
            entries.push(entry);
            outcomes.push(result.as_ref().ok());
        }
        let chosen = select(&entries);
        if let Some((p, _)) = chosen {
            let k = grid.iter().position(|&g| g == p).expect("grid value");
            chosen_models.push(((*task, *plane), d, outcomes[k].expect("successful cell")));
        }
        cells.push(CellReport {
            task: *task,
            plane: *plane,
            entries,
            chosen_p: chosen.map(|c| c.0),
            chosen_auc: chosen.map(|c| c.1),
        });
    }

    let mut combined = Vec::new();
    for &task in &base.tasks {
        let per_plane: Vec<_> = Plane::ALL
            .iter()
            .filter_map(|&plane| chosen_models.iter().find(|(key, _, _)| *key == (task, plane)))
            .collect();
        if !Plane::ALL.iter().all(|p| base.planes.contains(p)) {
            continue;
        }
        if per_plane.len() != 3 {
            combined.push(CombinedReport {
                task,
                auc: None,
                fit: None,
                error: Some("no successful cell on some plane".into()),
            });
            continue;
        }
        let mut fit_probs: [Vec<f64>; 3] = Default::default();
        let mut eval_probs: [Vec<f64>; 3] = Default::default();
        let probs = |logits: Vec<Vec<f64>>| logits.iter().map(|r| sigmoid(r[0])).collect::<Vec<f64>>();
        let mut failure = None;
        for (k, (_, d, outcome)) in per_plane.iter().enumerate() {
            let prepared = &data[*d].1;
            match (
                predict_logits(&outcome.model, &prepared.train),
                predict_logits(&outcome.model, &prepared.valid),
            ) {
                (Ok(train), Ok(valid)) => {
                    fit_probs[k] = probs(train);
                    eval_probs[k] = probs(valid);
                }
                (Err(e), _) | (_, Err(e)) => failure = Some(e.to_string()),
            }
        }
        let prepared = &data[per_plane[0].1].1;
        let labels = |cases: &[PreparedCase]| cases.iter().map(|c| c.labels[0]).collect::<Vec<u8>>();
        let result = match failure {
            Some(e) => Err(e),
            None => combine(
                &fit_probs,
                &labels(&prepared.train),
                &eval_probs,
                &labels(&prepared.valid),
                DEFAULT_LAMBDA,
            )
            .map_err(|e| e.to_string()),
        };
        combined.push(match result {
            Ok((fit, auc)) => CombinedReport {
                task,
                auc,
                fit: Some(FitSummary::from(&fit)),
                error: None,
            },
            Err(e) => CombinedReport {
                task,
                auc: None,
                fit: None,
                error: Some(e),
            },
        });
    }

    Ok(GridSearchReport {
        config_id: base.config_id,
        seed: base.seed,
        epochs: base.epochs,
        cells,
        combined,
    })
}

/// Chosen `p` per task and plane as percentages, then the chosen AUCs and
/// any combined AUCs.
pub fn format_table(report: &GridSearchReport) -> String {
    let mut tasks: Vec<Task> = report.cells.iter().map(|c| c.task).collect();
    tasks.dedup();
    let cell = |task: Task, plane: Plane| report.cells.iter().find(|c| c.task == task && c.plane == plane);
    let mut out = String::new();
    let header = |out: &mut String, title: &str| {
        let _ = writeln!(out, "{title}");
        let _ = writeln!(out, "{:<10}{:>10}{:>10}{:>10}", "task", "axial", "coronal", "sagittal");
    };

    header(&mut out, "Percentage of images augmented");
    for &task in &tasks {
        let _ = write!(out, "{:<10}", task.as_str());
        for plane in Plane::ALL {
            let text = cell(task, plane)
                .and_then(|c| c.chosen_p)
                .map_or_else(|| "-".to_string(), percent);
            let _ = write!(out, "{text:>10}");
        }
        out.push('\n');
    }
    out.push('\n');
    header(&mut out, "Validation AUC at the chosen percentage");
    for &task in &tasks {
        let _ = write!(out, "{:<10}", task.as_str());
        for plane in Plane::ALL {
            let text = cell(task, plane)
                .and_then(|c| c.chosen_auc)
                .map_or_else(|| "-".to_string(), |a| format!("{a:.4}"));
            let _ = write!(out, "{text:>10}");
        }
        out.push('\n');
    }
    if !report.combined.is_empty() {
        out.push('\n');
        let _ = writeln!(out, "{:<10}{:>10}", "task", "combined");
        for c in &report.combined {
            let text = c.auc.map_or_else(|| "-".to_string(), |a| format!("{a:.4}"));
            let _ = writeln!(out, "{:<10}{text:>10}", c.task.as_str());
        }
    }
    out
}

/// Writes the JSON report and the text table next to it (`.txt`).
pub fn write_report(path: &Path, report: &GridSearchReport) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).at(dir)?;
    }
    let json = serde_json::to_string_pretty(report).expect("report serializes");
    fs::write(path, json + "\n").at(path)?;
    let table = path.with_extension("txt");
    fs::write(&table, format_table(report)).at(&table)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(p: f64, auc: Option<f64>) -> GridEntry {
        GridEntry {
            p,
            auc,
            error: auc.is_none().then(|| "failed".to_string()),
        }
    }

    #[test]
    fn grid_is_twenty_one_exact_steps() {
        let grid = p_grid();
        assert_eq!(grid.len(), 21);
        assert_eq!((grid[0], grid[10], grid[20]), (0.0, 0.5, 1.0));
        assert_eq!(grid[15], 0.75);
        let labels: Vec<String> = grid.iter().map(|&p| percent(p)).collect();
        assert_eq!(labels[15], "75%");
        assert_eq!(labels[3], "15%");
        assert_eq!(labels[20], "100%");
    }

    #[test]
    fn selection_prefers_the_smallest_p_among_ties() {
        let entries = vec![
            entry(0.0, Some(0.7)),
            entry(0.05, None),
            entry(0.1, Some(0.9)),
            entry(0.15, Some(0.85)),
            entry(0.2, Some(0.9)),
        ];
        assert_eq!(select(&entries), Some((0.1, 0.9)));
        let mut reversed = entries.clone();
        reversed.reverse();
        assert_eq!(select(&reversed), Some((0.1, 0.9)));
        assert_eq!(select(&[entry(0.0, None)]), None);
        assert_eq!(select(&[]), None);
    }

    #[test]
    fn cell_seeds_differ_across_coordinates() {
        let mut seen = std::collections::BTreeSet::new();
        for task in Task::ALL {
            for plane in Plane::ALL {
                for k in 0..GRID_POINTS {
                    assert!(seen.insert(cell_seed(7, task, plane, k)));
                }
            }
        }
        assert_ne!(cell_seed(7, Task::Acl, Plane::Axial, 0), cell_seed(8, Task::Acl, Plane::Axial, 0));
    }
}
