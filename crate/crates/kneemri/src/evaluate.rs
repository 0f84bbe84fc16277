//! Checkpoint evaluation, per plane and through the plane combiner.

use std::collections::BTreeMap;
use std::path::Path;

use kneemri_core::ensemble::{fit_logreg, CombinerModel, LogregFit, DEFAULT_LAMBDA};
use kneemri_core::metrics::auc;
use kneemri_core::model::Model;
use kneemri_core::{Plane, Task};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, CheckpointHeader};
use crate::config::ConfigId;
use crate::dataset::{scan_dataset, Split};
use crate::error::{PipelineError, Result};
use crate::predictions::{PredictionRecord, View};
use crate::train::{prediction_records, predict_logits, prepare_split, sigmoid, view_of, PreparedCase};

/// Newton fit diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub converged: bool,
    pub iterations: usize,
    pub gradient_norm: f64,
}

impl From<&LogregFit> for FitSummary {
    fn from(fit: &LogregFit) -> Self {
        FitSummary {
            converged: fit.converged,
            iterations: fit.iterations,
            gradient_norm: fit.gradient_norm,
        }
    }
}

/// One row of the results table: AUC per plane plus the combined column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskReport {
    pub task: Task,
    pub planes: BTreeMap<View, Option<f64>>,
    pub combined: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub combiner: Option<CombinerModel>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fit: Option<FitSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: Split,
    pub tasks: Vec<TaskReport>,
}

/// Cases of one split and the model's eval-mode logits on them.
pub struct Scored {
    pub cases: Vec<PreparedCase>,
    pub logits: Vec<Vec<f64>>,
}

impl Scored {
    pub fn probabilities(&self, task: usize) -> Vec<f64> {
        self.logits.iter().map(|row| sigmoid(row[task])).collect()
    }

    pub fn labels(&self, task: usize) -> Vec<u8> {
        self.cases.iter().map(|c| c.labels[task]).collect()
    }

    pub fn auc(&self, task: usize) -> Option<f64> {
        auc(&self.probabilities(task), &self.labels(task)).ok()
    }
}

/// Prepares a split the way the checkpoint was trained and scores it.
pub fn score_split(header: &CheckpointHeader, model: &Model<f32>, split: Split, data_root: Option<&Path>) -> Result<Scored> {
    let root = data_root.unwrap_or(&header.data_root);
    let manifest = scan_dataset(root, split)?;
    let cases = prepare_split(
        &manifest,
        &header.tasks,
        &header.planes,
        header.resample.as_ref(),
        header.model.input_size,
    )?;
    let logits = predict_logits(model, &cases)?;
    Ok(Scored { cases, logits })
}

/// Per-task AUC of one checkpoint, plus its prediction records.
pub fn evaluate(checkpoint: &Path, split: Split, data_root: Option<&Path>) -> Result<(EvalReport, Vec<PredictionRecord>)> {
    let (header, model) = load_checkpoint(checkpoint)?;
    let scored = score_split(&header, &model, split, data_root)?;
    let view = view_of(header.config_id, &header.planes);
    let tasks = header
        .tasks
        .iter()
        .enumerate()
        .map(|(t, &task)| TaskReport {
            task,
            planes: BTreeMap::from([(view, scored.auc(t))]),
            combined: None,
            combiner: None,
            fit: None,
        })
        .collect();
    let records = prediction_records(&scored.cases, &scored.logits, &header.tasks, view);
    Ok((EvalReport { split, tasks }, records))
}

fn features(per_plane: &[Vec<f64>; 3]) -> Vec<[f64; 3]> {
    (0..per_plane[0].len())
        .map(|i| [per_plane[0][i], per_plane[1][i], per_plane[2][i]])
        .collect()
}

/// Fits the combiner on `(fit_probs, fit_labels)` and returns the fit with
/// the combined AUC on `(eval_probs, eval_labels)`.
pub fn combine(
    fit_probs: &[Vec<f64>; 3],
    fit_labels: &[u8],
    eval_probs: &[Vec<f64>; 3],
    eval_labels: &[u8],
    lambda: f64,
) -> Result<(LogregFit, Option<f64>)> {
    let fit = fit_logreg(&features(fit_probs), fit_labels, lambda)?;
    let scores: Vec<f64> = features(eval_probs).iter().map(|x| fit.model.predict(x)).collect();
    Ok((fit, auc(&scores, eval_labels).ok()))
}

/// Evaluates axial, coronal and sagittal checkpoints of one task and the
/// combiner fit on their training-split probabilities.
pub fn evaluate_combined(checkpoints: [&Path; 3], split: Split, data_root: Option<&Path>) -> Result<EvalReport> {
    let mut loaded = Vec::new();
    for (path, plane) in checkpoints.iter().zip(Plane::ALL) {
        let (header, model) = load_checkpoint(path)?;
        if header.config_id == ConfigId::C43 || header.config_id == ConfigId::C44 {
            return Err(PipelineError::Config(format!(
                "{}: stacked {} models have no per-plane counterpart",
                path.display(),
                header.config_id
            )));
        }
        if header.planes != [plane] {
            return Err(PipelineError::Config(format!(
                "{}: expected the {plane} checkpoint, got {:?}",
                path.display(),
                header.planes
            )));
        }
        loaded.push((header, model));
    }
    let task = loaded[0].0.tasks[0];
    if loaded.iter().any(|(h, _)| h.tasks != [task]) {
        return Err(PipelineError::Config(
            "combined checkpoints must share one task".into(),
        ));
    }

    let mut fit_probs: [Vec<f64>; 3] = Default::default();
    let mut eval_probs: [Vec<f64>; 3] = Default::default();
    let mut planes = BTreeMap::new();
    let (mut fit_labels, mut eval_labels) = (Vec::new(), Vec::new());
    for (k, (header, model)) in loaded.iter().enumerate() {
        let train = score_split(header, model, Split::Train, data_root)?;
        let target = score_split(header, model, split, data_root)?;
        planes.insert(View::from(Plane::ALL[k]), target.auc(0));
        fit_probs[k] = train.probabilities(0);
        eval_probs[k] = target.probabilities(0);
        fit_labels = train.labels(0);
        eval_labels = target.labels(0);
    }
    let (fit, combined) = combine(&fit_probs, &fit_labels, &eval_probs, &eval_labels, DEFAULT_LAMBDA)?;
    Ok(EvalReport {
        split,
        tasks: vec![TaskReport {
            task,
            planes,
            combined,
            combiner: Some(fit.model),
            fit: Some(FitSummary::from(&fit)),
        }],
    })
}
