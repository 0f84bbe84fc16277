//! Training driver for the four setups.

use std::fs;
use std::path::Path;

use kneemri_core::augment::{apply_plan, sample_plan, AugmentationPolicy};
use kneemri_core::metrics::{auc, class_weights, ClassWeights};
use kneemri_core::model::{
    max_over_slices_step, predict_max_batch, slice_label_step, stacked_step, weighted_bce_logit, AdamState, Aggregation, Model,
    StepResult, Tensor4,
};
use kneemri_core::resample::{resize_volume, ResampleSpec};
use kneemri_core::{MriVolume, Plane, Task};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{save_checkpoint, CheckpointHeader};
use crate::config::{ConfigId, RunConfig};
use crate::dataset::{scan_dataset, DatasetManifest, Split};
use crate::error::{IoContext, PipelineError, Result};
use crate::predictions::{write_predictions, PredictionRecord, View};

// Exams per eval-mode forward call.
const EVAL_CHUNK: usize = 8;

/// One exam after slice-count normalization and resizing.
#[derive(Debug, Clone)]
pub struct PreparedCase {
    pub case_id: String,
    /// One label per configured task.
    pub labels: Vec<u8>,
    /// One volume per configured plane.
    pub volumes: Vec<MriVolume>,
}

#[derive(Debug, Clone)]
pub struct PreparedData {
    pub train: Vec<PreparedCase>,
    pub valid: Vec<PreparedCase>,
}

impl PreparedData {
    pub fn split(&self, split: Split) -> &[PreparedCase] {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
        }
    }
}

pub fn prepare_volume(vol: &MriVolume, resample: Option<&ResampleSpec>, size: usize) -> Result<MriVolume> {
    let vol = match resample {
        Some(spec) => spec.apply(vol)?,
        None => vol.clone(),
    };
    Ok(resize_volume(&vol, size, size)?)
}

pub fn prepare_split(
    manifest: &DatasetManifest,
    tasks: &[Task],
    planes: &[Plane],
    resample: Option<&ResampleSpec>,
    size: usize,
) -> Result<Vec<PreparedCase>> {
    let labels: Vec<Vec<u8>> = tasks
        .iter()
        .map(|&t| manifest.case_labels(t))
        .collect::<Result<_>>()?;
    manifest
        .cases
        .iter()
        .enumerate()
        .map(|(i, case)| {
            let volumes = planes
                .iter()
                .map(|&p| prepare_volume(&case.load(p)?, resample, size))
                .collect::<Result<_>>()?;
            Ok(PreparedCase {
                case_id: case.case_id.clone(),
                labels: labels.iter().map(|l| l[i]).collect(),
                volumes,
            })
        })
        .collect()
}

/// Loads and prepares both splits for a configuration.
pub fn prepare_data(config: &RunConfig) -> Result<PreparedData> {
    let load = |split| -> Result<Vec<PreparedCase>> {
        let manifest = scan_dataset(&config.data_root, split)?;
        if manifest.is_empty() {
            return Err(PipelineError::Layout(format!("no complete cases in the {split} split")));
        }
        prepare_split(
            &manifest,
            &config.tasks,
            &config.planes,
            config.resample.as_ref(),
            config.model.input_size,
        )
    };
    Ok(PreparedData {
        train: load(Split::Train)?,
        valid: load(Split::Valid)?,
    })
}

/// Number of augmentation transforms applied, per split.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentCounts {
    pub train: usize,
    pub valid: usize,
}

impl AugmentCounts {
    fn record(&mut self, split: Split, transforms: usize) {
        match split {
            Split::Train => self.train += transforms,
            Split::Valid => self.valid += transforms,
        }
    }
}

/// Volumes fed to the network for one exam. Only training exams are
/// augmented; every transform applied is recorded in `counts`.
pub fn materialize(
    case: &PreparedCase,
    split: Split,
    policy: &AugmentationPolicy,
    rng: &mut ChaCha8Rng,
    counts: &mut AugmentCounts,
) -> Result<Vec<MriVolume>> {
    if split != Split::Train || policy.p == 0.0 {
        return Ok(case.volumes.clone());
    }
    case.volumes
        .iter()
        .map(|vol| {
            let plan = sample_plan(policy, rng)?;
            counts.record(split, plan.len());
            Ok(apply_plan(vol, &plan)?)
        })
        .collect()
}

/// Every slice becomes one sample, its intensities repeated over
/// `channels` input channels.
pub fn slice_tensor(volumes: &[&MriVolume], channels: usize) -> Tensor4<f32> {
    let first = volumes[0];
    let (h, w) = (first.height(), first.width());
    let n: usize = volumes.iter().map(|v| v.slices()).sum();
    let mut data = Vec::with_capacity(n * channels * h * w);
    for vol in volumes {
        for s in 0..vol.slices() {
            let slice = vol.slice(s);
            for _ in 0..channels {
                data.extend(slice.iter().map(|&v| v as f32));
            }
        }
    }
    Tensor4::from_vec(n, channels, h, w, data).expect("consistent volume shapes")
}

/// One sample per exam with the slices of all its planes as channels.
pub fn stacked_tensor(exams: &[&[MriVolume]]) -> Tensor4<f32> {
    let first = &exams[0][0];
    let (h, w) = (first.height(), first.width());
    let channels: usize = exams[0].iter().map(|v| v.slices()).sum();
    let mut data = Vec::with_capacity(exams.len() * channels * h * w);
    for volumes in exams {
        for vol in *volumes {
            data.extend(vol.data().iter().map(|&v| v as f32));
        }
    }
    Tensor4::from_vec(exams.len(), channels, h, w, data).expect("consistent exam shapes")
}

/// Eval-mode exam logits, `cases x tasks`.
pub fn predict_logits(model: &Model<f32>, cases: &[PreparedCase]) -> Result<Vec<Vec<f64>>> {
    let config = model.config();
    let mut out = Vec::with_capacity(cases.len());
    match config.aggregation {
        Aggregation::MaxOverSlices => {
            let mut i = 0;
            while i < cases.len() {
                // Exams batch together only when their slice counts agree.
                let group = cases[i].volumes[0].slices();
                let mut j = i + 1;
                while j < cases.len() && j - i < EVAL_CHUNK && cases[j].volumes[0].slices() == group {
                    j += 1;
                }
                let vols: Vec<&MriVolume> = cases[i..j].iter().map(|c| &c.volumes[0]).collect();
                let batch = slice_tensor(&vols, config.in_channels);
                out.extend(predict_max_batch(model, &batch, group)?.into_iter().map(|z| vec![z]));
                i = j;
            }
        }
        Aggregation::StackedChannels => {
            for chunk in cases.chunks(EVAL_CHUNK) {
                let exams: Vec<&[MriVolume]> = chunk.iter().map(|c| &c.volumes[..]).collect();
                let logits = model.logits(&stacked_tensor(&exams))?;
                out.extend(
                    logits
                        .chunks(config.out_tasks)
                        .map(|row| row.iter().map(|&z| z as f64).collect()),
                );
            }
        }
    }
    Ok(out)
}

/// Mean over exams of the summed per-task weighted loss.
pub fn mean_loss(logits: &[Vec<f64>], cases: &[PreparedCase], weights: &[ClassWeights]) -> f64 {
    let total: f64 = logits
        .iter()
        .zip(cases)
        .map(|(row, case)| {
            row.iter()
                .zip(&case.labels)
                .zip(weights)
                .map(|((&z, &y), w)| weighted_bce_logit(z, y, w.for_label(y)).loss)
                .sum::<f64>()
        })
        .sum();
    total / cases.len() as f64
}

pub fn task_aucs(logits: &[Vec<f64>], cases: &[PreparedCase], tasks: usize) -> Vec<Option<f64>> {
    (0..tasks)
        .map(|t| {
            let scores: Vec<f64> = logits.iter().map(|row| row[t]).collect();
            let labels: Vec<u8> = cases.iter().map(|c| c.labels[t]).collect();
            auc(&scores, &labels).ok()
        })
        .collect()
}

pub fn sigmoid(z: f64) -> f64 {
    kneemri_core::model::sigmoid(z)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_auc: Vec<Option<f64>>,
}

/// Validation summary for one task of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub config_id: ConfigId,
    pub task: Task,
    pub plane: View,
    pub auc: Option<f64>,
    pub epochs: usize,
    pub best_epoch: usize,
    pub val_loss: f64,
    pub history: Vec<EpochLog>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub header: CheckpointHeader,
    /// Parameters of the retained epoch.
    pub model: Model<f32>,
    pub best_epoch: usize,
    pub metrics: Vec<Metrics>,
    /// Validation probabilities of the retained epoch.
    pub predictions: Vec<PredictionRecord>,
    pub counts: AugmentCounts,
}

pub fn view_of(config_id: ConfigId, planes: &[Plane]) -> View {
    if config_id.is_stacked() {
        View::Stacked
    } else {
        planes[0].into()
    }
}

pub fn prediction_records(
    cases: &[PreparedCase],
    logits: &[Vec<f64>],
    tasks: &[Task],
    view: View,
) -> Vec<PredictionRecord> {
    let mut out = Vec::with_capacity(cases.len() * tasks.len());
    for (case, row) in cases.iter().zip(logits) {
        for (&task, &z) in tasks.iter().zip(row) {
            out.push(PredictionRecord {
                case_id: case.case_id.clone(),
                task,
                plane: view,
                probability: sigmoid(z),
            });
        }
    }
    out
}

fn seeded(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// The parameters a run starts from.
pub fn initial_model(config: &RunConfig) -> Result<Model<f32>> {
    Ok(Model::new(config.model.clone(), &mut seeded(config.seed, 0))?)
}

/// Trains on prepared data without touching the filesystem. The retained
/// model is the epoch with the lowest validation loss (the initialization
/// when `epochs` is zero).
pub fn train_prepared(config: &RunConfig, data: &PreparedData) -> Result<TrainOutcome> {
    config.validate()?;
    if data.train.is_empty() || data.valid.is_empty() {
        return Err(PipelineError::Layout("both splits need at least one case".into()));
    }
    let tasks = config.tasks.len();
    let weights: Vec<ClassWeights> = (0..tasks)
        .map(|t| {
            let labels: Vec<u8> = data.train.iter().map(|c| c.labels[t]).collect();
            class_weights(&labels)
        })
        .collect::<kneemri_core::Result<_>>()?;

    let mut model = initial_model(config)?;
    let mut adam = AdamState::new(config.optimizer, &model);
    let mut shuffle_rng = seeded(config.seed, 1);
    let mut augment_rng = seeded(config.seed, 2);
    let mut counts = AugmentCounts::default();

    let initial_logits = predict_logits(&model, &data.valid)?;
    let mut best = (
        0,
        model.clone(),
        mean_loss(&initial_logits, &data.valid, &weights),
        initial_logits,
    );
    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..data.train.len()).collect();

    for epoch in 1..=config.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut train_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            let exams: Vec<Vec<MriVolume>> = batch
                .iter()
                .map(|&i| materialize(&data.train[i], Split::Train, &config.augmentation, &mut augment_rng, &mut counts))
                .collect::<Result<_>>()?;
            let labels: Vec<u8> = batch.iter().flat_map(|&i| data.train[i].labels.iter().copied()).collect();
            let step = batch_step(&model, config.config_id, &exams, &labels, &weights)?;
            train_loss += step.loss * batch.len() as f64;
            model.commit_batch_stats(&step.cache);
            adam.step(&mut model, &step.gradients)?;
        }
        train_loss /= data.train.len() as f64;

        let logits = predict_logits(&model, &data.valid)?;
        let val_loss = mean_loss(&logits, &data.valid, &weights);
        history.push(EpochLog {
            epoch,
            train_loss,
            val_loss,
            val_auc: task_aucs(&logits, &data.valid, tasks),
        });
        // The initialization is only a fallback for zero epochs.
        if epoch == 1 || val_loss < best.2 {
            best = (epoch, model.clone(), val_loss, logits);
        } else if config.patience.is_some_and(|p| epoch - best.0 >= p) {
            break;
        }
    }

    let (best_epoch, model, val_loss, logits) = best;
    let view = view_of(config.config_id, &config.planes);
    let aucs = task_aucs(&logits, &data.valid, tasks);
    let metrics = config
        .tasks
        .iter()
        .zip(aucs)
        .map(|(&task, auc)| Metrics {
            config_id: config.config_id,
            task,
            plane: view,
            auc,
            epochs: config.epochs,
            best_epoch,
            val_loss,
            history: history.clone(),
        })
        .collect();
    Ok(TrainOutcome {
        header: CheckpointHeader::from_config(config, best_epoch),
        predictions: prediction_records(&data.valid, &logits, &config.tasks, view),
        model,
        best_epoch,
        metrics,
        counts,
    })
}

fn batch_step(
    model: &Model<f32>,
    config_id: ConfigId,
    exams: &[Vec<MriVolume>],
    labels: &[u8],
    weights: &[ClassWeights],
) -> Result<StepResult<f32>> {
    let step = if config_id.is_stacked() {
        let views: Vec<&[MriVolume]> = exams.iter().map(|e| &e[..]).collect();
        stacked_step(model, &stacked_tensor(&views), labels, weights)?
    } else {
        let group = exams[0][0].slices();
        if exams.iter().any(|e| e[0].slices() != group) {
            return Err(PipelineError::Config(
                "volumes in one batch need equal slice counts".into(),
            ));
        }
        let vols: Vec<&MriVolume> = exams.iter().map(|e| &e[0]).collect();
        let batch = slice_tensor(&vols, model.config().in_channels);
        // Only c41 routes the loss through the highest slice; a fixed slice
        // count lets c42 train on every slice with its exam label.
        if config_id == ConfigId::C41 {
            max_over_slices_step(model, &batch, group, labels, &weights[0])?
        } else {
            slice_label_step(model, &batch, group, labels, &weights[0])?
        }
    };
    if !step.loss.is_finite() {
        return Err(PipelineError::Core(kneemri_core::Error::Optimizer(
            "training loss diverged".into(),
        )));
    }
    Ok(step)
}

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const PREDICTIONS_FILE: &str = "predictions.csv";
pub const METRICS_FILE: &str = "metrics.json";

/// Loads data, trains, and writes `model.ckpt`, `predictions.csv` and
/// `metrics.json` into the configured output directory.
pub fn train(config: &RunConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let data = prepare_data(config)?;
    let outcome = train_prepared(config, &data)?;
    write_outputs(&config.out_dir, &outcome)?;
    Ok(outcome)
}

pub fn write_outputs(out_dir: &Path, outcome: &TrainOutcome) -> Result<()> {
    fs::create_dir_all(out_dir).at(out_dir)?;
    save_checkpoint(&out_dir.join(CHECKPOINT_FILE), &outcome.header, &outcome.model)?;
    write_predictions(&out_dir.join(PREDICTIONS_FILE), &outcome.predictions)?;
    let path = out_dir.join(METRICS_FILE);
    let json = serde_json::to_string_pretty(&outcome.metrics).expect("metrics serialize");
    fs::write(&path, json + "\n").at(&path)
}
