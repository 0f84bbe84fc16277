//! Exam-level aggregation and the per-batch training objective.

use alloc::format;
use alloc::vec::Vec;

use super::loss::{sigmoid, weighted_bce_logit};
use super::{Aggregation, Cache, Gradients, Mode, Model, Scalar, Tensor4};
use crate::error::{Error, Result};
use crate::metrics::ClassWeights;

/// Exam probability under max-over-slices aggregation.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumePrediction {
    pub probability: f64,
    pub logit: f64,
    /// First slice reaching the maximum.
    pub argmax: usize,
    pub slice_probabilities: Vec<f64>,
}

/// Index of the first maximum in each consecutive group of `group` values.
pub fn group_argmax<T: Scalar>(values: &[T], group: usize) -> Vec<usize> {
    values
        .chunks(group)
        .map(|chunk| {
            let mut best = 0;
            for (i, v) in chunk.iter().enumerate() {
                if *v > chunk[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

fn check_single_task<T: Scalar>(model: &Model<T>) -> Result<()> {
    if model.config().out_tasks != 1 {
        return Err(Error::Config(
            "max-over-slices aggregation needs a single-task head".into(),
        ));
    }
    Ok(())
}

/// Eval-mode max over the per-slice probabilities of one volume, given as
/// an `s x C x H x W` tensor.
pub fn predict_volume_max<T: Scalar>(model: &Model<T>, slices: &Tensor4<T>) -> Result<VolumePrediction> {
    check_single_task(model)?;
    if slices.n == 0 {
        return Err(Error::EmptyVolume);
    }
    let logits = model.logits(slices)?;
    let argmax = group_argmax(&logits, logits.len())[0];
    let logit = logits[argmax].as_f64();
    Ok(VolumePrediction {
        probability: sigmoid(logit),
        logit,
        argmax,
        slice_probabilities: logits.iter().map(|z| sigmoid(z.as_f64())).collect(),
    })
}

/// Eval-mode exam logits for a batch holding `group` consecutive slices per
/// volume.
pub fn predict_max_batch<T: Scalar>(model: &Model<T>, batch: &Tensor4<T>, group: usize) -> Result<Vec<f64>> {
    check_single_task(model)?;
    check_grouping(batch, group)?;
    let logits = model.logits(batch)?;
    Ok(logits
        .chunks(group)
        .zip(group_argmax(&logits, group))
        .map(|(chunk, i)| chunk[i].as_f64())
        .collect())
}

/// Independent sigmoid per task for stacked-channel inputs.
pub fn predict_multi<T: Scalar>(model: &Model<T>, stacked: &Tensor4<T>) -> Result<Vec<f64>> {
    if model.config().aggregation != Aggregation::StackedChannels {
        return Err(Error::Config("model does not take stacked channels".into()));
    }
    if stacked.n != 1 {
        return Err(Error::Shape(format!("expected one stacked exam, got {}", stacked.n)));
    }
    Ok(model
        .logits(stacked)?
        .into_iter()
        .map(|z| sigmoid(z.as_f64()))
        .collect())
}

fn check_grouping<T>(batch: &Tensor4<T>, group: usize) -> Result<()> {
    if group == 0 {
        return Err(Error::EmptyVolume);
    }
    if !batch.n.is_multiple_of(group) {
        return Err(Error::Shape(format!(
            "batch of {} slices is not a multiple of {group}",
            batch.n
        )));
    }
    Ok(())
}

/// Result of one train-mode forward and backward pass.
#[derive(Debug, Clone)]
pub struct StepResult<T> {
    /// Mean weighted loss per exam.
    pub loss: f64,
    pub gradients: Gradients<T>,
    pub cache: Cache<T>,
    /// Exam-level logits (`exams x out_tasks`).
    pub logits: Vec<f64>,
}

/// Max-over-slices objective: each exam's loss uses its highest-scoring
/// slice, and the gradient flows only into that slice.
pub fn max_over_slices_step<T: Scalar>(
    model: &Model<T>,
    batch: &Tensor4<T>,
    group: usize,
    labels: &[u8],
    weights: &ClassWeights,
) -> Result<StepResult<T>> {
    check_single_task(model)?;
    check_grouping(batch, group)?;
    let exams = batch.n / group;
    if labels.len() != exams {
        return Err(Error::Shape(format!("{} labels for {exams} exams", labels.len())));
    }
    let fwd = model.forward(batch, Mode::Train)?;
    let cache = fwd.cache.expect("train mode caches");
    let argmax = group_argmax(&fwd.logits, group);
    let mut dlogits = alloc::vec![T::zero(); batch.n];
    let mut loss = 0.0;
    let mut exam_logits = Vec::with_capacity(exams);
    let scale = 1.0 / exams as f64;
    for (e, (&best, &y)) in argmax.iter().zip(labels).enumerate() {
        let idx = e * group + best;
        let z = fwd.logits[idx].as_f64();
        let term = weighted_bce_logit(z, y, weights.for_label(y));
        loss += term.loss * scale;
        dlogits[idx] = T::cast(term.grad_logit * scale);
        exam_logits.push(z);
    }
    let gradients = model.backward(&cache, &dlogits)?;
    Ok(StepResult {
        loss,
        gradients,
        cache,
        logits: exam_logits,
    })
}

/// Every slice is a sample carrying its exam's label; an exam's loss is the
/// mean over its slices. Exam logits are still reported as the max.
pub fn slice_label_step<T: Scalar>(
    model: &Model<T>,
    batch: &Tensor4<T>,
    group: usize,
    labels: &[u8],
    weights: &ClassWeights,
) -> Result<StepResult<T>> {
    check_single_task(model)?;
    check_grouping(batch, group)?;
    let exams = batch.n / group;
    if labels.len() != exams {
        return Err(Error::Shape(format!("{} labels for {exams} exams", labels.len())));
    }
    let fwd = model.forward(batch, Mode::Train)?;
    let cache = fwd.cache.expect("train mode caches");
    let scale = 1.0 / batch.n as f64;
    let mut loss = 0.0;
    let mut dlogits = Vec::with_capacity(batch.n);
    for (k, z) in fwd.logits.iter().enumerate() {
        let y = labels[k / group];
        let term = weighted_bce_logit(z.as_f64(), y, weights.for_label(y));
        loss += term.loss * scale;
        dlogits.push(T::cast(term.grad_logit * scale));
    }
    let exam_logits = fwd
        .logits
        .chunks(group)
        .zip(group_argmax(&fwd.logits, group))
        .map(|(chunk, i)| chunk[i].as_f64())
        .collect();
    let gradients = model.backward(&cache, &dlogits)?;
    Ok(StepResult {
        loss,
        gradients,
        cache,
        logits: exam_logits,
    })
}

/// One sample per exam; `labels` is `exams x out_tasks` row-major and
/// `weights` holds one entry per task. Task losses are summed.
pub fn stacked_step<T: Scalar>(
    model: &Model<T>,
    batch: &Tensor4<T>,
    labels: &[u8],
    weights: &[ClassWeights],
) -> Result<StepResult<T>> {
    let tasks = model.config().out_tasks;
    if labels.len() != batch.n * tasks || weights.len() != tasks {
        return Err(Error::Shape(format!(
            "{} labels and {} weights for {} exams x {tasks} tasks",
            labels.len(),
            weights.len(),
            batch.n
        )));
    }
    let fwd = model.forward(batch, Mode::Train)?;
    let cache = fwd.cache.expect("train mode caches");
    let scale = 1.0 / batch.n as f64;
    let mut loss = 0.0;
    let mut dlogits = Vec::with_capacity(labels.len());
    let mut logits = Vec::with_capacity(labels.len());
    for (k, (&z, &y)) in fwd.logits.iter().zip(labels).enumerate() {
        let z = z.as_f64();
        let term = weighted_bce_logit(z, y, weights[k % tasks].for_label(y));
        loss += term.loss * scale;
        dlogits.push(T::cast(term.grad_logit * scale));
        logits.push(z);
    }
    let gradients = model.backward(&cache, &dlogits)?;
    Ok(StepResult {
        loss,
        gradients,
        cache,
        logits,
    })
}
