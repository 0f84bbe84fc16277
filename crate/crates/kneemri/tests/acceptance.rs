//! Acceptance suite. Runs every criterion in sequence (so the timed ones are
//! not competing for the CPU), prints one PASS/FAIL line per criterion and
//! exits non-zero if any failed.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use kneemri::config::{ConfigId, RunConfig};
use kneemri::evaluate::{combine, evaluate_combined};
use kneemri::grid::{format_table, grid_search, percent, GridEntry};
use kneemri::synth::{generate_synthetic, SynthOptions};
use kneemri::train::{materialize, train, AugmentCounts, PreparedCase, CHECKPOINT_FILE};
use kneemri::Split;
use kneemri_core::augment::{apply_plan, sample_plan, AugmentationPolicy, ChannelMode, Stage};
use kneemri_core::ensemble::DEFAULT_LAMBDA;
use kneemri_core::metrics::{auc, ClassWeights};
use kneemri_core::model::{predict_volume_max, Activation, Aggregation, Mode, Model, ModelConfig, Tensor4};
use kneemri_core::resample::interpolation_matrix;
use kneemri_core::{MriVolume, Plane, Task};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::tempdir;

type Outcome = Result<String, String>;
type Criterion<'a> = (&'static str, Box<dyn Fn() -> Outcome + 'a>);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, budget: Duration, what: &str) -> Result<(), String> {
    ensure(elapsed < budget, || format!("{what} took {elapsed:.1?}, budget {budget:?}"))
}

fn interpolation() -> Outcome {
    let start = Instant::now();
    let row = interpolation_matrix(5, 4).map_err(|e| e.to_string())?.row(0).to_vec();
    let expected = [0.8, 0.2, 0.0, 0.0, 0.0];
    ensure(
        row.len() == 5 && row.iter().zip(expected).all(|(a, b)| (a - b).abs() <= 1e-12),
        || format!("(5,4) row 0 = {row:?}"),
    )?;
    let mut worst: f64 = 0.0;
    for n in 1..=61 {
        for m in 1..=61 {
            let mat = interpolation_matrix(n, m).map_err(|e| e.to_string())?;
            for j in 0..m {
                worst = worst.max((mat.row(j).iter().sum::<f64>() - 1.0).abs());
            }
            if n == m {
                for j in 0..m {
                    for i in 0..n {
                        let want = if i == j { 1.0 } else { 0.0 };
                        ensure(mat.weight(j, i) == want, || format!("n = m = {n} is not the identity"))?;
                    }
                }
            }
        }
    }
    ensure(worst <= 1e-9, || format!("row sum off by {worst:e}"))?;
    within(start.elapsed(), Duration::from_secs(1), "interpolation checks")?;
    Ok(format!("row sums within {worst:.1e}, {:.0?}", start.elapsed()))
}

// Central differences with the five-point stencil; gradients below the
// floor are compared absolutely (biases ahead of normalization have an
// exact zero gradient).
fn gradient_oracle() -> Outcome {
    const STEP: f64 = 1e-4;
    const FLOOR: f64 = 1e-6;
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let config = ModelConfig {
            stem_filters: 4,
            stage_channels: vec![4, 8],
            stage_blocks: 1,
            input_size: 16,
            activation: Activation::Silu,
            ..ModelConfig::new(1, 1, Aggregation::MaxOverSlices)
        };
        let mut model = Model::<f64>::new(config, &mut rng).map_err(|e| e.to_string())?;
        for block in model.params_mut() {
            block.iter_mut().for_each(|v| *v += rng.random_range(-0.1..0.1));
        }
        let x = Tensor4::from_vec(4, 1, 16, 16, (0..4 * 256).map(|_| rng.random()).collect()).unwrap();
        let coeffs: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let objective = |m: &Model<f64>| -> f64 {
            let logits = m.forward(&x, Mode::Train).unwrap().logits;
            logits.iter().zip(&coeffs).map(|(z, c)| z * c).sum()
        };
        let fwd = model.forward(&x, Mode::Train).map_err(|e| e.to_string())?;
        let grads = model.backward(fwd.cache.as_ref().unwrap(), &coeffs).map_err(|e| e.to_string())?;
        for (b, block) in grads.blocks.iter().enumerate() {
            for (i, &analytic) in block.iter().enumerate() {
                let orig = model.params()[b][i];
                let mut at = |h: f64| {
                    model.params_mut()[b][i] = orig + h;
                    objective(&model)
                };
                let numeric = (8.0 * (at(STEP) - at(-STEP)) - (at(2.0 * STEP) - at(-2.0 * STEP))) / (12.0 * STEP);
                model.params_mut()[b][i] = orig;
                let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR);
                worst = worst.max(err);
            }
        }
    }
    ensure(worst < 1e-4, || format!("worst relative error {worst:e}"))?;
    within(start.elapsed(), Duration::from_secs(120), "gradient oracle")?;
    Ok(format!("20 models, worst relative error {worst:.1e}, {:.1?}", start.elapsed()))
}

fn pair_count_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] == 1 && labels[j] == 0 {
                pairs += 1.0;
                wins += if si > sj {
                    1.0
                } else if si == sj {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    wins / pairs
}

fn auc_oracle() -> Outcome {
    let start = Instant::now();
    let hand = auc(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]).map_err(|e| e.to_string())?;
    ensure(hand == 0.75, || format!("hand case gave {hand}"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut instances = 0;
    while instances < 1000 {
        let n = rng.random_range(2..=200);
        let levels = rng.random_range(2..=30);
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64 / levels as f64).collect();
        let labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
        if !labels.contains(&0) || !labels.contains(&1) {
            continue;
        }
        let fast = auc(&scores, &labels).map_err(|e| e.to_string())?;
        let slow = pair_count_auc(&scores, &labels);
        ensure(fast == slow, || format!("instance {instances}: {fast} vs {slow}"))?;
        instances += 1;
    }
    within(start.elapsed(), Duration::from_secs(10), "AUC oracle")?;
    Ok(format!("1000 instances exact, hand case 0.75, {:.1?}", start.elapsed()))
}

fn class_weight_balance() -> Outcome {
    let n = 1370;
    let mut lines = Vec::new();
    for (task, pos) in [("abnormal", 1104), ("acl", 319), ("meniscus", 508)] {
        let w = ClassWeights::from_counts(pos, n - pos).map_err(|e| e.to_string())?;
        let (sp, sn) = (pos as f64 * w.w_pos, (n - pos) as f64 * w.w_neg);
        ensure((sp - 685.0).abs() <= 1e-6 && (sn - 685.0).abs() <= 1e-6, || {
            format!("{task}: {sp} / {sn}")
        })?;
        lines.push(format!("{task} w+ {:.4} w- {:.4}", w.w_pos, w.w_neg));
    }
    Ok(lines.join(", "))
}

fn aggregation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let config = ModelConfig {
        input_size: 16,
        ..ModelConfig::new(1, 1, Aggregation::MaxOverSlices)
    };
    let mut model = Model::<f32>::new(config, &mut rng).map_err(|e| e.to_string())?;
    for block in model.params_mut() {
        block.iter_mut().for_each(|v| *v += rng.random_range(-0.2f32..0.2));
    }
    for volume in 0..100 {
        let s = rng.random_range(1..=12);
        let slices: Vec<Vec<f32>> = (0..s).map(|_| (0..256).map(|_| rng.random()).collect()).collect();
        let stack = |order: &[usize]| {
            Tensor4::from_vec(s, 1, 16, 16, order.iter().flat_map(|&k| slices[k].clone()).collect()).unwrap()
        };
        let identity: Vec<usize> = (0..s).collect();
        let pred = predict_volume_max(&model, &stack(&identity)).map_err(|e| e.to_string())?;
        let singles: Vec<f64> = slices
            .iter()
            .map(|sl| model.logits(&Tensor4::from_vec(1, 1, 16, 16, sl.clone()).unwrap()).unwrap()[0] as f64)
            .collect();
        let max = singles.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        ensure(pred.logit == max, || format!("volume {volume}: {} vs {max}", pred.logit))?;
        let mut order = identity.clone();
        order.shuffle(&mut rng);
        let permuted = predict_volume_max(&model, &stack(&order)).map_err(|e| e.to_string())?;
        ensure(permuted.probability == pred.probability, || format!("volume {volume}: permutation changed the output"))?;
        ensure(order[permuted.argmax] == pred.argmax || singles[order[permuted.argmax]] == max, || {
            format!("volume {volume}: argmax did not follow the permutation")
        })?;
    }
    Ok("100 volumes exact, permutation invariant".into())
}

fn augmentation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let vol = MriVolume::new("0001", Plane::Axial, 3, 24, 24, (0..3 * 576).map(|_| rng.random()).collect())
        .map_err(|e| e.to_string())?;

    // p = 0 through the training-data path.
    let case = PreparedCase {
        case_id: "0001".into(),
        labels: vec![1],
        volumes: vec![vol.clone()],
    };
    let mut counts = AugmentCounts::default();
    for mode in [ChannelMode::ThreeChannel, ChannelMode::SingleChannel] {
        let policy = AugmentationPolicy {
            p: 0.0,
            channel_mode: mode,
            baseline_extras: true,
            crop_size: 16,
        };
        for _ in 0..100 {
            let out = materialize(&case, Split::Train, &policy, &mut rng, &mut counts).map_err(|e| e.to_string())?;
            ensure(out[0].data() == vol.data(), || "p = 0 changed the volume".into())?;
            let plan = sample_plan(&policy, &mut rng).map_err(|e| e.to_string())?;
            let direct = apply_plan(&vol, &plan).map_err(|e| e.to_string())?;
            ensure(plan.is_empty() && direct.data() == vol.data(), || "p = 0 sampled a transform".into())?;
        }
    }
    ensure(counts.train == 0, || "p = 0 counted transforms".into())?;

    let core = [Stage::Flip, Stage::Intensity, Stage::Local, Stage::Crop];
    for mode in [ChannelMode::ThreeChannel, ChannelMode::SingleChannel] {
        let policy = AugmentationPolicy {
            p: 1.0,
            channel_mode: mode,
            baseline_extras: false,
            crop_size: 16,
        };
        for _ in 0..1000 {
            let plan = sample_plan(&policy, &mut rng).map_err(|e| e.to_string())?;
            ensure(plan.len() == 4 && core.iter().all(|&s| plan.is_active(s)), || format!("p = 1 gave {plan:?}"))?;
            let out = apply_plan(&vol, &plan).map_err(|e| e.to_string())?;
            ensure(out.data().iter().all(|v| (0.0..=1.0).contains(v)), || "output left [0, 1]".into())?;
        }
    }

    let mut worst: f64 = 0.0;
    for p in [0.25, 0.5, 0.75] {
        let policy = AugmentationPolicy {
            p,
            channel_mode: ChannelMode::ThreeChannel,
            baseline_extras: false,
            crop_size: 16,
        };
        let mut active = [0usize; 4];
        for draw in 0..10_000 {
            let plan = sample_plan(&policy, &mut rng).map_err(|e| e.to_string())?;
            for (k, &stage) in core.iter().enumerate() {
                active[k] += usize::from(plan.is_active(stage));
            }
            if draw % 50 == 0 {
                let out = apply_plan(&vol, &plan).map_err(|e| e.to_string())?;
                ensure(out.data().iter().all(|v| (0.0..=1.0).contains(v)), || "output left [0, 1]".into())?;
            }
        }
        for (k, &n) in active.iter().enumerate() {
            let freq = n as f64 / 10_000.0;
            worst = worst.max((freq - p).abs());
            ensure((freq - p).abs() <= 0.02, || format!("p = {p}: stage {k} active {freq}"))?;
        }
    }
    Ok(format!("p=0 identical, p=1 four stages, worst frequency gap {worst:.4}"))
}

fn end_to_end(root: &Path) -> Outcome {
    let data = root.join("e2e");
    generate_synthetic(&SynthOptions::new(200, 2024), &data).map_err(|e| e.to_string())?;
    let budget = Duration::from_secs(600);
    let (mut lines, mut failures) = (Vec::new(), Vec::new());
    for (id, threshold) in [(ConfigId::C42, 0.90), (ConfigId::C43, 0.85), (ConfigId::C44, 0.85)] {
        let mut config = RunConfig::desk(id, Task::Acl, Plane::Axial, &data, root.join(format!("e2e-{id}")));
        config.seed = 7;
        let start = Instant::now();
        let outcome = match train(&config) {
            Ok(outcome) => outcome,
            Err(e) => {
                failures.push(format!("{id}: {e}"));
                continue;
            }
        };
        let elapsed = start.elapsed();
        if let Err(e) = within(elapsed, budget, id.as_str()) {
            failures.push(e);
        }
        for m in &outcome.metrics {
            match m.auc {
                Some(a) if a >= threshold => lines.push(format!("{id} {} {a:.4}", m.task)),
                other => failures.push(format!("{id} {}: AUC {other:?} below {threshold}", m.task)),
            }
        }
        lines.push(format!("{id} {:.0?}", elapsed));
    }
    if failures.is_empty() {
        Ok(lines.join(", "))
    } else {
        Err(format!("{}; passing: {}", failures.join(", "), lines.join(", ")))
    }
}

fn combiner(root: &Path) -> Outcome {
    // Simulated per-plane probabilities: one shared signal per case, plane
    // noise of different strength.
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut draw = |n: usize| {
        let labels: Vec<u8> = (0..n).map(|_| u8::from(rng.random::<f64>() < 0.3)).collect();
        let probs: [Vec<f64>; 3] = std::array::from_fn(|k| {
            let noise = [1.0, 1.5, 2.0][k];
            labels
                .iter()
                .map(|&y| {
                    let z = 2.0 * (y as f64 - 0.5) + noise * (rng.random::<f64>() - 0.5) * 3.0;
                    1.0 / (1.0 + (-z).exp())
                })
                .collect()
        });
        (probs, labels)
    };
    let (fit_p, fit_y) = draw(400);
    let (eval_p, eval_y) = draw(200);
    let (fit, combined) = combine(&fit_p, &fit_y, &eval_p, &eval_y, DEFAULT_LAMBDA).map_err(|e| e.to_string())?;
    let combined = combined.ok_or("combined AUC undefined")?;
    let best = (0..3).map(|k| auc(&eval_p[k], &eval_y).unwrap()).fold(0.0, f64::max);
    ensure(combined >= best - 0.02, || format!("simulated: combined {combined:.4} vs best {best:.4}"))?;
    ensure(fit.gradient_norm < 1e-8, || format!("simulated: gradient norm {:e}", fit.gradient_norm))?;
    let simulated = format!("simulated combined {combined:.4} vs best {best:.4}");

    // Trained per-plane models on a small synthetic set.
    let data = root.join("combiner");
    generate_synthetic(&SynthOptions { size: 32, ..SynthOptions::new(60, 8) }, &data).map_err(|e| e.to_string())?;
    let mut ckpts = Vec::new();
    for plane in Plane::ALL {
        let out = root.join(format!("combiner-{plane}"));
        let mut config = RunConfig::desk(ConfigId::C42, Task::Meniscus, plane, &data, &out);
        config.model.input_size = 32;
        config.augmentation.crop_size = 20;
        config.epochs = 2;
        train(&config).map_err(|e| e.to_string())?;
        ckpts.push(out.join(CHECKPOINT_FILE));
    }
    let report = evaluate_combined([&ckpts[0], &ckpts[1], &ckpts[2]], Split::Valid, None).map_err(|e| e.to_string())?;
    let row = &report.tasks[0];
    let best = row.planes.values().flatten().cloned().fold(0.0, f64::max);
    let combined = row.combined.ok_or("trained: combined AUC undefined")?;
    let grad = row.fit.ok_or("no fit")?.gradient_norm;
    ensure(combined >= best - 0.02, || format!("trained: combined {combined:.4} vs best {best:.4}"))?;
    ensure(grad < 1e-8, || format!("trained: gradient norm {grad:e}"))?;
    Ok(format!("{simulated}; trained combined {combined:.4} vs best {best:.4}, gradient norm {grad:.1e}"))
}

// The expected choice, computed without the library's selection routine.
fn hand_selection(entries: &[GridEntry]) -> Option<(f64, f64)> {
    let best = entries.iter().filter_map(|e| e.auc).fold(f64::NEG_INFINITY, f64::max);
    entries
        .iter()
        .filter(|e| e.auc == Some(best))
        .map(|e| e.p)
        .fold(None, |acc: Option<f64>, p| Some(acc.map_or(p, |a| a.min(p))))
        .map(|p| (p, best))
}

fn grid(root: &Path) -> Outcome {
    let data = root.join("grid");
    generate_synthetic(&SynthOptions { size: 32, ..SynthOptions::new(24, 4) }, &data).map_err(|e| e.to_string())?;
    let mut base = RunConfig::desk(ConfigId::C42, Task::Acl, Plane::Axial, &data, root.join("grid-out"));
    base.model.input_size = 32;
    base.model.stage_channels = vec![8, 16];
    base.model.stem_filters = 8;
    base.augmentation.crop_size = 20;
    base.epochs = 1;
    let report = grid_search(&base).map_err(|e| e.to_string())?;
    let cell = report.cells.first().ok_or("no cells")?;
    ensure(report.cells.len() == 1 && cell.entries.len() == 21, || "expected one cell of 21 entries".into())?;
    for (k, e) in cell.entries.iter().enumerate() {
        ensure(e.p == k as f64 / 20.0, || format!("entry {k} has p = {}", e.p))?;
        ensure(e.auc.is_some() != e.error.is_some(), || format!("entry {k} is malformed"))?;
    }
    let expected = hand_selection(&cell.entries);
    ensure(cell.chosen_p.zip(cell.chosen_auc) == expected, || {
        format!("chose {:?}/{:?}, expected {expected:?}", cell.chosen_p, cell.chosen_auc)
    })?;
    let table = format_table(&report);
    let (p, a) = expected.ok_or("every cell failed")?;
    ensure(table.contains(&percent(p)), || format!("table lacks {}", percent(p)))?;

    // Ties and failures, with the answer worked out by hand.
    let crafted: Vec<GridEntry> = (0..21)
        .map(|k| {
            let auc = match k {
                3 => None,
                7 | 12 => Some(0.95),
                15 => Some(0.9),
                _ => Some(0.5 + k as f64 / 100.0),
            };
            GridEntry {
                p: k as f64 / 20.0,
                auc,
                error: auc.is_none().then(|| "diverged".into()),
            }
        })
        .collect();
    let chosen = kneemri::grid::select(&crafted);
    ensure(chosen == Some((0.35, 0.95)), || format!("crafted grid chose {chosen:?}"))?;
    ensure(percent(0.35) == "35%" && percent(0.75) == "75%", || "percent formatting".into())?;
    Ok(format!("21 cells, chose {} (AUC {a:.4}), tie case -> 35%", percent(p)))
}

fn tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, fs::read(&path).unwrap());
            }
        }
    }
    out
}

fn determinism(root: &Path) -> Outcome {
    let cli = |args: &[&str]| -> Result<(), String> {
        let out = Command::new(env!("CARGO_BIN_EXE_kneemri"))
            .current_dir(root)
            .args(args)
            .output()
            .map_err(|e| e.to_string())?;
        ensure(out.status.success(), || {
            format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr))
        })
    };
    for run in ["a", "b"] {
        cli(&["synth", "--cases", "16", "--seed", "9", "--out", &format!("det-data-{run}"), "--size", "24"])?;
    }
    let data = tree(&root.join("det-data-a"));
    ensure(data == tree(&root.join("det-data-b")), || "synth outputs differ".into())?;

    for run in ["a", "b"] {
        let config = format!("det-{run}.json");
        cli(&[
            "init-config", "--id", "c42", "--task", "acl", "--plane", "sagittal", "--data", "det-data-a",
            "--out-dir", &format!("det-train-{run}"), "--epochs", "2", "--seed", "5", "--p", "0.5",
            "--write", &config,
        ])?;
        let mut c = RunConfig::load(&root.join(&config)).map_err(|e| e.to_string())?;
        c.model.input_size = 24;
        c.augmentation.crop_size = 16;
        c.save(&root.join(&config)).map_err(|e| e.to_string())?;
        cli(&["train", "--config", &config])?;
        cli(&["grid-search", "--config", &config, "--out", &format!("det-grid-{run}/report.json")])?;
    }
    let trained = tree(&root.join("det-train-a"));
    ensure(trained.len() == 3 && trained == tree(&root.join("det-train-b")), || "train outputs differ".into())?;
    let report = tree(&root.join("det-grid-a"));
    ensure(report.len() == 2 && report == tree(&root.join("det-grid-b")), || "grid-search outputs differ".into())?;
    Ok(format!(
        "synth {} files, train {} files, grid-search {} files byte-identical",
        data.len(),
        trained.len(),
        report.len()
    ))
}

fn main() {
    let scratch = tempdir().expect("temp dir");
    let root = scratch.path();
    let criteria: Vec<Criterion> = vec![
        ("interpolation", Box::new(interpolation)),
        ("gradient oracle", Box::new(gradient_oracle)),
        ("AUC oracle", Box::new(auc_oracle)),
        ("class weights", Box::new(class_weight_balance)),
        ("aggregation", Box::new(aggregation)),
        ("augmentation", Box::new(augmentation)),
        ("end-to-end synthetic", Box::new(|| end_to_end(root))),
        ("combiner", Box::new(|| combiner(root))),
        ("grid search", Box::new(|| grid(root))),
        ("determinism", Box::new(|| determinism(root))),
    ];
    let mut failed = 0;
    for (name, check) in &criteria {
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(std::panic::AssertUnwindSafe(check))
            .unwrap_or_else(|_| Err("panicked".into()));
        match outcome {
            Ok(detail) => println!("PASS {name}: {detail} [{:.1?}]", start.elapsed()),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name}: {detail} [{:.1?}]", start.elapsed());
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
