use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use kneemri::evaluate::{evaluate, evaluate_combined};
use kneemri::explorer::export_explorer;
use kneemri::grid::{format_table, grid_search, write_report};
use kneemri::predictions::{read_predictions, write_predictions};
use kneemri::synth::{generate_synthetic, SynthOptions, DEFAULT_SIZE};
use kneemri::train::train;
use kneemri::core::{Plane, Task};
use kneemri::{ConfigId, RunConfig, Split};

#[derive(Parser)]
#[command(name = "kneemri", version, about = "Knee MRI classification pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with train and valid splits.
    Synth {
        #[arg(long)]
        cases: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Slice height and width in pixels.
        #[arg(long, default_value_t = DEFAULT_SIZE)]
        size: usize,
    },
    /// Write a desk-scale run config for one setup.
    InitConfig {
        #[arg(long)]
        id: ConfigId,
        #[arg(long, default_value = "acl")]
        task: Task,
        #[arg(long, default_value = "axial")]
        plane: Plane,
        /// Dataset root the config points at.
        #[arg(long)]
        data: PathBuf,
        /// Output directory for training artifacts.
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Augmentation probability.
        #[arg(long)]
        p: Option<f64>,
        /// Config file to write.
        #[arg(long)]
        write: PathBuf,
    },
    /// Train one model from a JSON run config.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Score a checkpoint, or combine axial, coronal and sagittal checkpoints.
    Eval {
        #[arg(long, required_unless_present = "combine")]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "valid")]
        split: Split,
        /// Axial, coronal and sagittal checkpoints of one task.
        #[arg(long, num_args = 3, value_names = ["AXIAL", "CORONAL", "SAGITTAL"])]
        combine: Option<Vec<PathBuf>>,
        /// Dataset root, overriding the one stored in the checkpoint.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Write the report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write per-case probabilities as CSV.
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// Train one model per augmentation probability and pick the best.
    GridSearch {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write PNG slices and a manifest for the web explorer.
    ExportExplorer {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
}

fn emit(json: String, out: Option<&Path>) -> anyhow::Result<()> {
    match out {
        Some(path) => fs::write(path, json + "\n").with_context(|| format!("writing {}", path.display())),
        None => {
            println!("{json}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Synth { cases, seed, out, size } => {
            let dataset = generate_synthetic(&SynthOptions { cases, seed, size }, &out)?;
            eprintln!(
                "wrote {} train and {} valid cases to {}",
                dataset.train.len(),
                dataset.valid.len(),
                out.display()
            );
        }
        Command::InitConfig {
            id,
            task,
            plane,
            data,
            out_dir,
            epochs,
            seed,
            p,
            write,
        } => {
            let mut config = RunConfig::desk(id, task, plane, data, out_dir);
            config.epochs = epochs.unwrap_or(config.epochs);
            config.seed = seed.unwrap_or(config.seed);
            config.augmentation.p = p.unwrap_or(config.augmentation.p);
            config.validate()?;
            config.save(&write)?;
        }
        Command::Train { config } => {
            let config = RunConfig::load(&config)?;
            let outcome = train(&config)?;
            for m in &outcome.metrics {
                let auc = m.auc.map_or_else(|| "undefined".to_string(), |a| format!("{a:.4}"));
                eprintln!("{} {}: AUC {auc} (best epoch {})", m.task, m.plane, m.best_epoch);
            }
            eprintln!("outputs in {}", config.out_dir.display());
        }
        Command::Eval {
            checkpoint,
            split,
            combine,
            data,
            out,
            predictions,
        } => {
            let report = match (combine, checkpoint) {
                (Some(paths), None) => {
                    if predictions.is_some() {
                        bail!("--predictions applies to a single --checkpoint");
                    }
                    evaluate_combined([&paths[0], &paths[1], &paths[2]], split, data.as_deref())?
                }
                (None, Some(ckpt)) => {
                    let (report, records) = evaluate(&ckpt, split, data.as_deref())?;
                    if let Some(path) = &predictions {
                        write_predictions(path, &records)?;
                    }
                    report
                }
                (Some(_), Some(_)) => bail!("pass either --checkpoint or --combine, not both"),
                (None, None) => unreachable!("clap requires one of them"),
            };
            emit(serde_json::to_string_pretty(&report)?, out.as_deref())?;
        }
        Command::GridSearch { config, out } => {
            let config = RunConfig::load(&config)?;
            let report = grid_search(&config)?;
            write_report(&out, &report)?;
            eprint!("{}", format_table(&report));
        }
        Command::ExportExplorer { data, out, predictions } => {
            let records = predictions.as_deref().map(read_predictions).transpose()?;
            let manifest = export_explorer(&data, &out, records.as_deref())?;
            eprintln!("exported {} cases to {}", manifest.cases.len(), out.display());
        }
    }
    Ok(())
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
