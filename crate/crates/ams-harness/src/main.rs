//! Command-line interface: `check`, `gen-data`, `train`, `eval`, `ablate`.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage/config error,
//! 3 numerical abort.

use ams_core::ams::VariantKind;
use ams_harness::ablate::{ablate_variants, sweep_group_counts};
use ams_harness::checkpoint::load_checkpoint;
use ams_harness::config::RunConfig;
use ams_harness::data::{export_dataset_dir, generate_domains, load_dataset_dir};
use ams_harness::error::HarnessError;
use ams_harness::eval::evaluate_model;
use ams_harness::runner::run_experiment;
use ams_harness::train::eval_rng;
use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "ams",
    about = "Normalization/whitening blocks with a synthetic domain-generalization harness"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// JSON run configuration (unknown keys rejected).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Variant override, e.g. `none`, `IN_GW`, `IN_GW:sa-ca`, `AMS`.
    #[arg(long)]
    variant: Option<String>,
    /// Epoch count override.
    #[arg(long)]
    epochs: Option<usize>,
    /// Precision override: `f64` or `f32`.
    #[arg(long)]
    precision: Option<String>,
    /// Whitening group count override.
    #[arg(long)]
    g: Option<usize>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig, HarnessError> {
        let mut run = match &self.config {
            Some(path) => RunConfig::from_path(path)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            run.train.seed = seed;
        }
        if let Some(v) = &self.variant {
            run.train.variant = VariantKind::parse(v).map_err(HarnessError::Core)?;
        }
        if let Some(e) = self.epochs {
            run.train.epochs = e;
        }
        if let Some(p) = &self.precision {
            run.train.precision = match p.as_str() {
                "f64" => ams_harness::train::Precision::F64,
                "f32" => ams_harness::train::Precision::F32,
                other => {
                    return Err(HarnessError::config(format!(
                        "unknown precision '{other}' (expected f64 or f32)"
                    )))
                }
            };
        }
        if let Some(g) = self.g {
            run.train.whiten_g = g;
        }
        run.validate()?;
        Ok(run)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run the invariant and gradient self-checks.
    Check,
    /// Generate the synthetic multi-domain dataset and write it to a directory.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on the source domains and evaluate on the held-out domain.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Load data from a `gen-data` directory instead of generating it.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output directory for metrics and the checkpoint.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on the held-out domain.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Load data from a `gen-data` directory instead of regenerating it.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Number of query/gallery splits.
        #[arg(long)]
        splits: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate several variants over several seeds.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Comma-separated variant list, e.g. `none,IN_GW,AMS`.
        #[arg(long)]
        variants: String,
        /// Number of seeds (0..n) per variant.
        #[arg(long, default_value_t = 3)]
        seeds: usize,
        /// Comma-separated group counts for a stability sweep.
        #[arg(long)]
        g_sweep: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn write_outputs(dir: &PathBuf, name: &str, json: &str, csv: &str) -> Result<(), HarnessError> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(format!("{name}.json")), json)?;
    std::fs::write(dir.join(format!("{name}.csv")), csv)?;
    Ok(())
}

fn run() -> Result<(), HarnessError> {
    let cli = Cli::parse();
    match cli.command {
        Command::Check => {
            let failures = ams_harness::selfcheck::run_all(std::io::stdout());
            if failures > 0 {
                return Err(HarnessError::input(format!("{failures} self-checks failed")));
            }
            println!("all checks passed");
            Ok(())
        }
        Command::GenData { cfg, out } => {
            let mut run = cfg.load()?;
            // For data generation the seed override targets the data stream.
            if let Some(seed) = cfg.seed {
                run.data.seed = seed;
            }
            let datasets = generate_domains(&run.data)?;
            export_dataset_dir(&out, &datasets)?;
            println!(
                "wrote {} domains ({} images each) to {}",
                datasets.len(),
                datasets[0].ids.len(),
                out.display()
            );
            Ok(())
        }
        Command::Train { cfg, data, out } => {
            let run = cfg.load()?;
            let datasets = match data {
                Some(dir) => Some(load_dataset_dir(&dir)?),
                None => None,
            };
            std::fs::create_dir_all(&out)?;
            let checkpoint = out.join("checkpoint.bin");
            let output = run_experiment(&run, datasets, Some(&checkpoint))?;
            write_outputs(&out, "metrics", &output.to_json(), &output.to_csv())?;
            for w in &output.train.warnings {
                eprintln!("warning: {w}");
            }
            println!(
                "trained variant {} ({} classes): unseen-domain mAP {:.4}, rank-1 {:.4}",
                output.config.train.variant.name(),
                output.num_classes,
                output.eval.mean_map,
                output.eval.mean_rank1
            );
            Ok(())
        }
        Command::Eval {
            checkpoint,
            data,
            splits,
            out,
        } => {
            let loaded = load_checkpoint(&checkpoint)?;
            let mut run: RunConfig = serde_json::from_value(loaded.header.run.clone())
                .map_err(|e| HarnessError::config(format!("checkpoint config: {e}")))?;
            if let Some(s) = splits {
                run.eval.splits = s;
            }
            let datasets = match data {
                Some(dir) => load_dataset_dir(&dir)?,
                None => generate_domains(&run.data)?,
            };
            let holdout = run.data.holdout_domain();
            let held = datasets
                .into_iter()
                .find(|d| d.domain_id == holdout)
                .ok_or_else(|| {
                    HarnessError::input(format!("holdout domain {holdout} not in data"))
                })?;
            let summary = match loaded.header.dtype.as_str() {
                "f32" => {
                    let (mut model, _) = loaded.restore::<f32>()?;
                    evaluate_model(&mut model, &held, &run.eval, &mut eval_rng(run.eval.seed))?
                }
                _ => {
                    let (mut model, _) = loaded.restore::<f64>()?;
                    evaluate_model(&mut model, &held, &run.eval, &mut eval_rng(run.eval.seed))?
                }
            };
            let json = serde_json::to_string_pretty(&summary)?;
            let mut csv = String::from("metric,value\n");
            csv.push_str(&format!("mean_map,{}\n", summary.mean_map));
            csv.push_str(&format!("mean_rank1,{}\n", summary.mean_rank1));
            for (k, v) in summary.mean_cmc.iter().enumerate() {
                csv.push_str(&format!("cmc_rank{},{}\n", k + 1, v));
            }
            write_outputs(&out, "eval", &json, &csv)?;
            println!(
                "evaluated {}: mAP {:.4}, rank-1 {:.4}",
                checkpoint.display(),
                summary.mean_map,
                summary.mean_rank1
            );
            Ok(())
        }
        Command::Ablate {
            cfg,
            variants,
            seeds,
            g_sweep,
            out,
        } => {
            let run = cfg.load()?;
            let variant_list: Vec<VariantKind> = variants
                .split(',')
                .map(|s| VariantKind::parse(s).map_err(HarnessError::Core))
                .collect::<Result<_, _>>()?;
            if seeds == 0 {
                return Err(HarnessError::config("--seeds must be positive"));
            }
            let seed_list: Vec<u64> = (0..seeds as u64).collect();
            let table = ablate_variants(&run, &variant_list, &seed_list)?;
            std::fs::create_dir_all(&out)?;
            write_outputs(&out, "ablate", &table.to_json(), &table.to_csv())?;
            std::fs::write(out.join("ablate_cells.csv"), table.to_cells_csv())?;
            for w in &table.warnings {
                eprintln!("warning: {w}");
            }
            for row in &table.rows {
                println!(
                    "{:<16} completed {} aborted {} mAP {} rank-1 {}",
                    row.label,
                    row.completed,
                    row.aborted,
                    row.mean_map.map_or("-".into(), |v| format!("{v:.4}")),
                    row.mean_rank1.map_or("-".into(), |v| format!("{v:.4}")),
                );
            }
            if let Some(gs) = g_sweep {
                let counts: Vec<usize> = gs
                    .split(',')
                    .map(|s| {
                        s.trim().parse::<usize>().map_err(|e| {
                            HarnessError::config(format!("bad group count '{s}': {e}"))
                        })
                    })
                    .collect::<Result<_, _>>()?;
                let sweep = sweep_group_counts(&run, &counts, &seed_list)?;
                write_outputs(&out, "g_sweep", &sweep.to_json(), &sweep.to_csv())?;
                std::fs::write(out.join("g_sweep_cells.csv"), sweep.to_cells_csv())?;
                for row in &sweep.rows {
                    println!(
                        "{:<16} completed {} aborted {}",
                        row.label, row.completed, row.aborted
                    );
                }
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_numerical() {
                ExitCode::from(3)
            } else if matches!(e, HarnessError::Config(_)) {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
