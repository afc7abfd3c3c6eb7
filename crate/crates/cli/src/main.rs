use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use hcot_cli::{run, ExperimentConfig, RunError};
use hcot_core::data::Split;
use hcot_core::objectives::ObjectiveKind;
use hcot_core::trainer::Schedule;

/// Hierarchical complement objective training.
#[derive(Parser)]
#[command(name = "hcot", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration.
    Train(Common),
    /// Train xe, cot and hcot from the same seeds and tabulate them.
    Compare(Common),
    /// Train hcot at several hierarchy granularities.
    AblateNc {
        #[command(flatten)]
        common: Common,
        /// Comma-separated group counts (1, native, fine-class count) or N=path entries.
        #[arg(long, value_delimiter = ',', default_value = "1,3,9")]
        granularities: Vec<String>,
    },
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Write penultimate-layer activations as CSV.
    ExportEmbeddings {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML). Defaults to the built-in synthetic task.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (a file for export-embeddings).
    #[arg(long)]
    out: PathBuf,
    /// Master seed, overriding the config.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    objective: Option<ObjectiveKind>,
    #[arg(long)]
    schedule: Option<Schedule>,
    /// Training hierarchy: builtin:flat|identity|native|cifar100 or a file.
    #[arg(long)]
    hierarchy: Option<String>,
    /// Overrides train.epochs, dropping milestones it no longer reaches.
    #[arg(long)]
    epochs: Option<usize>,
    /// CIFAR-100 binary directory, used when the config gives no path.
    #[arg(long, env = "HCE_DATA_DIR")]
    data_dir: Option<PathBuf>,
    /// Overwrite an existing output.
    #[arg(long)]
    force: bool,
}

impl Common {
    fn config(&self) -> Result<ExperimentConfig, RunError> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::synthetic_default(),
        };
        if let Some(seed) = self.seed {
            cfg.set_seed(seed);
        }
        if let Some(objective) = self.objective {
            cfg.train.objective = objective;
        }
        if let Some(schedule) = self.schedule {
            cfg.train.schedule = schedule;
        }
        if let Some(h) = &self.hierarchy {
            cfg.hierarchy = Some(h.clone());
        }
        if let Some(epochs) = self.epochs {
            cfg.train.epochs = epochs;
            cfg.train.lr_milestones.retain(|&m| m < epochs);
        }
        if let hcot_cli::DataConfig::Cifar100 { path: path @ None } = &mut cfg.data {
            *path = self.data_dir.clone();
        }
        Ok(cfg)
    }
}

fn print_run(out: &Path, run: &hcot_cli::RunOutcome) {
    let last = run.last();
    println!(
        "epoch {} fine_error {:.4} coarse_error {:.4} top5_error {:.4} gap {:.6} -> {}",
        last.epoch,
        last.fine_error,
        last.coarse_error,
        last.top5_error,
        run.evaluation.profile.staircase_gap(),
        out.display()
    );
}

fn execute(cli: Cli) -> Result<(), RunError> {
    match cli.command {
        Command::Train(common) => {
            let cfg = common.config()?;
            let run = run::run_experiment(&cfg, Some(&common.out), common.force)?;
            print_run(&common.out, &run);
        }
        Command::Compare(common) => {
            let cfg = common.config()?;
            for (row, _) in run::compare(&cfg, Some(&common.out), common.force)? {
                println!(
                    "{:<5} fine_error {:.4} coarse_error {:.4} top5_error {:.4} gap {:.6}",
                    row.objective.as_str(),
                    row.fine_error,
                    row.coarse_error,
                    row.top5_error,
                    row.staircase_gap
                );
            }
            println!("-> {}", common.out.join("compare.csv").display());
        }
        Command::AblateNc {
            common,
            granularities,
        } => {
            let cfg = common.config()?;
            for (row, _) in run::ablate_nc(&cfg, &granularities, Some(&common.out), common.force)? {
                println!(
                    "n_c {:<4} fine_error {:.4} coarse_error {:.4} gap {:.6}",
                    row.n_c, row.fine_error, row.coarse_error, row.staircase_gap
                );
            }
            println!("-> {}", common.out.join("ablation_nc.csv").display());
        }
        Command::Eval { common, checkpoint } => {
            let cfg = common.config()?;
            let (r, profile) =
                run::evaluate_checkpoint(&cfg, &checkpoint, Some(&common.out), common.force)?;
            println!(
                "fine_error {:.4} coarse_error {:.4} top5_error {:.4} xe {:.6} hce {:.6} gap {:.6}",
                r.fine_error,
                r.coarse_error,
                r.top5_error,
                r.xe,
                r.hce,
                profile.staircase_gap()
            );
        }
        Command::ExportEmbeddings {
            common,
            checkpoint,
            split,
        } => {
            let cfg = common.config()?;
            let split = match split {
                SplitArg::Train => Split::Train,
                SplitArg::Test => Split::Test,
            };
            let rows = run::export_embeddings(&cfg, &checkpoint, split, &common.out, common.force)?;
            println!("{rows} rows -> {}", common.out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
