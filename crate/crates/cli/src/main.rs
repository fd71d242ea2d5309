use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mimir_cli::commands;
use mimir_cli::config::Config;
use mimir_cli::CliError;

/// Image-based mean-variance regression on two-channel body volumes.
#[derive(Parser)]
#[command(name = "mimir", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// `key = value` run configuration; defaults apply to missing keys.
    /// MIMIR_SEED overrides `seed`.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct HoldoutArgs {
    /// Fold assignment CSV (subject_id, fold).
    #[arg(long, requires = "fold")]
    folds: Option<PathBuf>,
    /// Fold to hold out (train) or to calibrate on (calibrate).
    #[arg(long, requires = "folds")]
    fold: Option<usize>,
}

impl HoldoutArgs {
    fn get(&self) -> Option<(&std::path::Path, usize)> {
        self.folds.as_deref().zip(self.fold)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort: volumes, labels, registry, manifest.
    Phantom {
        #[command(flatten)]
        config: ConfigArg,
        /// Existing output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Write projection tiles (MTIL, optionally PGM) for volumes.
    Project {
        #[command(flatten)]
        config: ConfigArg,
        /// Existing output directory.
        #[arg(long)]
        out: PathBuf,
        /// Resample tiles to the configured network input size.
        #[arg(long)]
        resize: bool,
        /// Also write one 8-bit PGM per channel.
        #[arg(long)]
        pgm: bool,
        /// Volume files or directories of `.mvol` files.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// k-fold cross-validation with per-fold calibration and a pooled report.
    Cv {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        data: PathBuf,
        /// Existing output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model and write an uncalibrated checkpoint.
    Train {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint path.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        holdout: HoldoutArgs,
        /// Training loss log CSV.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Fit variance calibration factors on labelled data.
    Calibrate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Calibrated checkpoint path.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        holdout: HoldoutArgs,
        /// Calibration factors CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Predict means, sigmas and intervals for volumes.
    Predict {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Predictions CSV.
        #[arg(long)]
        out: PathBuf,
        /// Interval level; defaults to the configured `level`.
        #[arg(long)]
        level: Option<f64>,
        /// Volume files or directories of `.mvol` files.
        inputs: Vec<PathBuf>,
    },
    /// Agreement metrics of a predictions CSV against a labels CSV.
    Evaluate {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        /// Target registry; without it binary targets are inferred from 0/1 labels.
        #[arg(long)]
        registry: Option<PathBuf>,
        /// Report CSV.
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Phantom { config, out } => {
            let cfg = Config::from_env(config.config.as_deref())?;
            let s = commands::phantom(&cfg, &out)?;
            eprintln!(
                "wrote {} subjects to {} ({} without any label)",
                s.n_subjects,
                out.display(),
                s.unusable
            );
        }
        Command::Project {
            config,
            out,
            resize,
            pgm,
            inputs,
        } => {
            let cfg = Config::from_env(config.config.as_deref())?;
            let n = commands::project_volumes(&cfg, &inputs, &out, resize, pgm)?;
            eprintln!("projected {n} volumes");
        }
        Command::Cv { config, data, out } => {
            let cfg = Config::from_env(config.config.as_deref())?;
            let s = commands::cv(&cfg, &data, &out)?;
            eprintln!("{}-fold cross-validation, fold sizes {:?}", s.k, s.fold_sizes);
            for r in &s.report.rows {
                eprintln!(
                    "  {:16} n={:5} icc={} r2={} auc={}",
                    r.target,
                    r.n,
                    fmt(r.icc),
                    fmt(r.r2),
                    fmt(r.auc)
                );
            }
        }
        Command::Train {
            config,
            data,
            out,
            holdout,
            log,
        } => {
            let cfg = Config::from_env(config.config.as_deref())?;
            let s = commands::train_model(&cfg, &data, &out, holdout.get(), log.as_deref())?;
            eprintln!(
                "trained on {} subjects, final loss {}",
                s.training_rows,
                fmt(s.final_loss)
            );
        }
        Command::Calibrate {
            checkpoint,
            data,
            out,
            holdout,
            csv,
        } => {
            let f = commands::calibrate(&checkpoint, &data, &out, holdout.get(), csv.as_deref())?;
            eprintln!("calibration factors {:?} from {}", f.factors, f.source);
        }
        Command::Predict {
            config,
            checkpoint,
            out,
            level,
            inputs,
        } => {
            let cfg = Config::from_env(config.config.as_deref())?;
            let level = level.unwrap_or(cfg.level);
            if !(level > 0.0 && level < 1.0) {
                return Err(CliError::Usage(format!("--level must lie in (0, 1), got {level}")));
            }
            let s = commands::predict(&checkpoint, &inputs, &out, level)?;
            for (path, err) in &s.failed {
                eprintln!("skipped {}: {err}", path.display());
            }
            eprintln!(
                "predicted {} subjects in {:.2} s ({:.1} subjects/s), {} skipped",
                s.predicted,
                s.seconds,
                s.throughput(),
                s.failed.len()
            );
        }
        Command::Evaluate {
            config,
            predictions,
            labels,
            registry,
            out,
        } => {
            let cfg = Config::from_env(config.config.as_deref())?;
            let r = commands::evaluate(&predictions, &labels, registry.as_deref(), cfg.threshold, &out)?;
            eprintln!("evaluated {} targets", r.rows.len());
        }
    }
    Ok(())
}

fn fmt(v: Option<f64>) -> String {
    v.map_or("-".into(), |x| format!("{x:.4}"))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
