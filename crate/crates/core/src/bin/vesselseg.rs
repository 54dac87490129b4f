use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::error;

use vesselseg::app::{cmd_evaluate, cmd_roc, cmd_segment, cmd_synth, cmd_train};
use vesselseg::config::RunConfig;
use vesselseg::Result;

/// Retinal vessel segmentation with Morlet wavelet features and a
/// Gaussian-mixture Bayes classifier.
#[derive(Debug, Parser)]
#[command(version)]
struct Cli {
    /// TOML run configuration; defaults apply to anything it leaves out.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,

    /// Override one config key, e.g. `--set classifier.k=10`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    /// Worker threads (default: all cores).
    #[arg(short, long, global = true)]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit the classifier on a training split and write model.json.
    Train {
        /// Dataset root or training split directory.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Segment one image.
    Segment {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        image: PathBuf,
        /// FOV mask; the full frame is used when absent.
        #[arg(long)]
        fov: Option<PathBuf>,
    },
    /// Segment and score a test split.
    Evaluate {
        #[arg(long)]
        model: Option<PathBuf>,
        /// Dataset root or test split directory.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Recompute the pooled ROC from an evaluate run's posterior maps.
    Roc {
        /// Run directory written by `evaluate`.
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Write a synthetic phantom dataset in DRIVE layout.
    Synth {
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<()> {
    let cfg = RunConfig::load(cli.config.as_deref(), &cli.overrides)?;
    match cli.command {
        Command::Train { dataset } => {
            let out = cmd_train(&cfg, dataset.as_deref())?;
            println!("{}", out.model_path.display());
        }
        Command::Segment { model, image, fov } => {
            let out = cmd_segment(&cfg, model.as_deref(), &image, fov.as_deref())?;
            println!("{}", out.run_dir.display());
        }
        Command::Evaluate { model, dataset } => {
            let out = cmd_evaluate(&cfg, model.as_deref(), dataset.as_deref())?;
            let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.4}"));
            println!(
                "accuracy pooled {} mean {}; sensitivity {}; specificity {}; AUC {:.4}",
                fmt(out.report.pooled.accuracy),
                fmt(out.report.mean_accuracy),
                fmt(out.report.pooled.sensitivity),
                fmt(out.report.pooled.specificity),
                out.roc.auc
            );
            println!("{}", out.run_dir.display());
        }
        Command::Roc { run, dataset } => {
            let roc = cmd_roc(&cfg, &run, dataset.as_deref())?;
            println!("AUC {:.4}", roc.auc);
        }
        Command::Synth { out } => {
            let dir = cmd_synth(&cfg, &out)?;
            println!("{}", dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(jobs) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs.max(1))
            .build_global()
        {
            error!("cannot configure thread pool: {e}");
            return ExitCode::from(2);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
