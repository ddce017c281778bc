//! Experiment driver: simulation, training, divergence evaluation, anomaly
//! detection and report aggregation, emitting machine-readable artifacts.
//!
//! Exit codes: 0 success, 1 numeric failure (non-finite loss), 2 usage or
//! input error. `QRVAE_OUT_ROOT` prefixes relative output directories.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

mod artifacts;
mod commands;

#[derive(Parser)]
#[command(
    name = "qrvae",
    version,
    about = "Quantile-regression VAE experiments: simulate, train, evaluate, detect, report"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ZSource {
    /// Draw latent codes from the standard-normal prior.
    Prior,
    /// Encode dataset samples and draw from their posteriors.
    Encode,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum DetectMode {
    /// Flag pixels outside the predicted [Q_lo, Q_hi] interval.
    Interval,
    /// Map heads to per-pixel Gaussians, convert to p-values, BH-FDR.
    Fdr,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the two-moons dataset files (latents and 4-D observations).
    Simulate {
        /// Number of latent points.
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Multiplier on the heteroscedastic noise draws.
        #[arg(long, default_value_t = 1.0)]
        noise_scale: f64,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write a checkpoint plus the training log.
    Train {
        /// Model kind; overrides the config's `[model] kind`.
        #[arg(long)]
        model: Option<String>,
        /// Dataset config (TOML).
        #[arg(long)]
        data: PathBuf,
        /// Experiment config (TOML with [model] and [train]).
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare generated samples against the dataset with the k-NN KL
    /// estimator and emit KDE grids for pairwise plots.
    EvalKl {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 1000)]
        n_samples: usize,
        #[arg(long, value_enum, default_value_t = ZSource::Prior)]
        z_source: ZSource,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run anomaly detection on the test split and write masks, z/p maps
    /// and metrics.
    Detect {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        mode: DetectMode,
        /// FDR level for `--mode fdr`.
        #[arg(long, default_value_t = 0.05)]
        q: f64,
        /// Use the one-standard-deviation shorthand (divisor 1.0) instead
        /// of the exact quantile divisor when mapping quantiles to sigma.
        #[arg(long, default_value_t = false)]
        paper_approx: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Aggregate metrics files under a directory into one summary.
    Report {
        #[arg(long)]
        dir: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate { n, seed, noise_scale, out } => {
            commands::simulate(n, seed, noise_scale, &artifacts::resolve_out(&out))
        }
        Command::Train { model, data, config, out } => {
            commands::train(model.as_deref(), &data, &config, &artifacts::resolve_out(&out))
        }
        Command::EvalKl { checkpoint, data, n_samples, z_source, seed, out } => {
            commands::eval_kl(
                &checkpoint,
                &data,
                n_samples,
                z_source,
                seed,
                &artifacts::resolve_out(&out),
            )
        }
        Command::Detect { checkpoint, data, mode, q, paper_approx, out } => commands::detect(
            &checkpoint,
            &data,
            mode,
            q,
            paper_approx,
            &artifacts::resolve_out(&out),
        ),
        Command::Report { dir } => commands::report(&artifacts::resolve_out(&dir)),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            let numeric = err
                .downcast_ref::<qrvae::Error>()
                .is_some_and(|e| matches!(e, qrvae::Error::NanLoss { .. }));
            if numeric {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
