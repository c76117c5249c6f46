mod commands;
mod config;
mod error;

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use msad_core::train::Schedule;

use config::RunConfig;
use error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "msad", version, about = "MSAD-Net parameter audit, training, evaluation and Grad-CAM")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// JSON run configuration with sections model, train, synth, data,
    /// crossval and gradcam.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory, created if absent.
    #[arg(long, global = true, default_value = "msad-out")]
    out: PathBuf,

    /// Seed for model initialization, shuffling, splits and synthesis.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// `key=value` config override; dotted (`model.enable_sam`) or bare.
    #[arg(long = "override", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    /// Worker threads for the kernels.
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Learning-rate schedule: fixed or adaptive.
    #[arg(long, global = true)]
    schedule: Option<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Audit trainable parameters against their closed forms.
    Params,
    /// Train a model and write its checkpoint, history and test metrics.
    Train {
        /// Dataset root; overrides data.root.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint on one partition.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// train, valid, test or all; overrides data.eval_split.
        #[arg(long)]
        split: Option<String>,
    },
    /// Stratified k-fold cross-validation.
    Crossval {
        #[arg(long)]
        data: Option<PathBuf>,
        /// Overrides crossval.folds.
        #[arg(long)]
        folds: Option<usize>,
    },
    /// Grad-CAM heatmaps and overlays for PGM/PPM images.
    Gradcam {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "image", required = true)]
        images: Vec<PathBuf>,
        /// Target class; defaults to the predicted class.
        #[arg(long)]
        class: Option<usize>,
        #[arg(long)]
        tap: Option<String>,
        #[arg(long)]
        alpha: Option<f64>,
    },
    /// Write the synthetic dataset as PGM files plus manifest.json.
    Synth,
}

fn resolve(cli: &Cli) -> CliResult<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.set_seed(seed);
    }
    for spec in &cli.overrides {
        cfg.apply_override(spec)?;
    }
    if let Some(name) = &cli.schedule {
        cfg.train.schedule = Schedule::parse(name)?;
    }
    match &cli.command {
        Command::Train { data, .. } | Command::Crossval { data, .. } | Command::Eval { data, .. } => {
            if let Some(root) = data {
                cfg.data.root = Some(root.clone());
            }
        }
        _ => {}
    }
    match &cli.command {
        Command::Eval { split: Some(s), .. } => cfg.data.eval_split = s.clone(),
        Command::Crossval { folds: Some(k), .. } => cfg.crossval.folds = *k,
        Command::Gradcam { class, tap, alpha, .. } => {
            if class.is_some() {
                cfg.gradcam.class = *class;
            }
            if let Some(t) = tap {
                cfg.gradcam.tap = t.clone();
            }
            if let Some(a) = alpha {
                cfg.gradcam.alpha = *a;
            }
        }
        _ => {}
    }
    cfg.model.validate()?;
    cfg.train.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> CliResult<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(format!("--threads: {e}")))?;
    }
    let mut cfg = resolve(&cli)?;
    let out = cli.out.as_path();
    fs::create_dir_all(out).map_err(|e| msad_core::Error::io(out, e))?;
    match &cli.command {
        Command::Train { resume, .. } => return commands::train(&mut cfg, out, resume.as_deref()),
        Command::Eval { checkpoint, .. } => return commands::eval(&mut cfg, out, checkpoint),
        Command::Gradcam {
            checkpoint, images, ..
        } => return commands::gradcam_cmd(&mut cfg, out, checkpoint, images),
        _ => {}
    }
    commands::write(out, "config.resolved.json", cfg.to_json())?;
    match &cli.command {
        Command::Params => commands::params(&cfg, out),
        Command::Synth => commands::synth(&cfg, out),
        Command::Crossval { .. } => commands::crossval_cmd(&cfg, out),
        _ => unreachable!("handled above"),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
