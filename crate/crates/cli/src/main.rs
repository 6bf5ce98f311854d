mod commands;
mod output;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ddad_core::scoring::{NormScope, Provenance};

/// Conditioned diffusion reconstruction for anomaly detection.
#[derive(Parser)]
#[command(name = "ddad", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
pub struct Common {
    /// TOML (or JSON) pipeline configuration. Defaults to the run's saved
    /// config, then to the built-in synthetic preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Run directory to use; created if missing. Defaults to a new
    /// `<runs_dir>/<timestamp>`.
    #[arg(long)]
    pub run: Option<PathBuf>,
    /// Re-derives every sub-seed from this value.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Clone, Default)]
pub struct ReconFlags {
    /// Conditioning weight.
    #[arg(long)]
    pub w: Option<f64>,
    /// Number of denoising steps.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Starting timestep.
    #[arg(long)]
    pub tprime: Option<usize>,
}

#[derive(Args, Clone, Default)]
pub struct ScoreFlags {
    /// Weight of the pixel distance.
    #[arg(long)]
    pub v: Option<f64>,
    /// Gaussian smoothing sigma; 0 disables.
    #[arg(long = "sigma-g")]
    pub sigma_g: Option<f64>,
    #[arg(long = "norm-scope", value_enum)]
    pub norm_scope: Option<ScopeArg>,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum ScopeArg {
    EvalSet,
    PerImage,
}

impl From<ScopeArg> for NormScope {
    fn from(s: ScopeArg) -> Self {
        match s {
            ScopeArg::EvalSet => NormScope::EvalSet,
            ScopeArg::PerImage => NormScope::PerImage,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
pub enum ProvenanceArg {
    Pixel,
    Feature,
    Combined,
}

impl From<ProvenanceArg> for Provenance {
    fn from(p: ProvenanceArg) -> Self {
        match p {
            ProvenanceArg::Pixel => Provenance::PixelOnly,
            ProvenanceArg::Feature => Provenance::FeatureOnly,
            ProvenanceArg::Combined => Provenance::Combined,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
pub enum Preset {
    Synthetic,
    Mvtec,
}

#[derive(Subcommand)]
enum Command {
    /// Print a configuration preset as TOML.
    Config {
        #[arg(long, value_enum, default_value = "synthetic")]
        preset: Preset,
        /// MVTec category (mvtec preset).
        #[arg(long, default_value = "bottle")]
        category: String,
        #[arg(long, default_value_t = 64)]
        resolution: usize,
        #[arg(long)]
        crop: Option<usize>,
    },
    /// Write the configured synthetic dataset as an MVTec-layout tree.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Dataset root; the category directory is created inside.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the denoiser on nominal training images.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        epochs: Option<usize>,
        /// Extra copy of the trained checkpoint.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Adapt the feature extractor to the denoiser's reconstructions.
    Finetune {
        #[command(flatten)]
        common: Common,
        /// Denoiser checkpoint (default: the run's).
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Backbone: toy-cnn or resnet-lite.
        #[arg(long)]
        fe: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long = "lambda-dl")]
        lambda_dl: Option<f64>,
        /// Extra copy of the adapted checkpoint.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Reconstruct and score test images; writes heatmaps and reconstructions.
    Detect {
        #[command(flatten)]
        common: Common,
        /// Denoiser checkpoint (default: the run's).
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Adapted extractor checkpoint (default: the run's).
        #[arg(long = "fe-ckpt")]
        fe_ckpt: Option<PathBuf>,
        /// Score an image or a directory of images instead of the test split.
        #[arg(long)]
        input: Option<PathBuf>,
        #[command(flatten)]
        recon: ReconFlags,
        #[command(flatten)]
        score: ScoreFlags,
        /// Which distance the written heatmaps use.
        #[arg(long, value_enum, default_value = "combined")]
        ablate: ProvenanceArg,
        /// Output directory (same as --run).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compute image AUROC, pixel AUROC and PRO for a run's heatmaps.
    Eval {
        #[arg(long)]
        run: PathBuf,
    },
    /// Conditioning, adaptation and distance comparisons.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long = "fe-ckpt")]
        fe_ckpt: Option<PathBuf>,
        #[command(flatten)]
        recon: ReconFlags,
        #[command(flatten)]
        score: ScoreFlags,
    },
    /// train, finetune, detect and eval in one run directory.
    Run {
        #[command(flatten)]
        common: Common,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Config { preset, category, resolution, crop } => commands::config(preset, &category, resolution, crop),
        Command::Synth { config, seed, out } => commands::synth(config.as_deref(), seed, &out),
        Command::Train { common, epochs, out } => commands::train(&common, epochs, out.as_deref()),
        Command::Finetune { common, ckpt, fe, epochs, lambda_dl, out } => {
            commands::finetune(&common, ckpt.as_deref(), fe.as_deref(), epochs, lambda_dl, out.as_deref())
        }
        Command::Detect { mut common, ckpt, fe_ckpt, input, recon, score, ablate, out } => {
            if out.is_some() {
                common.run = out;
            }
            commands::detect(&common, ckpt.as_deref(), fe_ckpt.as_deref(), input.as_deref(), &recon, &score, ablate.into())
        }
        Command::Eval { run } => commands::eval(&run),
        Command::Ablate { common, ckpt, fe_ckpt, recon, score } => {
            commands::ablate(&common, ckpt.as_deref(), fe_ckpt.as_deref(), &recon, &score)
        }
        Command::Run { common } => commands::run_all(&common),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
