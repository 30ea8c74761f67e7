//! `dpae`: seeded pipeline commands emitting CSV and JSON artifacts.
//!
//! Exit codes: 0 success, 1 usage, 2 numerical failure, 3 I/O.

mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dpae_core::Error as CoreError;

#[derive(Debug, Parser)]
#[command(name = "dpae", version, about = "Denoising padded autoencoder diagnosis pipeline")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Master seed; overrides the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Built-in profile used when no config file is given.
    #[arg(long, global = true, value_enum, default_value_t = ScaleArg::Desk)]
    pub scale: ScaleArg,
    /// JSON experiment config (as written by `dpae config`); flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ScaleArg {
    Desk,
    Paper,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// 30 dB, 20 % of patches missing.
    Moderate,
    /// 25 dB, 40 % of patches missing.
    Stress,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum HeadArg {
    Mlp,
    Forest,
    EndToEnd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TaskArg {
    Location,
    Size,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Scope {
    Ops,
    Model,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModelProfile {
    Toy,
    Desk,
}

#[derive(Debug, Args)]
pub struct PerturbArgs {
    /// Named `(snr, pad)` setting; `--snr` and `--pad` override its parts.
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    /// Signal-to-noise ratio in dB; omitted means no noise.
    #[arg(long)]
    pub snr: Option<f64>,
    /// Fraction of patches zeroed.
    #[arg(long)]
    pub pad: Option<f64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the resolved experiment config.
    Config {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate and normalize a synthetic transient dataset.
    GenData {
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the autoencoder through the noise/masking curriculum.
    TrainDpae {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Perturb one sample and reconstruct it.
    Reconstruct {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        sample: usize,
        #[command(flatten)]
        perturb: PerturbArgs,
        /// Skip the model: the reconstruction is the perturbed input. Without
        /// perturbation flags nothing is perturbed.
        #[arg(long)]
        passthrough: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Encode every sample and write one latent row per event.
    ExtractLatents {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        perturb: PerturbArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit diagnosis heads on perturbed training events.
    TrainHeads {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Head kinds; `end-to-end` reads raw transients, the others read latents.
        #[arg(long, value_enum, value_delimiter = ',', default_values_t = [HeadArg::Mlp, HeadArg::Forest, HeadArg::EndToEnd])]
        head: Vec<HeadArg>,
        #[arg(long, value_enum, value_delimiter = ',', default_values_t = [TaskArg::Location, TaskArg::Size])]
        task: Vec<TaskArg>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate trained heads on freshly perturbed held-out and training events.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        heads: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Latent and channel importance for a pair of latent heads.
    Explain {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        heads: PathBuf,
        /// Which latent head pair to explain.
        #[arg(long, value_enum, default_value_t = HeadArg::Mlp)]
        head: HeadArg,
        /// Size band in cm, `lo,hi`; events inside it drive channel importance.
        #[arg(long, value_parser = parse_band)]
        band: Option<(f64, f64)>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference gradient check.
    Gradcheck {
        #[arg(long, value_enum, default_value_t = Scope::All)]
        scope: Scope,
        /// Model profile for the composition check.
        #[arg(long, value_enum, default_value_t = ModelProfile::Toy)]
        profile: ModelProfile,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        /// Relative error bound.
        #[arg(long, default_value_t = 1e-5)]
        tol: f64,
        /// Entries whose absolute difference is within this bound also pass.
        #[arg(long, default_value_t = 0.0)]
        atol: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_band(s: &str) -> Result<(f64, f64), String> {
    let (lo, hi) = s.split_once(',').ok_or("expected lo,hi")?;
    let parse = |v: &str| v.trim().parse::<f64>().map_err(|e| format!("{v:?}: {e}"));
    let (lo, hi) = (parse(lo)?, parse(hi)?);
    if lo < hi {
        Ok((lo, hi))
    } else {
        Err(format!("empty band {lo},{hi}"))
    }
}

/// Failures raised by the command layer itself.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Numerical(String),
    Io(String),
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Usage(m) | Failure::Numerical(m) | Failure::Io(m) => f.write_str(m),
        }
    }
}

impl std::error::Error for Failure {}

const EXIT_USAGE: u8 = 1;
const EXIT_NUMERICAL: u8 = 2;
const EXIT_IO: u8 = 3;

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(f) = cause.downcast_ref::<Failure>() {
            return match f {
                Failure::Usage(_) => EXIT_USAGE,
                Failure::Numerical(_) => EXIT_NUMERICAL,
                Failure::Io(_) => EXIT_IO,
            };
        }
        if let Some(e) = cause.downcast_ref::<CoreError>() {
            return match e {
                CoreError::Config(_) | CoreError::Input(_) => EXIT_USAGE,
                CoreError::NonFinite(_) | CoreError::NonFiniteGradient(_) | CoreError::Numerical(_) => EXIT_NUMERICAL,
                CoreError::Tensor(dpae_autograd::TensorError::NonFinite(_)) => EXIT_NUMERICAL,
                CoreError::Tensor(_) => EXIT_USAGE,
                CoreError::Io { .. } | CoreError::Json { .. } | CoreError::Format { .. } => EXIT_IO,
            };
        }
        if cause.is::<std::io::Error>() || cause.is::<serde_json::Error>() {
            return EXIT_IO;
        }
    }
    EXIT_USAGE
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
