//! The `swipe` command line: corpus generation, point sampling, training,
//! inference, evaluation and ablation sweeps.

pub mod commands;
pub mod config;
pub mod sweep;

use std::fmt;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use swipe_core::inference::Refinement;

use crate::config::Preset;

/// Process exit code for success.
pub const EXIT_OK: i32 = 0;
/// Process exit code for failures inside the tool.
pub const EXIT_INTERNAL: i32 = 1;
/// Process exit code for bad input, configuration or paths.
pub const EXIT_USER: i32 = 2;

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn user(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_USER,
            message: message.into(),
        }
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_INTERNAL,
            message: message.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<swipe_core::Error> for CliError {
    fn from(e: swipe_core::Error) -> Self {
        if e.is_user_error() {
            Self::user(e.to_string())
        } else {
            Self::internal(e.to_string())
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "swipe", version, about = "Patch-level implicit neural segmentation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic corpus (images, masks, manifest).
    Generate(GenerateArgs),
    /// Sample boundary-biased occupancy points for every corpus image.
    Sample(SampleArgs),
    /// Train a model and write checkpoints and loss logs.
    Train(TrainArgs),
    /// Reconstruct one image's mask at any output size.
    Infer(InferArgs),
    /// Score a checkpoint on a corpus split.
    Eval(EvalArgs),
    /// Train a grid of variants and seeds and aggregate test Dice.
    Ablate(AblateArgs),
}

/// Config file and preset; flags outrank the environment, which outranks the file.
#[derive(Debug, Clone, Args)]
pub struct ConfigArgs {
    /// TOML run configuration.
    #[arg(long, env = "SWIPE_CONFIG")]
    pub config: Option<PathBuf>,
    /// Architecture preset for `[model]` defaults.
    #[arg(long, env = "SWIPE_PRESET", value_enum)]
    pub preset: Option<Preset>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Corpus directory to create.
    #[arg(long, env = "SWIPE_CORPUS")]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub n: Option<usize>,
    /// Square image side in pixels.
    #[arg(long)]
    pub size: Option<usize>,
    /// Foreground classes.
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long, env = "SWIPE_SEED")]
    pub seed: Option<u64>,
    /// Standard deviation of additive image noise.
    #[arg(long)]
    pub noise: Option<f64>,
    /// Write into a non-empty directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long, env = "SWIPE_CORPUS")]
    pub corpus: Option<PathBuf>,
    #[arg(long, env = "SWIPE_SEED")]
    pub seed: Option<u64>,
    #[arg(long)]
    pub n_background: Option<usize>,
    /// Points per foreground class.
    #[arg(long)]
    pub n_foreground: Option<usize>,
    #[arg(long)]
    pub boundary_fraction: Option<f64>,
    /// Boundary band radius in pixels.
    #[arg(long)]
    pub boundary_band: Option<f64>,
    #[arg(long)]
    pub jitter: Option<bool>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long, env = "SWIPE_CORPUS")]
    pub corpus: Option<PathBuf>,
    /// Run directory for checkpoints and logs.
    #[arg(long, env = "SWIPE_OUT")]
    pub out: Option<PathBuf>,
    #[arg(long, env = "SWIPE_ITERATIONS")]
    pub iterations: Option<usize>,
    #[arg(long, env = "SWIPE_SEED")]
    pub seed: Option<u64>,
    #[arg(long)]
    pub batch_images: Option<usize>,
    #[arg(long)]
    pub points_per_image: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Fraction of training images used, in (0, 1].
    #[arg(long)]
    pub annotation_fraction: Option<f64>,
    /// Component switch `key=value`, e.g. `spo=off` or `mea=add`; repeatable.
    #[arg(long = "ablate", value_name = "KEY=VALUE")]
    pub ablate: Vec<String>,
    /// Validation cadence in steps; 0 validates only at the end.
    #[arg(long)]
    pub val_every: Option<usize>,
    /// Serial execution with a fixed reduction order.
    #[arg(long)]
    pub deterministic: bool,
    /// Initialize and write a checkpoint without updates.
    #[arg(long)]
    pub dry_run: bool,
}

#[derive(Debug, Clone, Args)]
pub struct ReconstructionArgs {
    /// `dense` evaluates every pixel; `mise` refines a coarse lattice.
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<Refinement>,
    /// Coarse lattice spacing for `mise`; a power of two.
    #[arg(long)]
    pub initial_stride: Option<usize>,
    #[arg(long)]
    pub threshold: Option<f64>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Grayscale PNG input.
    #[arg(long)]
    pub image: PathBuf,
    /// Output mask PNG; the sidecar goes next to it with a `.json` extension.
    #[arg(long)]
    pub out: PathBuf,
    /// `N` for N×N or `HxW`; defaults to the input size.
    #[arg(long, value_parser = parse_size)]
    pub out_size: Option<(usize, usize)>,
    #[command(flatten)]
    pub recon: ReconstructionArgs,
    /// Also decode densely and record pixel agreement in the sidecar.
    #[arg(long)]
    pub compare_dense: bool,
    /// Ground-truth mask PNG at the output size; records Dice in the sidecar.
    #[arg(long)]
    pub truth: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, env = "SWIPE_CORPUS")]
    pub corpus: Option<PathBuf>,
    /// train, val or test.
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Metrics CSV path.
    #[arg(long)]
    pub out: PathBuf,
    /// Decode at this size against masks rasterized from the manifest shapes.
    #[arg(long, value_parser = parse_size)]
    pub out_size: Option<(usize, usize)>,
    #[command(flatten)]
    pub recon: ReconstructionArgs,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long, env = "SWIPE_CORPUS")]
    pub corpus: Option<PathBuf>,
    /// Sweep directory; completed cells found here are skipped.
    #[arg(long, env = "SWIPE_OUT")]
    pub out: Option<PathBuf>,
    /// Axis `key=v1,v2,...`; repeatable. Keys: mea, spo, global_cond,
    /// source_coord, occurrence, connectivity, annotation_fraction.
    #[arg(long = "grid", value_name = "KEY=V1,V2")]
    pub grid: Vec<String>,
    /// Comma-separated training seeds.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    pub seeds: Vec<u64>,
    #[arg(long, env = "SWIPE_ITERATIONS")]
    pub iterations: Option<usize>,
    /// Print the planned cells and exit.
    #[arg(long)]
    pub plan: bool,
}

fn parse_mode(s: &str) -> Result<Refinement, String> {
    match s {
        "mise" => Ok(Refinement::Mise),
        "dense" => Ok(Refinement::Dense),
        _ => Err(format!("expected mise or dense, got {s:?}")),
    }
}

/// `N` or `HxW`.
pub fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let num = |t: &str| t.trim().parse::<usize>().map_err(|e| format!("{t:?}: {e}"));
    let (h, w) = match s.split_once(['x', 'X']) {
        Some((h, w)) => (num(h)?, num(w)?),
        None => {
            let n = num(s)?;
            (n, n)
        }
    };
    if h == 0 || w == 0 {
        return Err("size must be positive".into());
    }
    Ok((h, w))
}

/// Runs one parsed command and maps the outcome to an exit code.
pub fn run(cli: Cli) -> i32 {
    let result = match cli.command {
        Command::Generate(a) => commands::generate(&a),
        Command::Sample(a) => commands::sample(&a),
        Command::Train(a) => commands::train(&a),
        Command::Infer(a) => commands::infer(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Ablate(a) => sweep::ablate(&a),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.code
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sizes_parse() {
        assert_eq!(parse_size("192"), Ok((192, 192)));
        assert_eq!(parse_size("48x64"), Ok((48, 64)));
        assert!(parse_size("0").is_err());
        assert!(parse_size("a").is_err());
    }

    #[test]
    fn core_errors_map_to_exit_codes() {
        let user: CliError = swipe_core::Error::Config("x".into()).into();
        assert_eq!(user.code, EXIT_USER);
        let internal: CliError = swipe_core::Error::NonFinite {
            step: 3,
            breakdown: "nan".into(),
        }
        .into();
        assert_eq!(internal.code, EXIT_INTERNAL);
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
