mod commands;
mod config;

use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

use polystain::training::TrainMode;

/// A configuration problem: bad file, unknown key, invalid flag value.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct ConfigError(pub String);

#[derive(Parser)]
#[command(name = "polystain", version, about = "Prompt-switched virtual IHC staining")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
pub struct Common {
    /// TOML run configuration; unknown keys are rejected.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every random stream of the run.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic train and test splits.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        train_count: Option<usize>,
        #[arg(long)]
        test_count: Option<usize>,
        #[arg(long)]
        negative_fraction: Option<f64>,
    },
    /// Contrastively pretrain and freeze the text/image encoder pair.
    PretrainEncoder {
        #[command(flatten)]
        common: Common,
        /// Training split directory.
        #[arg(long)]
        data: PathBuf,
        /// Output checkpoint file.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Train the adapters on uniplex pairs.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Pretrained encoder; pretrained on the fly when absent.
        #[arg(long)]
        encoder: Option<PathBuf>,
        /// Stainer checkpoint whose frozen base is reused; pretrained on the fly when absent.
        #[arg(long)]
        base: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        prompt_mode: Option<TrainMode>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        lr_generator: Option<f64>,
        #[arg(long)]
        checkpoint_every: Option<usize>,
        #[arg(long)]
        allow_unvalidated: bool,
    },
    /// Stain input tiles.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Input PNG tiles.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        /// Marker name, or `all` for the full multiplex set.
        #[arg(long, default_value = "all")]
        marker: String,
        /// Prompt text to use instead of the built-in prompt.
        #[arg(long)]
        prompt_text: Option<String>,
        /// Treat an unknown marker as free prompt text.
        #[arg(long)]
        allow_freeform: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a checkpoint (or the ground truth) on a dataset.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, required_unless_present = "ground_truth")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "paired")]
        protocol: String,
        /// Feed ground-truth stains as generated output.
        #[arg(long)]
        ground_truth: bool,
        /// Encoder for FID features when no checkpoint is given.
        #[arg(long)]
        encoder: Option<PathBuf>,
        /// Directory holding (or receiving) the two gland segmenters.
        #[arg(long)]
        segmenters: Option<PathBuf>,
        /// Dataset the segmenters are trained on; defaults to `--data`.
        #[arg(long)]
        segmenter_data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare metric reports side by side.
    Report {
        #[command(flatten)]
        common: Common,
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if is_config_error(&e) {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn is_config_error(e: &anyhow::Error) -> bool {
    e.chain().any(|c| {
        c.downcast_ref::<ConfigError>().is_some()
            || c.downcast_ref::<polystain::Error>().is_some_and(|p| p.is_config())
    })
}
