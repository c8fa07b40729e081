use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};

mod commands;

#[derive(Parser, Debug)]
#[command(name = "refcomp", about = "Reference-conditioned image composition on synthetic scenes")]
#[command(disable_version_flag = true)]
struct Cli {
    /// Print tool and file-format versions.
    #[arg(long, action = clap::ArgAction::Version)]
    version: Option<bool>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic multi-view dataset with a manifest.
    GenData(GenDataArgs),
    /// Validate a config file and print its canonical form and hash; without a
    /// file, print the defaults.
    Config(ConfigArgs),
    /// Train a fresh (or resumed) model on the pretrain split.
    Pretrain(PretrainArgs),
    /// Finetune a checkpoint on the finetune views of one object.
    Finetune(FinetuneArgs),
    /// Compose references into a background box.
    Compose(ComposeArgs),
    /// Compose and score every record of a split.
    Eval(EvalArgs),
    /// Evaluate the five ablation checkpoints and write a table.
    Ablate(AblateArgs),
    /// Plot a sampling trajectory or a metrics log.
    Plot(PlotArgs),
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Objects with finetune and held-out test views.
    #[arg(long, default_value_t = 10)]
    pub objects: usize,
    /// Objects used only for pretraining.
    #[arg(long, default_value_t = 0)]
    pub pretrain_objects: usize,
    #[arg(long, default_value_t = 5)]
    pub views: usize,
    #[arg(long, default_value_t = 64)]
    pub canvas: usize,
    #[arg(long, default_value_t = 4)]
    pub latent_factor: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Replace an existing dataset in --out.
    #[arg(long)]
    pub overwrite: bool,
}

#[derive(Args, Debug)]
pub struct ConfigArgs {
    pub file: Option<PathBuf>,
    /// Print the micro test configuration instead of the defaults.
    #[arg(long, conflicts_with = "file")]
    pub micro: bool,
}

#[derive(Args, Debug)]
pub struct PretrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// TOML config; defaults apply to missing keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// JSON-lines metrics log (default: <out>.metrics.jsonl).
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub max_steps: Option<u64>,
    /// Continue from a pretrain checkpoint.
    #[arg(long, conflicts_with_all = ["config", "seed"])]
    pub resume: Option<PathBuf>,
    /// Train in double precision.
    #[arg(long)]
    pub f64: bool,
}

#[derive(Args, Debug)]
pub struct FinetuneArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub object: String,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    #[arg(long)]
    pub max_steps: Option<u64>,
}

#[derive(Args, Debug)]
pub struct ComposeArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub background: PathBuf,
    /// Box as "x,y,w,h" in pixels.
    #[arg(long)]
    pub bbox: String,
    /// Comma-separated reference PNGs (1 to 5).
    #[arg(long, value_delimiter = ',', required = true)]
    pub refs: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Ground-truth composite; enables feature-distance diagnostics.
    #[arg(long)]
    pub ground_truth: Option<PathBuf>,
    /// Write per-step diagnostics as JSON.
    #[arg(long)]
    pub dump_trajectory: Option<PathBuf>,
    /// Write the reference-to-ground-truth patch correspondence (needs --ground-truth).
    #[arg(long)]
    pub dump_correspondence: Option<PathBuf>,
    /// Write full per-step attention maps as JSON.
    #[arg(long)]
    pub dump_attention: Option<PathBuf>,
    /// Fill the calibrated context slots with the uncalibrated features.
    #[arg(long)]
    pub bypass_calibration: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long)]
    pub out: PathBuf,
    /// Checkpoint whose encoder scores foregrounds (default: --ckpt).
    #[arg(long)]
    pub evaluator: Option<PathBuf>,
    /// References per composite (default: the config's num_refs).
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Stamp records with the current time (makes reports non-reproducible).
    #[arg(long)]
    pub timestamp: bool,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Directory holding row1.ckpt .. row5.ckpt.
    #[arg(long)]
    pub configs: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Checkpoint whose encoder scores foregrounds (default: row5.ckpt).
    #[arg(long)]
    pub evaluator: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    pub k: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Evaluate the pretrained rows without per-object finetuning.
    #[arg(long)]
    pub no_finetune: bool,
    #[arg(long)]
    pub finetune_steps: Option<u64>,
    #[arg(long)]
    pub max_objects: Option<usize>,
}

#[derive(Args, Debug)]
pub struct PlotArgs {
    /// Trajectory JSON written by `compose --dump-trajectory`.
    #[arg(long, required_unless_present = "metrics")]
    pub trajectory: Option<PathBuf>,
    /// Metrics JSON-lines log.
    #[arg(long, conflicts_with = "trajectory")]
    pub metrics: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    let parsed = Cli::command()
        .version(commands::version_string())
        .try_get_matches()
        .and_then(|m| Cli::from_arg_matches(&m));
    let cli = match parsed {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::Config(a) => commands::config(a),
        Command::Pretrain(a) => commands::pretrain(a),
        Command::Finetune(a) => commands::finetune(a),
        Command::Compose(a) => commands::compose(a),
        Command::Eval(a) => commands::eval(a),
        Command::Ablate(a) => commands::ablate(a),
        Command::Plot(a) => commands::plot(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
