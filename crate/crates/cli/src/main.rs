mod commands;
mod parallel;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use selftpt_core::experiment::Split;
use selftpt_core::tensor::HvpBackend;

#[derive(Parser)]
#[command(
    name = "selftpt",
    version,
    about = "Self-supervised test-time prompt tuning on synthetic class-worlds"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic world file.
    Gen(GenArgs),
    /// Stage 1: learn prompts on the source classes.
    Train(TrainArgs),
    /// Stage 2: adapt trained prompts to the target class names.
    Adapt(AdaptArgs),
    /// Stage 3: classify target images and write an accuracy report.
    Eval(EvalArgs),
    /// Compare inference cost with per-image entropy prompt tuning.
    Bench(BenchArgs),
    /// Export gradient-alignment and class-distance diagnostics.
    Diagnose(DiagnoseArgs),
    /// Run the loss ablation over freshly generated worlds.
    Ablate(AblateArgs),
}

#[derive(Args)]
pub struct GenArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Encoder seed; defaults to the world seed.
    #[arg(long)]
    pub encoder_seed: Option<u64>,
    #[arg(long, default_value_t = 40)]
    pub classes: usize,
    /// Joint embedding dimension.
    #[arg(long, default_value_t = 32)]
    pub dim: usize,
    #[arg(long, default_value_t = 0.4)]
    pub sigma: f64,
    #[arg(long, default_value_t = 50)]
    pub train_per_class: usize,
    #[arg(long, default_value_t = 50)]
    pub test_per_class: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum SplitArg {
    BaseNew,
    Cross,
    Domain,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::BaseNew => Split::BaseNew,
            SplitArg::Cross => Split::Cross,
            SplitArg::Domain => Split::Domain,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
pub enum HvpArg {
    DoubleBackward,
    PearlmutterFd,
}

impl From<HvpArg> for HvpBackend {
    fn from(h: HvpArg) -> HvpBackend {
        match h {
            HvpArg::DoubleBackward => HvpBackend::DoubleBackward,
            HvpArg::PearlmutterFd => HvpBackend::PearlmutterFd,
        }
    }
}

#[derive(Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub world: PathBuf,
    #[arg(long, value_enum, default_value = "base-new")]
    pub split: SplitArg,
    /// Checkpoint to write.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Per-step training log (CSV).
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Peak stage-1 learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    /// EMA decay of the classification gradient.
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub prompt_len: Option<usize>,
    #[arg(long)]
    pub no_gm: bool,
    #[arg(long)]
    pub no_cpt: bool,
    #[arg(long)]
    pub no_normalize_projection: bool,
    #[arg(long, value_enum)]
    pub hvp: Option<HvpArg>,
}

#[derive(Args)]
pub struct AdaptArgs {
    #[arg(long)]
    pub world: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Adapted checkpoint to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Defaults to the split the checkpoint was trained on.
    #[arg(long, value_enum)]
    pub split: Option<SplitArg>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Accept a checkpoint trained on a different world file.
    #[arg(long)]
    pub force: bool,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub world: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_enum)]
    pub split: Option<SplitArg>,
    /// Adapt a trained checkpoint inline for this many steps first.
    #[arg(long, default_value_t = 0)]
    pub steps: usize,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub report: PathBuf,
    #[arg(long)]
    pub force: bool,
}

#[derive(Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub world: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_enum)]
    pub split: Option<SplitArg>,
    #[arg(long, default_value_t = 10)]
    pub tpt_steps: usize,
    #[arg(long, default_value_t = 8)]
    pub tpt_augs: usize,
    #[arg(long, default_value_t = 512)]
    pub images: usize,
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Args)]
pub struct DiagnoseArgs {
    #[arg(long)]
    pub world: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_enum)]
    pub split: Option<SplitArg>,
    /// Number of bootstrap resamples of the target images.
    #[arg(long, default_value_t = 10)]
    pub seeds: u32,
    /// Directory for the CSV and JSON outputs.
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub force: bool,
}

#[derive(Args)]
pub struct AblateArgs {
    /// Worlds are generated with seeds 0..K.
    #[arg(long, default_value_t = 10)]
    pub seeds: u64,
    #[arg(long)]
    pub report: PathBuf,
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen(a) => commands::gen(&a),
        Command::Train(a) => commands::train(&a),
        Command::Adapt(a) => commands::adapt(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Bench(a) => commands::bench(&a),
        Command::Diagnose(a) => commands::diagnose(&a),
        Command::Ablate(a) => commands::ablate(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
