//! `sfarl`: synthesize datasets, train, restore, evaluate and self-check.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use sfarl_core::degradation::DatasetKind;
use sfarl_core::loss::LossKind;
use sfarl_core::SfarlError;

/// Exit statuses.
pub const EXIT_USAGE: u8 = 1;
pub const EXIT_DATA: u8 = 2;
pub const EXIT_VERIFY: u8 = 3;

#[derive(Parser, Debug)]
#[command(
    name = "sfarl",
    version,
    about = "Learned fidelity and regularization restoration"
)]
pub struct Cli {
    /// Worker threads; 1 gives bit-reproducible runs (results are identical
    /// for any count, but 1 is the documented reference mode).
    #[arg(long, global = true, env = "SFARL_THREADS")]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a degraded/clean dataset and its manifest.
    Synth(SynthArgs),
    /// Greedy stage-wise training followed by joint fine-tuning.
    Train(TrainArgs),
    /// Restore an image with a trained model.
    Infer(InferArgs),
    /// PSNR/SSIM of restored images against ground truth.
    Eval(EvalArgs),
    /// Certify the analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum TaskArg {
    Deconv,
    Multideg,
    Rain,
    Denoise,
}

impl TaskArg {
    pub fn dataset_kind(self) -> DatasetKind {
        match self {
            TaskArg::Deconv => DatasetKind::Deconv,
            TaskArg::Multideg => DatasetKind::MultiDegrade,
            TaskArg::Rain => DatasetKind::Rain,
            TaskArg::Denoise => DatasetKind::Denoise,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum LossArg {
    Mse,
    #[value(name = "neg_ssim")]
    NegSsim,
}

impl From<LossArg> for LossKind {
    fn from(l: LossArg) -> Self {
        match l {
            LossArg::Mse => LossKind::Mse,
            LossArg::NegSsim => LossKind::NegSsim,
        }
    }
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long, value_enum)]
    pub task: TaskArg,
    /// Output directory for images and `manifest.jsonl`.
    #[arg(long)]
    pub out: PathBuf,
    /// Directory of clean images; procedural scenes are used when absent.
    #[arg(long)]
    pub clean: Option<PathBuf>,
    /// Number of procedural scenes when no clean directory is given.
    #[arg(long, default_value_t = 10)]
    pub scenes: usize,
    /// Side of procedural scenes.
    #[arg(long, default_value_t = 64)]
    pub scene_size: usize,
    /// Degraded variants per clean image (default: 7 for rain, 1 otherwise).
    #[arg(long)]
    pub variants: Option<usize>,
    /// Clean images (in order) whose samples are marked held out.
    #[arg(long, default_value_t = 0)]
    pub held_out: usize,
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long)]
    pub severity: Option<f64>,
    /// True blur kernel as a plain-text grid (deconv/multideg).
    #[arg(long)]
    pub kernel: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Expected task; must match the manifest when given.
    #[arg(long, value_enum)]
    pub task: Option<TaskArg>,
    /// Where the final model is written.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, value_enum, default_value = "mse")]
    pub loss: LossArg,
    /// Number of stages (default depends on the task).
    #[arg(long)]
    pub stages: Option<usize>,
    #[arg(long, default_value_t = 10)]
    pub epochs_greedy: usize,
    #[arg(long, default_value_t = 50)]
    pub epochs_joint: usize,
    #[arg(long, default_value_t = 8)]
    pub batch: usize,
    #[arg(long, default_value_t = 64)]
    pub patch: usize,
    /// Learning rate of the greedy phase.
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    /// Learning rate of the joint phase.
    #[arg(long, default_value_t = 1e-4)]
    pub joint_lr: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Filter side (odd).
    #[arg(long, default_value_t = 7)]
    pub filter_size: usize,
    /// RBF means per influence function.
    #[arg(long, default_value_t = 63)]
    pub rbf: usize,
    /// Directory receiving checkpoints; nothing is checkpointed when absent.
    #[arg(long)]
    pub checkpoint_dir: Option<PathBuf>,
    /// Joint-phase checkpoint interval in epochs (the last epoch is always
    /// checkpointed).
    #[arg(long, default_value_t = 10)]
    pub checkpoint_every: usize,
    /// Resume from a checkpoint model file written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Training log (JSON lines); defaults to `<model>.log.jsonl`.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct InferArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Expected task; must match the model when given.
    #[arg(long, value_enum)]
    pub task: Option<TaskArg>,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    /// Blur kernel the restorer uses (required for deconvolution models).
    #[arg(long)]
    pub kernel: Option<PathBuf>,
    /// Also write every stage output next to `--output`.
    #[arg(long)]
    pub emit_intermediates: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Restored image or directory of images.
    #[arg(long)]
    pub restored: Option<PathBuf>,
    /// Ground-truth image or directory (paired by file name).
    #[arg(long)]
    pub ground_truth: Option<PathBuf>,
    /// Evaluate a model on a manifest's held-out split instead.
    #[arg(long, requires = "model")]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Structured report (JSON).
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 10)]
    pub seeds: u64,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    /// Test hook: corrupt one analytic block to exercise failure reporting.
    #[arg(long, hide = true)]
    pub perturb: Option<String>,
}

/// Errors mapped onto exit statuses.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(SfarlError),
    Verify(String),
}

impl From<SfarlError> for CliError {
    fn from(e: SfarlError) -> Self {
        CliError::Data(e)
    }
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
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(CliError::Data(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_DATA)
        }
        Err(CliError::Verify(msg)) => {
            eprintln!("verification failed: {msg}");
            ExitCode::from(EXIT_VERIFY)
        }
    }
}
