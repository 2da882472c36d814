mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use lidarmix::ErrorClass;

#[derive(Debug, Parser)]
#[command(name = "lidarmix", version, about = "Cross-domain point cloud mixing for LiDAR segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Uda,
    Ssda,
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    /// Run configuration (TOML). A manifest from an earlier run also works.
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    /// Component switch, e.g. `--toggle ema=off`. Repeatable.
    #[arg(long = "toggle", value_name = "COMPONENT=on|off", value_parser = parse_toggle)]
    pub toggles: Vec<(String, bool)>,
    #[arg(long)]
    pub zeta: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub mu: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub gamma: Option<u64>,
    /// File listing labeled target frames, one name per line.
    #[arg(long)]
    pub labeled_frames: Option<PathBuf>,
    /// Starting checkpoint; overrides `data.checkpoint`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

fn parse_toggle(s: &str) -> Result<(String, bool), String> {
    let (name, state) = s.split_once('=').ok_or_else(|| format!("expected COMPONENT=on|off, got {s:?}"))?;
    let on = match state {
        "on" | "true" | "1" => true,
        "off" | "false" | "0" => false,
        _ => return Err(format!("expected on or off, got {state:?}")),
    };
    Ok((name.trim().to_string(), on))
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Checkpoint to score; overrides `data.checkpoint`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Labeled dataset directory; defaults to `data.validation`.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Directory for `report.txt` and `report.kv`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenToyArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub frames: usize,
    #[arg(long, default_value_t = 2048)]
    pub points: usize,
    /// 2 (ground, box) or 3 (ground, box, pole).
    #[arg(long, default_value_t = 3)]
    pub classes: usize,
    /// Comma-separated terms from rotate, subsample, noise, combo; each may
    /// carry a magnitude, e.g. `rotate=0.5,noise=0.05`.
    #[arg(long, default_value = "combo")]
    pub shift: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Held-out shifted frames; defaults to a quarter of `--frames`.
    #[arg(long)]
    pub val_frames: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// One of zeta, alpha, mu, beta, gamma.
    #[arg(long)]
    pub param: String,
    /// Comma-separated values.
    #[arg(long, value_delimiter = ',', required = true)]
    pub values: Vec<f64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train on the labeled source set.
    Pretrain(RunArgs),
    /// Supervised epochs on source plus labeled target frames.
    Finetune(RunArgs),
    /// Teacher-student adaptation; the mode comes from --mode or the config.
    Adapt(RunArgs),
    /// Unsupervised adaptation.
    AdaptUda(RunArgs),
    /// Semi-supervised adaptation with labeled target frames.
    AdaptSsda(RunArgs),
    /// Score a checkpoint on a labeled dataset.
    Eval(EvalArgs),
    /// Write a synthetic source/target pair.
    GenToy(GenToyArgs),
    /// Repeat adaptation over values of one parameter.
    Sweep(SweepArgs),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Pretrain(a) => commands::pretrain(&a),
        Command::Finetune(a) => commands::finetune(&a),
        Command::Adapt(a) => commands::adapt(&a, None),
        Command::AdaptUda(a) => commands::adapt(&a, Some(ModeArg::Uda)),
        Command::AdaptSsda(a) => commands::adapt(&a, Some(ModeArg::Ssda)),
        Command::Eval(a) => commands::eval(&a),
        Command::GenToy(a) => commands::gen_toy(&a),
        Command::Sweep(a) => commands::sweep(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.class() {
                ErrorClass::Usage => 1,
                ErrorClass::Data => 2,
                ErrorClass::Numeric => 3,
            })
        }
    }
}
