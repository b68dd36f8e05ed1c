mod commands;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use streamvq::error::ErrorClass;

#[derive(Parser, Debug)]
#[command(name = "streamvq", version, about = "No-reference streaming video quality assessment")]
struct Cli {
    /// Run every data-parallel loop on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Index a frame-directory dataset into a manifest.
    Scan(ScanArgs),
    /// Write degraded copies of every clip in a manifest.
    Degrade(DegradeArgs),
    /// Compute per-frame quality labels over a kind x amplitude grid.
    Labels(LabelsArgs),
    /// Train a model on the training kinds of a label table.
    Train(TrainArgs),
    /// Stream clips through one or more checkpoints and write a report.
    Eval(EvalArgs),
    /// Write per-kind impact curves from a label table.
    Curves(CurvesArgs),
    /// Generate a synthetic dataset.
    Synth(SynthArgs),
}

#[derive(Args, Debug)]
pub struct ScanArgs {
    pub root: PathBuf,
    /// `davis_style` (one subdirectory per clip) or `flat`.
    #[arg(long, default_value = "davis_style")]
    pub layout: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct DegradeArgs {
    pub manifest: PathBuf,
    #[arg(long)]
    pub kind: String,
    #[arg(long)]
    pub amplitude: f64,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Resize frames to `HxW` before degrading.
    #[arg(long)]
    pub resize: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct LabelsArgs {
    pub manifest: PathBuf,
    /// Comma-separated kinds, or `all`.
    #[arg(long, default_value = "all")]
    pub kinds: String,
    /// Comma-separated amplitudes in [0, 1].
    #[arg(long, default_value = "0,0.2,0.4,0.6,0.8,1")]
    pub grid: String,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Resize frames to `HxW` before scoring.
    #[arg(long)]
    pub resize: Option<String>,
    /// Replace lpips_q with values from an external sidecar CSV.
    #[arg(long)]
    pub merge_lpips: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    pub manifest: PathBuf,
    pub labels: PathBuf,
    /// Plain-text `key=value` file; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Continue the run saved in `--out`.
    #[arg(long)]
    pub resume: bool,
    /// `temporal` or `baseline`.
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub train_kinds: Option<String>,
    #[arg(long)]
    pub val_kinds: Option<String>,
    #[arg(long)]
    pub clip_len: Option<String>,
    #[arg(long)]
    pub resolution: Option<String>,
    #[arg(long)]
    pub batch_size: Option<String>,
    #[arg(long)]
    pub learning_rate: Option<String>,
    #[arg(long)]
    pub beta1: Option<String>,
    #[arg(long)]
    pub beta2: Option<String>,
    #[arg(long)]
    pub adam_eps: Option<String>,
    #[arg(long)]
    pub max_epochs: Option<String>,
    #[arg(long)]
    pub max_steps: Option<String>,
    #[arg(long)]
    pub val_every: Option<String>,
    /// `frozen` or `batch`.
    #[arg(long)]
    pub batch_norm: Option<String>,
    #[arg(long)]
    pub seed: Option<String>,
    #[arg(long)]
    pub encoder_widths: Option<String>,
    #[arg(long)]
    pub lstm_hidden: Option<String>,
    #[arg(long)]
    pub mlp_hidden: Option<String>,
    #[arg(long)]
    pub mlp_in: Option<String>,
    #[arg(long)]
    pub dropout: Option<String>,
    #[arg(long)]
    pub subsample: Option<String>,
    #[arg(long)]
    pub temporal_enabled: Option<String>,
    #[arg(long)]
    pub init_seed: Option<String>,
    #[arg(long)]
    pub group_size: Option<String>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// One or more checkpoint files.
    #[arg(required = true)]
    pub checkpoints: Vec<PathBuf>,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub labels: PathBuf,
    /// Kinds to score: comma-separated, `validation` or `all`.
    #[arg(long, default_value = "validation")]
    pub kinds: String,
    #[arg(long, default_value_t = 8)]
    pub chunk_len: usize,
    #[arg(long, default_value_t = 0)]
    pub overlap: usize,
    /// `carry_state` or `warm_overlap`.
    #[arg(long, default_value = "carry_state")]
    pub mode: String,
    /// Frame size `HxW`; defaults to the resolution the labels were computed at.
    #[arg(long)]
    pub resolution: Option<String>,
    /// Leave the constant-mean predictor out of the report.
    #[arg(long)]
    pub no_constant: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct CurvesArgs {
    pub labels: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 2)]
    pub clips: usize,
    #[arg(long, default_value_t = 8)]
    pub frames: usize,
    /// Frame size `HxW`.
    #[arg(long, default_value = "96x96")]
    pub size: String,
    #[arg(long)]
    pub seed: Option<u64>,
}

fn one_line(s: &str) -> String {
    s.lines().map(str::trim).filter(|l| !l.is_empty()).collect::<Vec<_>>().join("; ")
}

fn fail(class: &str, code: u8, message: &str) -> ExitCode {
    eprintln!("error[{class}]: {}", one_line(message));
    ExitCode::from(code)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand) {
                e.exit();
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            return fail("usage", 2, first);
        }
    };
    if cli.sequential {
        streamvq::par::set_mode(streamvq::par::ExecMode::Sequential);
    }
    let result = match cli.command {
        Command::Scan(a) => commands::scan(a),
        Command::Degrade(a) => commands::degrade(a),
        Command::Labels(a) => commands::labels(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Curves(a) => commands::curves(a),
        Command::Synth(a) => commands::synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => match e.class() {
            ErrorClass::Usage => fail("usage", 2, &e.to_string()),
            ErrorClass::Data => fail("data", 3, &e.to_string()),
            ErrorClass::Numeric => fail("numeric", 4, &e.to_string()),
        },
    }
}
