//! Command-line front end: synthesis, training, evaluation, inference,
//! ablation and plotting.

mod commands;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use pcflow_core::Error;

/// Environment variable naming the config file used when `--config` is absent.
pub const CONFIG_ENV: &str = "PCFLOW_CONFIG";

#[derive(Parser, Debug)]
#[command(name = "pcflow", version, about = "Point-cloud scene-flow estimation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate synthetic rigid-motion scene pairs.
    Synth(SynthArgs),
    /// Train a model on a directory of scene pairs.
    Train(TrainArgs),
    /// Evaluate a checkpoint, alongside the zero-flow baseline.
    Eval(EvalArgs),
    /// Predict the flow of one scene pair.
    Infer(InferArgs),
    /// Train and compare module ablations over several seeds.
    Ablate(AblateArgs),
    /// Render a scene pair and its flow to a PNG image.
    Plot(PlotArgs),
}

#[derive(Args, Debug)]
struct ConfigArg {
    /// TOML config; falls back to $PCFLOW_CONFIG, then built-in defaults.
    #[arg(long, env = CONFIG_ENV)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    scenes: usize,
    #[command(flatten)]
    config: ConfigArg,
    /// Base seed; overrides `synth.seed`.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long)]
    data: PathBuf,
    /// Validation scenes used for model selection.
    #[arg(long)]
    val: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Format {
    Text,
    Structured,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    per_scene: bool,
    #[arg(long, value_enum, default_value = "text")]
    format: Format,
}

#[derive(Args, Debug)]
struct InferArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    pair: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long)]
    data: PathBuf,
    /// Held-out scenes the variants are compared on.
    #[arg(long)]
    test: PathBuf,
    #[arg(long)]
    val: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
    /// Subset of full, gf_off, str_off, da_off, maxpool.
    #[arg(long, value_delimiter = ',')]
    variants: Vec<String>,
    /// Also write one structured record per run to this file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PlotArgs {
    #[arg(long)]
    pair: PathBuf,
    /// Scene-pair file whose `flow` is the prediction, as written by `infer`.
    #[arg(long)]
    pred: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// End-point error above which a warped point is drawn red.
    #[arg(long, default_value_t = 0.1)]
    threshold: f64,
}

pub fn exit_code(err: &Error) -> u8 {
    match err {
        Error::NonFinite { .. } => 4,
        _ => 3,
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Synth(a) => commands::synth(&a.out, a.scenes, a.config.config.as_deref(), a.seed),
        Command::Train(a) => commands::train(
            a.config.config.as_deref(),
            &a.data,
            a.val.as_deref(),
            &a.out,
            a.resume.as_deref(),
        ),
        Command::Eval(a) => commands::eval(&a.ckpt, &a.data, a.per_scene, a.format == Format::Structured),
        Command::Infer(a) => commands::infer(&a.ckpt, &a.pair, &a.out),
        Command::Ablate(a) => commands::ablate(
            a.config.config.as_deref(),
            &a.data,
            &a.test,
            a.val.as_deref(),
            &a.seeds,
            &a.variants,
            a.out.as_deref(),
        ),
        Command::Plot(a) => plot::plot(&a.pair, a.pred.as_deref(), &a.out, a.threshold),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
