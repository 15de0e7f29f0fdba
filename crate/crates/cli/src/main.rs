use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use protoseg::Error;

mod commands;
mod config;

use config::RunConfig;

/// Few-shot segmentation with prototype alignment on synthetic shapes.
#[derive(Parser, Debug)]
#[command(name = "protoseg", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write training (or test) episodes as PGM directories plus a manifest.
    GenData(GenDataArgs),
    /// Train an encoder; writes loss.csv and checkpoints.
    Train(TrainArgs),
    /// Evaluate a checkpoint on random episodes.
    Eval(EvalArgs),
    /// Segment the queries of one episode directory.
    Demo(DemoArgs),
    /// Train matched pairs with and without the alignment loss and compare.
    AblatePar(AblateArgs),
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// TOML run configuration; defaults are listed below.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed (overrides `seed`).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    out: PathBuf,
    /// Number of episodes.
    #[arg(long, default_value_t = 1)]
    episodes: usize,
    /// Class part to draw from: seen or unseen.
    #[arg(long, default_value = "seen")]
    part: String,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    out: PathBuf,
    /// Overrides `train.lambda_par`; 0 disables the alignment loss.
    #[arg(long, allow_negative_numbers = true)]
    lambda_par: Option<f64>,
    /// Overrides `train.iterations`.
    #[arg(long)]
    iterations: Option<usize>,
    /// Train from a gen-data directory instead of generating episodes.
    #[arg(long)]
    episodes_dir: Option<PathBuf>,
    /// Continue from a checkpoint; its stored configuration is used.
    #[arg(long, conflicts_with_all = ["config", "seed", "lambda_par"])]
    resume: Option<PathBuf>,
    /// Progress line interval; 0 prints nothing.
    #[arg(long, default_value_t = 100)]
    log_every: usize,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Only the `eval` and `annotations` sections are read.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// dense, scribble or bbox.
    #[arg(long)]
    annotation: Option<String>,
    #[arg(long)]
    ways: Option<usize>,
    #[arg(long)]
    shots: Option<usize>,
    #[arg(long)]
    runs: Option<usize>,
    /// Episodes per run.
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    base_seed: Option<u64>,
    /// Worker cap (otherwise PROTOSEG_THREADS, otherwise all cores).
    #[arg(long)]
    threads: Option<usize>,
    /// Also report the mean support/query prototype distance.
    #[arg(long)]
    probe_alignment: bool,
    #[arg(long)]
    probe_episodes: Option<usize>,
    /// Evaluate freshly initialised weights of the same architecture.
    #[arg(long)]
    untrained: bool,
}

#[derive(Args, Debug)]
pub struct DemoArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Episode directory as written by gen-data.
    #[arg(long)]
    episode: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "dense")]
    annotation: String,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated seeds, one matched pair each.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
    #[arg(long)]
    iterations: Option<usize>,
    /// Weight of the alignment arm; defaults to `train.lambda_par`.
    #[arg(long, allow_negative_numbers = true)]
    lambda_par: Option<f64>,
    #[arg(long)]
    runs: Option<usize>,
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    probe_episodes: Option<usize>,
}

impl ConfigArgs {
    fn load(&self) -> protoseg::Result<RunConfig> {
        let mut cfg = RunConfig::load_or_default(self.config.as_deref())?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::InvalidArgument(_) => 2,
        Error::Io { .. } | Error::Format { .. } => 3,
        Error::NonFinite(_) => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let defaults = format!(
        "Configuration keys and their defaults (TOML):\n\n{}",
        RunConfig::default().to_toml()
    );
    let matches = Cli::command().after_long_help(defaults).get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Demo(a) => commands::demo(a),
        Command::AblatePar(a) => commands::ablate_par(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
