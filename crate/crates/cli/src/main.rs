//! `teleop`: data generation, training, evaluation, ablation, probing and
//! the live session service.

mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "teleop", version, about = "Learned expressive teleoperation: data, training, evaluation and live serving")]
pub struct Cli {
    /// Config file (flat key = value, `include = other.conf` allowed).
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override one config key; repeatable. Beats env and file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Tiny model, short data, few epochs.
    #[arg(long, global = true)]
    pub smoke: bool,
    /// Output directory for this run.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[arg(short, long, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Record operator sessions for one mood or all of them.
    GenData(GenData),
    /// Train one variant on a dataset directory.
    Train(Train),
    /// Replay held-out chunks with a checkpoint in the loop.
    Eval(Eval),
    /// Train and evaluate every variant of the grid.
    Ablate(Ablate),
    /// Roll out several seeds from a fixed start and measure spread.
    ProbeDiversity(Probe),
    /// Run the live session service.
    Serve(Serve),
    /// Convert a binary episode to JSON.
    ExportEpisode(Export),
    /// Print a config template listing every key.
    ConfigTemplate,
}

#[derive(Args, Debug)]
pub struct GenData {
    /// A mood name or `all`.
    #[arg(long, default_value = "all")]
    pub mood: String,
    #[arg(long)]
    pub minutes: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub profile: Option<String>,
}

#[derive(Args, Debug)]
pub struct Train {
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    #[arg(long, default_value = "ours")]
    pub variant: String,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct Eval {
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub checkpoint: Option<PathBuf>,
    /// Evaluate the scripted operator instead of a checkpoint.
    #[arg(long)]
    pub oracle: bool,
    /// Comma-separated rollout seeds.
    #[arg(long)]
    pub seeds: Option<String>,
    #[arg(long)]
    pub profile: Option<String>,
    /// Also write per-rollout traces.
    #[arg(long)]
    pub traces: bool,
}

#[derive(Args, Debug)]
pub struct Ablate {
    /// Dataset directory; generated on the fly when omitted.
    #[arg(long, value_name = "DIR")]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seeds: Option<String>,
}

#[derive(Args, Debug)]
pub struct Probe {
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,
    #[arg(long, default_value = "1,2,3,4,5,6,7,8")]
    pub seeds: String,
    #[arg(long, default_value_t = 10.0)]
    pub seconds: f64,
    /// Scale on the sampling noise; 0 makes rollouts deterministic.
    #[arg(long, default_value_t = 1.0)]
    pub noise_scale: f64,
}

#[derive(Args, Debug)]
pub struct Serve {
    /// Checkpoint for the starting mood; other moods come from `checkpoint.<mood>` keys.
    #[arg(long, value_name = "FILE")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub port: Option<u16>,
    #[arg(long)]
    pub profile: Option<String>,
    #[arg(long)]
    pub mood: Option<String>,
}

#[derive(Args, Debug)]
pub struct Export {
    #[arg(long, value_name = "FILE")]
    pub input: PathBuf,
    /// Defaults to the input path with a `.json` extension.
    #[arg(long, value_name = "FILE")]
    pub output: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let level = if cli.verbose { log::LevelFilter::Debug } else { log::LevelFilter::Info };
    env_logger::Builder::new().filter_level(level).parse_default_env().init();
    match run::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let reason = e.to_string().replace(['\n', '\r'], " ");
            eprintln!("teleop: error kind={} code={} reason={}", e.kind(), e.exit_code(), reason);
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
