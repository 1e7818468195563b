use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;

/// Overrides the directory that relative output paths resolve against.
pub const OUTPUT_ROOT_ENV: &str = "CONTRAVIRT_OUTPUT_ROOT";

#[derive(Parser, Debug)]
#[command(name = "contravirt", version, about = "Wind nowcasting at unobserved locations with virtual-node graphs")]
pub struct Cli {
    /// TOML run configuration. Defaults apply to every missing key.
    #[arg(short, long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory; wins over the config file.
    #[arg(short, long, global = true)]
    pub output: Option<PathBuf>,
    /// Station CSV; replaces the data source of the config file.
    #[arg(long, global = true)]
    pub data: Option<PathBuf>,
    /// Use the built-in synthetic acceptance dataset as data source.
    #[arg(long, global = true, conflicts_with = "data")]
    pub synthetic: bool,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic station dataset.
    Synth,
    /// Build the node set, the propagation operator and influence statistics.
    BuildGraph,
    /// Train one learned configuration.
    Train(TrainArgs),
    /// Score a checkpoint or baselines at the withheld stations.
    Evaluate(EvaluateArgs),
    /// Score baselines; same as `evaluate --baseline`.
    Baseline {
        /// ar, lr, knn or idw; all four when omitted.
        names: Vec<String>,
    },
    /// Merge all evaluations of a run directory into comparison tables.
    Report {
        /// Run directory; defaults to the configured output directory.
        dir: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// augmented, multistep or none.
    #[arg(long)]
    pub strategy: Option<String>,
    #[arg(long)]
    pub no_moco: bool,
    #[arg(long)]
    pub no_diffusion: bool,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long, conflicts_with = "baseline")]
    pub checkpoint: Option<PathBuf>,
    /// Repeatable: ar, lr, knn, idw.
    #[arg(long)]
    pub baseline: Vec<String>,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    use contravirt::Error as E;
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::Config(_) => 1,
                E::Numerical(_) | E::Domain(_) => 3,
                _ => 2,
            };
        }
        if cause.downcast_ref::<commands::UsageError>().is_some() || cause.downcast_ref::<toml::de::Error>().is_some() {
            return 1;
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 2;
        }
    }
    2
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
