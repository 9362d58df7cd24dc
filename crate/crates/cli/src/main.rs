use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fedsim::{cmd_compare, cmd_run, CompareArgs, RunArgs};

#[derive(Parser)]
#[command(name = "fedsim", version, about = "Federated learning node-selection experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment file (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Overwrite an existing output directory.
    #[arg(long)]
    force: bool,
    /// Worker threads (default: FEDSIM_THREADS, then all cores).
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment.
    Run {
        #[command(flatten)]
        common: Common,
        /// Override the seed of the config file.
        #[arg(long)]
        seed: Option<u64>,
        /// fedavg, optagg, fedpns or bn2.
        #[arg(long)]
        policy: Option<String>,
    },
    /// Run several policies on paired seeds.
    Compare {
        #[command(flatten)]
        common: Common,
        /// Comma-separated seeds (default: the config's seed).
        #[arg(long, value_delimiter = ',')]
        seed: Vec<u64>,
        /// Comma-separated policies, at least two.
        #[arg(long, value_delimiter = ',', required = true)]
        policy: Vec<String>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { common, seed, policy } => cmd_run(&RunArgs {
            config: common.config,
            out: common.out,
            seed,
            policy,
            force: common.force,
            threads: common.threads,
        }),
        Command::Compare { common, seed, policy } => cmd_compare(&CompareArgs {
            config: common.config,
            out: common.out,
            policies: policy,
            seeds: seed,
            force: common.force,
            threads: common.threads,
        }),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("fedsim: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
