use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod compare;
mod config;
mod error;
mod run;

use config::RunConfig;
use error::CliError;

#[derive(Parser)]
#[command(name = "dynport", version, about = "Dynamic portfolio optimization with transaction costs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the model described by a JSON config and write its artifacts.
    Solve {
        config: PathBuf,
        /// Output directory; overrides the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker threads; defaults to the config, then to all cores.
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Compare the artifacts of two runs.
    Compare {
        a: PathBuf,
        b: PathBuf,
        #[arg(long, default_value_t = dynport::analysis::DEFAULT_PROBES)]
        probes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn solve(config: PathBuf, out: Option<PathBuf>, workers: Option<usize>, seed: Option<u64>) -> Result<(), (CliError, Option<PathBuf>)> {
    let loaded = RunConfig::load(&config).map_err(|e| (e, out.clone()))?;
    let dir = out.or_else(|| loaded.output.clone()).unwrap_or_else(|| PathBuf::from("out"));
    let fail = |e: CliError| (e, Some(dir.clone()));
    let mut cfg = loaded.resolve().map_err(fail)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if workers.is_some() {
        cfg.workers = workers;
    }
    cfg.model().map_err(fail)?;
    let n = cfg.workers.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build()
        .map_err(|e| fail(CliError::Io(e.to_string())))?;
    pool.install(|| run::run(&cfg, &dir, n)).map_err(fail)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Solve { config, out, workers, seed } => solve(config, out, workers, seed),
        Command::Compare { a, b, probes, seed } => compare::compare(&a, &b, probes, seed)
            .and_then(|c| Ok(println!("{}", serde_json::to_string_pretty(&c)?)))
            .map_err(|e| (e, None)),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err((e, dir)) => {
            if let Some(dir) = dir {
                e.write_to(&dir);
            }
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
