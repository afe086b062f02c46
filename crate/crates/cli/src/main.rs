use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use turnlnl::Error;
use turnlnl_cli::commands::{cmd_gen, cmd_report, cmd_run, Overrides};
use turnlnl_cli::config::ExperimentConfig;
use turnlnl_cli::{exit_code, EXIT_CONFIG, EXIT_OK};

#[derive(Parser, Debug)]
#[command(name = "turnlnl", version, about = "Noisy-label experiments: data generation, runs and reports")]
struct Cli {
    /// Experiment config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (gen, run) or output CSV file (report; stdout when omitted).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides `[run] seed` and `TURNLNL_SEED`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Single worker and fixed run order.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write dataset bundles and, with a [noise] section, the noisy train split.
    Gen,
    /// Run every point of the config's sweep.
    Run,
    /// Merge summary.csv files into a method x noise table.
    Report {
        /// Directories holding summary.csv, or the files themselves.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
}

fn env_parse<T: std::str::FromStr>(name: &str) -> Result<Option<T>, Error> {
    match std::env::var(name) {
        Ok(v) if !v.trim().is_empty() => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::Config(format!("environment variable {name}: cannot parse `{v}`"))),
        _ => Ok(None),
    }
}

fn overrides(cli: &Cli) -> Result<Overrides, Error> {
    let env_seed = env_parse::<u64>("TURNLNL_SEED")?;
    Ok(Overrides {
        seed: cli.seed.or(env_seed),
        deterministic: cli.deterministic,
        threads: env_parse::<usize>("TURNLNL_THREADS")?,
    })
}

fn load(cli: &Cli, ov: &Overrides) -> Result<ExperimentConfig, Error> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::Config("--config is required".into()))?;
    let mut cfg = ExperimentConfig::load(path)?;
    ov.apply(&mut cfg);
    Ok(cfg)
}

fn out_dir(cli: &Cli) -> Result<PathBuf, Error> {
    cli.out
        .clone()
        .ok_or_else(|| Error::Config("--out is required".into()))
}

fn dispatch(cli: &Cli) -> Result<(), Error> {
    let ov = overrides(cli)?;
    match &cli.command {
        Command::Gen => cmd_gen(&load(cli, &ov)?, &out_dir(cli)?),
        Command::Run => cmd_run(&load(cli, &ov)?, &out_dir(cli)?, ov.threads),
        Command::Report { inputs } => {
            let table = cmd_report(inputs)?;
            match &cli.out {
                Some(path) => std::fs::write(path, table).map_err(|e| Error::DataAt {
                    path: path.clone(),
                    msg: e.to_string(),
                }),
                None => {
                    print!("{table}");
                    Ok(())
                }
            }
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::from(EXIT_OK);
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    match dispatch(&cli) {
        Ok(()) => ExitCode::from(EXIT_OK),
        Err(e) => {
            eprintln!("turnlnl: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
