use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use scott_lab::{run, CliError, Command, ExperimentConfig};

/// Stochastic consistency distillation experiments on toy mixtures.
#[derive(Parser, Debug)]
#[command(name = "scott-lab", version)]
struct Args {
    /// train-teacher, distill, sample, eval, solver-bench or order-check
    command: String,
    /// Config file (`key = value` lines); every key has a default.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set distill.eta=0`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides `output.dir`).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let args = Args::parse();
    let result = Command::parse(&args.command)
        .ok_or_else(|| CliError::Config(format!("unknown command `{}`", args.command)))
        .and_then(|cmd| {
            let cfg = ExperimentConfig::load(args.config.as_deref(), &args.set, args.seed, args.out.as_deref())?;
            run(cmd, &cfg)
        });
    match result {
        Ok(outcome) => {
            for p in outcome.written {
                println!("{}", p.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", e.record(&args.command));
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
