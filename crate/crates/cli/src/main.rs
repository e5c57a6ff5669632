use clap::{Parser, Subcommand};
use qattn_cli::{config::OutputFormat, exit_code, runner, AppError, RunConfig};
use qattn_core::GenSpec;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "qattn", about = "Quantized attention accuracy harness", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Evaluate named variants from a JSON config against the exact
    /// oracle and write an accuracy report.
    Run {
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// json | csv | md
        #[arg(long)]
        format: Option<String>,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Sweep one configuration axis (granularity | pv_format |
    /// smoothing | accumulation) from the config's first variant.
    Ablate {
        #[arg(long)]
        axis: String,
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        format: Option<String>,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Generate Q/K/V tensor files from a generation spec.
    Gen { spec: PathBuf, dir: PathBuf },
}

fn load_run_config(
    path: &Path,
    format: Option<String>,
    trials: Option<usize>,
    seed: Option<u64>,
) -> Result<RunConfig, AppError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| AppError::Config(format!("reading {}: {e}", path.display())))?;
    let mut cfg: RunConfig = serde_json::from_str(&text)
        .map_err(|e| AppError::Config(format!("parsing {}: {e}", path.display())))?;
    if let Some(f) = format {
        cfg.format = f.parse::<OutputFormat>().map_err(AppError::Config)?;
    }
    if let Some(t) = trials {
        cfg.trials = t;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn emit(report: &qattn_cli::Report, cfg: &RunConfig, out: Option<PathBuf>) -> Result<(), AppError> {
    let rendered = report.render(cfg.format);
    match out {
        Some(path) => std::fs::write(&path, rendered)
            .map_err(|e| AppError::Runtime(format!("writing {}: {e}", path.display()))),
        None => {
            print!("{rendered}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<(), AppError> {
    match cli.command {
        Command::Run { config, out, format, trials, seed } => {
            let cfg = load_run_config(&config, format, trials, seed)?;
            let report = runner::execute_run(&cfg)?;
            emit(&report, &cfg, out)
        }
        Command::Ablate { axis, config, out, format, trials, seed } => {
            let cfg = load_run_config(&config, format, trials, seed)?;
            let report = runner::execute_ablate(&cfg, &axis)?;
            emit(&report, &cfg, out)
        }
        Command::Gen { spec, dir } => {
            let text = std::fs::read_to_string(&spec)
                .map_err(|e| AppError::Config(format!("reading {}: {e}", spec.display())))?;
            let spec: GenSpec = serde_json::from_str(&text)
                .map_err(|e| AppError::Config(format!("parsing generation spec: {e}")))?;
            runner::execute_gen(&spec, &dir)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("{err}");
            ExitCode::from(exit_code(&err) as u8)
        }
    }
}
