//! `mrfnln` command-line driver.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mrfnln::config::RunConfig;
use mrfnln::net::Preset;

#[derive(Parser, Debug)]
#[command(name = "mrfnln", version, about = "Single-image dehazing: data synthesis, training, evaluation and cost accounting")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// TOML run configuration; missing keys take defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Replaces the [network] section with a preset.
    #[arg(long, global = true, value_parser = parse_preset)]
    preset: Option<Preset>,
    /// Worker threads; 1 selects the sequential reference path.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory for images, checkpoints and records.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Print the effective configuration as TOML and exit.
    #[arg(long, global = true)]
    emit_config: bool,
}

fn parse_preset(s: &str) -> Result<Preset, String> {
    Preset::parse(s).map_err(|e| e.to_string())
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Synthesize hazy images and a manifest from a directory of clean images.
    Synth(commands::SynthArgs),
    /// Train the hazy/clean proxy classifier that defines the contrastive feature space.
    TrainProxy(commands::ManifestArgs),
    /// Train the dehazing network.
    Train(commands::TrainArgs),
    /// Score a checkpoint on a manifest.
    Eval(commands::EvalArgs),
    /// Sweep block kind, attention and loss, training and scoring every cell.
    Ablate(commands::AblateArgs),
    /// Parameter, MAC and peak-activation report.
    Count(commands::CountArgs),
    /// Wall-clock forward timing plus the cost report.
    Bench(commands::BenchArgs),
}

/// Failure classes mapped to exit codes.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl From<mrfnln::Error> for CliError {
    fn from(e: mrfnln::Error) -> Self {
        use mrfnln::Error as E;
        match e {
            E::Config(_) | E::ParameterMismatch { .. } => CliError::Usage(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

/// The effective configuration: file, then `--preset`, then `--seed`.
pub fn effective_config(common: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = match &common.config {
        Some(p) if !p.is_file() => return Err(CliError::Usage(format!("config file {} not found", p.display()))),
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(p) = common.preset {
        cfg = cfg.with_preset(p);
    }
    if let Some(s) = common.seed {
        cfg = cfg.with_seed(s);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn configure_threads(threads: Option<usize>) -> Result<usize, CliError> {
    match threads {
        Some(0) => Err(CliError::Usage("--threads must be at least 1".into())),
        Some(1) => {
            mrfnln::exec::set_sequential(true);
            Ok(1)
        }
        Some(n) => {
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .map_err(|e| CliError::Runtime(e.to_string()))?;
            Ok(n)
        }
        None => Ok(rayon::current_num_threads()),
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = effective_config(&cli.common)?;
    if cli.common.emit_config {
        print!("{}", cfg.to_toml());
        return Ok(());
    }
    let threads = configure_threads(cli.common.threads)?;
    let ctx = commands::Context {
        cfg,
        out: cli.common.out.clone(),
        threads,
    };
    match cli.command {
        Command::Synth(a) => commands::synth(&ctx, &a),
        Command::TrainProxy(a) => commands::train_proxy(&ctx, &a),
        Command::Train(a) => commands::train(&ctx, &a),
        Command::Eval(a) => commands::eval(&ctx, &a),
        Command::Ablate(a) => commands::ablate(&ctx, &a),
        Command::Count(a) => commands::count(&ctx, &a),
        Command::Bench(a) => commands::bench(&ctx, &a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
