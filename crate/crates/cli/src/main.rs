//! `comuros`: headless runs, benchmarks, validation and the live gateway.
//!
//! Exit codes: 0 success, 1 run or benchmark fell short, 2 invalid input.

mod bench;
mod run;
mod serve;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use comuros_core::planner::BackendConfig;

#[derive(Debug, Parser)]
#[command(name = "comuros", version, about = "Hierarchical multi-robot task manager simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run a scenario headless and write logs.
    Run(run::RunArgs),
    /// Score a planner backend on a dataset.
    Bench(bench::BenchArgs),
    /// Serve a live run over HTTP and websocket.
    Serve(serve::ServeArgs),
    /// Check a scenario file or dataset directory.
    Validate(run::ValidateArgs),
}

/// `--backend`: `rule` or a path to a TOML/JSON backend config.
#[derive(Debug, Clone, Args)]
pub struct BackendArg {
    #[arg(long, default_value = "rule")]
    pub backend: String,
}

impl BackendArg {
    pub fn load(&self) -> Result<BackendConfig, String> {
        if self.backend.eq_ignore_ascii_case("rule") {
            return Ok(BackendConfig::default());
        }
        BackendConfig::load(Path::new(&self.backend)).map_err(|e| e.to_string())
    }
}

pub const EXIT_SHORT: u8 = 1;
pub const EXIT_INVALID: u8 = 2;

pub fn invalid(msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {msg}");
    ExitCode::from(EXIT_INVALID)
}

pub fn default_out(name: &str) -> PathBuf {
    PathBuf::from("runs").join(name)
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()))
        .with_writer(std::io::stderr)
        .init();
    match Cli::parse().command {
        Command::Run(a) => run::run(a),
        Command::Bench(a) => bench::bench(a),
        Command::Serve(a) => serve::serve(a),
        Command::Validate(a) => run::validate(a),
    }
}
