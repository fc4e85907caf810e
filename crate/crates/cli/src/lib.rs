//! Command-line orchestration for the backchain laboratory: layered
//! configuration, run manifests, report export and SVG figures.
//!
//! Exit statuses: 0 on success, 1 when an operation fails, 2 for usage
//! errors (unknown command or flag, bad flag value, malformed config).

pub mod commands;
pub mod config;
pub mod export;
pub mod manifest;
pub mod svg;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

use commands::*;
use config::ConfigFile;

/// An error in how the program was invoked rather than in the work itself.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "backchain", version, about = "Train and dissect a transformer that finds paths in trees")]
pub struct Cli {
    /// TOML file with one [section] per subcommand; flags override it.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a JSONL dataset of tree-pathfinding instances.
    Generate(GenerateArgs),
    /// Train a model and evaluate it on held-out trees.
    Train(TrainArgs),
    /// Exact-match accuracy of a checkpoint.
    Eval(EvalArgs),
    /// Linear probes on residual streams.
    Probe(ProbeArgs),
    /// Activation patching at register positions, per goal depth.
    Patch(PatchArgs),
    /// Causal scrubbing of the backward-chaining hypothesis.
    Scrub(ScrubArgs),
    /// Attention knockout from the final position to register tokens.
    Knockout(KnockoutArgs),
    /// QK circuit matrices M0, M1 and R_P.
    Circuits(CircuitsArgs),
    /// Skip lenses on intermediate streams.
    Lens(LensArgs),
    /// Register-token subgoal statistics.
    Stats(StatsArgs),
    /// Render an SVG figure.
    Viz(VizArgs),
}

/// `BACKCHAIN_THREADS`: upper bound on worker threads (default 1). The
/// library computes on the calling thread, so the cap always holds.
pub fn threads_from_env() -> Result<usize, UsageError> {
    match std::env::var("BACKCHAIN_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(UsageError(format!("BACKCHAIN_THREADS must be a positive integer, got {v:?}"))),
        },
    }
}

fn dispatch(cli: Cli) -> anyhow::Result<()> {
    let ctx = Ctx { threads: threads_from_env()? };
    let file = match &cli.config {
        Some(p) => ConfigFile::load(p)?,
        None => ConfigFile::default(),
    };
    match cli.command {
        Command::Generate(a) => generate(a.resolve(file.section("generate")?), &ctx),
        Command::Train(a) => train_cmd(a.resolve(file.section("train")?), &ctx),
        Command::Eval(a) => eval(a.resolve(file.section("eval")?), &ctx),
        Command::Probe(a) => probe(a.resolve(file.section("probe")?), &ctx),
        Command::Patch(a) => patch(a.resolve(file.section("patch")?), &ctx),
        Command::Scrub(a) => scrub(a.resolve(file.section("scrub")?), &ctx),
        Command::Knockout(a) => knockout(a.resolve(file.section("knockout")?), &ctx),
        Command::Circuits(a) => circuits(a.resolve(file.section("circuits")?), &ctx),
        Command::Lens(a) => lens(a.resolve(file.section("lens")?), &ctx),
        Command::Stats(a) => stats(a.resolve(file.section("stats")?), &ctx),
        Command::Viz(a) => viz(a.resolve(file.section("viz")?), &ctx),
    }
}

/// Parses `argv`, runs the command and returns the process exit status.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match dispatch(cli) {
        Ok(()) => EXIT_OK,
        Err(e) if e.downcast_ref::<UsageError>().is_some() => {
            eprintln!("error: {e}");
            EXIT_USAGE
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            EXIT_FAILURE
        }
    }
}
