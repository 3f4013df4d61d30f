//! The `epimatch` command-line tool as a library, so that workflows can be
//! driven in-process by tests.
//!
//! Every command writes its outputs below `--out` together with a
//! `manifest.json` recording the resolved configuration, seed and the SHA-256
//! of every output. `epimatch rerun --manifest <m> --out <dir>` repeats a run
//! from its manifest alone.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;
pub mod scenes;

pub use error::{CliError, CliResult};

use commands::{ablate, eval, matching, robustness, synth, train};
use manifest::{OutDir, RunManifest};

/// Environment variable holding the worker thread count (`0` or unset: one per core).
pub const THREADS_ENV: &str = "EPIMATCH_THREADS";

#[derive(Debug, Parser)]
#[command(name = "epimatch", version, about = "Self-supervised descriptor adaptation and epipolar evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesize warped views with ground-truth correspondences and poses.
    Synth(synth::SynthArgs),
    /// Train the adaptation block on scene directories.
    Train(train::TrainArgs),
    /// Match an image pair, or every view of synthesized scenes.
    Match(matching::MatchArgs),
    /// Evaluate matches against ground-truth geometry.
    Eval(eval::EvalArgs),
    /// Component and pose-strategy ablation on the procedural benchmark.
    Ablate(ablate::AblateArgs),
    /// Match and inlier counts on cross-scene versus overlapping pairs.
    Robustness(robustness::RobustnessArgs),
    /// Repeat a previous run from its manifest.
    Rerun(RerunArgs),
}

/// Flags shared by every command.
#[derive(Debug, Clone, Args)]
pub struct Common {
    /// JSON configuration document; unspecified fields take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the configuration's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory, created if missing.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RerunArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

/// Parses `args` (program name first), runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let argv: Vec<String> = args.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect();
    match with_thread_pool(|| execute(cli.command, argv, None)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn with_thread_pool<T>(f: impl FnOnce() -> CliResult<T> + Send) -> CliResult<T>
where
    T: Send,
{
    let threads = match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .map_err(|_| CliError::Usage(format!("{THREADS_ENV} must be a non-negative integer, got {v:?}")))?,
        Err(_) => 0,
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::Failure(format!("cannot start thread pool: {e}")))?;
    pool.install(f)
}

fn execute(command: Command, argv: Vec<String>, config_override: Option<serde_json::Value>) -> CliResult<()> {
    let (name, common) = match &command {
        Command::Synth(a) => ("synth", &a.common),
        Command::Train(a) => ("train", &a.common),
        Command::Match(a) => ("match", &a.common),
        Command::Eval(a) => ("eval", &a.common),
        Command::Ablate(a) => ("ablate", &a.common),
        Command::Robustness(a) => ("robustness", &a.common),
        Command::Rerun(a) => return rerun(a),
    };
    let mut out = OutDir::create(&common.out)?;
    let mut manifest = RunManifest::start(name, strip_out(&argv));
    let ctx = config::Context {
        common: common.clone(),
        config_override,
    };
    let result = match &command {
        Command::Synth(a) => synth::run(a, &ctx, &mut out, &mut manifest),
        Command::Train(a) => train::run(a, &ctx, &mut out, &mut manifest),
        Command::Match(a) => matching::run(a, &ctx, &mut out, &mut manifest),
        Command::Eval(a) => eval::run(a, &ctx, &mut out, &mut manifest),
        Command::Ablate(a) => ablate::run(a, &ctx, &mut out, &mut manifest),
        Command::Robustness(a) => robustness::run(a, &ctx, &mut out, &mut manifest),
        Command::Rerun(_) => unreachable!("handled above"),
    };
    manifest.finish(&out, result.as_ref().err().map(|e| e.to_string()));
    out.write_manifest(&manifest)?;
    result
}

/// Drops `--out <dir>` (or `--out=<dir>`) so a manifest can be replayed elsewhere.
fn strip_out(argv: &[String]) -> Vec<String> {
    let mut kept = Vec::with_capacity(argv.len());
    let mut it = argv.iter();
    while let Some(a) = it.next() {
        if a == "--out" {
            it.next();
        } else if !a.starts_with("--out=") {
            kept.push(a.clone());
        }
    }
    kept
}

fn rerun(args: &RerunArgs) -> CliResult<()> {
    let m: RunManifest = config::read_json(&args.manifest)?;
    let mut argv = m.argv.clone();
    argv.extend(["--out".to_string(), args.out.to_string_lossy().into_owned()]);
    let full = std::iter::once("epimatch".to_string()).chain(argv.iter().cloned());
    let cli = Cli::try_parse_from(full)
        .map_err(|e| CliError::Usage(format!("{}: stored arguments do not parse: {e}", args.manifest.display())))?;
    if matches!(cli.command, Command::Rerun(_)) {
        return Err(CliError::Usage("a manifest cannot replay another rerun".into()));
    }
    execute(cli.command, argv, Some(m.config))
}
