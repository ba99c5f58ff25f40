mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use gigadetect::par::Exec;

#[derive(Parser, Debug)]
#[command(name = "gigadetect", version, about = "Tiled multi-scale object detection over large overhead images")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct GlobalArgs {
    /// Worker threads (default: available parallelism; 1 runs serially).
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// RNG seed; falls back to $GIGADETECT_SEED, then 0.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Log progress to stderr (-vv for more).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Cut an image into overlapping named chips.
    Tile(commands::TileArgs),
    /// Run the multi-scale detector ensemble over an image.
    Detect(config::DetectArgs),
    /// Merge detection files with global NMS.
    Stitch(commands::StitchArgs),
    /// Score predictions against truth.
    Eval(commands::EvalArgs),
    /// Blur and resample an image to coarser GSDs.
    Degrade(commands::DegradeArgs),
    /// Rotate and HSV-jitter a labelled image.
    Augment(commands::AugmentArgs),
    /// Convert point or footprint labels to box label files.
    PrepLabels(commands::PrepLabelsArgs),
    /// Fit a two-segment line to a resolution curve.
    FitCurve(commands::FitCurveArgs),
    /// Generate a synthetic scene with planted objects.
    Synth(commands::SynthArgs),
    /// Print the network layer table, optionally running a forward pass.
    Netinfo(commands::NetinfoArgs),
    /// Measure tile + detect + stitch throughput.
    Bench(commands::BenchArgs),
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(gigadetect::Error),
}

impl From<gigadetect::Error> for CliError {
    fn from(e: gigadetect::Error) -> Self {
        CliError::Runtime(e)
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

pub fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

/// Execution context shared by all commands.
pub struct Ctx {
    pub seed: u64,
    pub exec: Exec,
    pub workers: usize,
}

fn env_seed() -> CliResult<Option<u64>> {
    match std::env::var("GIGADETECT_SEED") {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| usage(format!("GIGADETECT_SEED=`{v}` is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

fn run(cli: Cli) -> CliResult<()> {
    let workers = match cli.global.workers {
        Some(0) => return Err(usage("--workers must be >= 1")),
        Some(n) => n,
        None => gigadetect::par::workers(),
    };
    let exec = if workers == 1 { Exec::Sequential } else { Exec::Parallel };
    let flag_seed = cli.global.seed;
    let env_seed = env_seed()?;
    let dispatch = move || -> CliResult<()> {
        let ctx = Ctx {
            seed: flag_seed.or(env_seed).unwrap_or(0),
            exec,
            workers,
        };
        match cli.command {
            Command::Tile(a) => commands::tile(a, &ctx),
            Command::Detect(a) => config::detect(a, flag_seed, env_seed, exec, workers),
            Command::Stitch(a) => commands::stitch(a, &ctx),
            Command::Eval(a) => commands::eval(a, &ctx),
            Command::Degrade(a) => commands::degrade(a, &ctx),
            Command::Augment(a) => commands::augment(a, &ctx),
            Command::PrepLabels(a) => commands::prep_labels(a, &ctx),
            Command::FitCurve(a) => commands::fit_curve(a, &ctx),
            Command::Synth(a) => commands::synth(a, &ctx),
            Command::Netinfo(a) => commands::netinfo(a, &ctx),
            Command::Bench(a) => commands::bench(a, &ctx),
        }
    };
    with_workers(workers, dispatch)
}

#[cfg(feature = "parallel")]
fn with_workers<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> T {
    match rayon::ThreadPoolBuilder::new().num_threads(workers).build() {
        Ok(pool) => pool.install(f),
        Err(e) => {
            log::warn!("could not build a {workers}-thread pool ({e}); using the global pool");
            f()
        }
    }
}

#[cfg(not(feature = "parallel"))]
fn with_workers<T: Send>(_workers: usize, f: impl FnOnce() -> T + Send) -> T {
    f()
}

fn report(code: &str, message: &str) {
    eprintln!("{}", json!({ "error": { "code": code, "message": message } }));
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help / --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            report("usage", e.render().to_string().trim());
            return ExitCode::from(2);
        }
    };
    let level = match cli.global.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp_millis()
        .init();

    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(m)) => {
            report("usage", &m);
            ExitCode::from(2)
        }
        Err(CliError::Runtime(e)) => {
            report(e.code(), &e.to_string());
            ExitCode::from(1)
        }
    }
}

pub fn out_dir(path: &PathBuf) -> CliResult<()> {
    std::fs::create_dir_all(path)
        .map_err(|e| CliError::Runtime(gigadetect::Error::Io { path: path.clone(), source: e }))
}
