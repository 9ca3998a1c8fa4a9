//! Argument parsing, config resolution and dispatch.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::commands::{estimate, eval, gen_data, mmd_fit, pipeline, vote};
use crate::error::{CliError, Result};
use crate::formats::{read_json, write_json};

#[derive(Debug, Parser)]
#[command(name = "posevote", version, about = "Keypoint radial voting pose estimation toolkit")]
pub struct Cli {
    /// Seed for every random choice of the run.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads; defaults to one per core.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// JSON object whose keys override the command-line values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a labeled synthetic dataset.
    GenData(gen_data::GenDataArgs),
    /// Vote keypoints from radial maps and a depth map.
    Vote(vote::VoteArgs),
    /// Group keypoints into instances and solve their poses.
    Estimate(estimate::EstimateArgs),
    /// Score estimated poses against ground truth.
    Eval(eval::EvalArgs),
    /// Measure and fit the kernel discrepancy between two feature sets.
    MmdFit(mmd_fit::MmdFitArgs),
    /// Run the self-supervision pipeline on generated scenes.
    Pipeline(pipeline::PipelineArgs),
}

/// A subcommand's arguments once flags and config file are merged.
pub trait RunCommand: Serialize + DeserializeOwned + Send + Sync {
    const NAME: &'static str;
    fn out(&self) -> &Path;
    fn run(&self, seed: u64) -> Result<()>;
}

/// What a run did, written as `config.json` next to its outputs. The output
/// directory itself is left out so runs into different places compare equal.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig<A> {
    pub command: String,
    pub seed: u64,
    pub threads: Option<usize>,
    #[serde(flatten)]
    pub args: A,
}

fn resolve<A: RunCommand>(
    cli_seed: u64,
    threads: Option<usize>,
    args: A,
    config: Option<&Path>,
) -> Result<RunConfig<A>> {
    let base = RunConfig {
        command: A::NAME.to_string(),
        seed: cli_seed,
        threads,
        args,
    };
    let Some(path) = config else {
        return Ok(base);
    };
    let overrides: Value = read_json(path)?;
    let Value::Object(overrides) = overrides else {
        return Err(CliError::Usage(format!(
            "{}: config must be a JSON object",
            path.display()
        )));
    };
    let mut merged = serde_json::to_value(&base).expect("arguments serialize");
    let fields = merged.as_object_mut().expect("run config is an object");
    for (key, value) in overrides {
        if key == "command" {
            continue;
        }
        if !fields.contains_key(&key) {
            return Err(CliError::Usage(format!(
                "{}: unknown key {key:?} for {}",
                path.display(),
                A::NAME
            )));
        }
        fields.insert(key, value);
    }
    serde_json::from_value(merged).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn execute<A: RunCommand>(cli_seed: u64, threads: Option<usize>, config: Option<&Path>, args: A) -> Result<()> {
    let resolved = resolve(cli_seed, threads, args, config)?;
    let mut written = serde_json::to_value(&resolved).expect("run config serializes");
    if let Some(map) = written.as_object_mut() {
        map.remove("out");
    }
    let work = || -> Result<()> {
        resolved.args.run(resolved.seed)?;
        write_json(&resolved.args.out().join("config.json"), &written)
    };
    match resolved.threads {
        Some(n) => {
            if n == 0 {
                return Err(CliError::Usage("--threads must be positive".into()));
            }
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| CliError::Usage(e.to_string()))?;
            pool.install(work)
        }
        None => work(),
    }
}

pub fn dispatch(cli: Cli) -> Result<()> {
    let (seed, threads, config) = (cli.seed, cli.threads, cli.config.as_deref());
    match cli.command {
        Command::GenData(a) => execute(seed, threads, config, a),
        Command::Vote(a) => execute(seed, threads, config, a),
        Command::Estimate(a) => execute(seed, threads, config, a),
        Command::Eval(a) => execute(seed, threads, config, a),
        Command::MmdFit(a) => execute(seed, threads, config, a),
        Command::Pipeline(a) => execute(seed, threads, config, a),
    }
}

#[derive(Serialize)]
struct ErrorReport<'a> {
    error: &'a str,
    message: String,
    exit_code: u8,
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code: 0 success, 2 usage, 3 unreadable or malformed input,
/// 4 invariant violation. Failures are reported on stderr as one JSON line.
pub fn run<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            let kind = match &e {
                CliError::Usage(_) => "usage",
                CliError::Io { .. } => "io",
                CliError::Format { .. } => "format",
                CliError::Invariant(_) => "invariant",
            };
            let report = ErrorReport {
                error: kind,
                message: e.to_string(),
                exit_code: e.exit_code(),
            };
            eprintln!("{}", serde_json::to_string(&report).expect("report serializes"));
            e.exit_code()
        }
    }
}
