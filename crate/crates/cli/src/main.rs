//! `emwatch`: config-driven experiment runner.
//!
//! Every subcommand reads one experiment config, validates it against the
//! published schema, takes the experiment directory's lock and writes its
//! outputs below `<root>/<config name>/`. Failures print a JSON error object
//! on stderr and exit with status 1.

mod commands;
mod context;
mod stagefile;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::context::{Context, Failure};

#[derive(Parser, Debug)]
#[command(name = "emwatch", version, about = "EM side-channel workflow-integrity pipeline")]
struct Cli {
    /// Experiment configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Root under which each experiment gets a directory named after it.
    #[arg(long, global = true, env = "EMWATCH_ROOT", default_value = ".")]
    root: PathBuf,

    /// Overrides the corpus, forest, evaluation and survey seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Overrides one config key, e.g. `--set forest.n_trees=100`. The value
    /// is parsed as JSON and falls back to a string.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render the synthetic corpus into `corpus/`.
    Simulate,
    /// Sweep candidate carriers and rank them into `survey/`.
    Survey,
    /// Extract window features from `corpus/` into `features/`.
    Extract,
    /// Plan folds and train one model per fold and task into `models/`.
    Train,
    /// Predict every fold's held-out records into `evaluate/`.
    Evaluate,
    /// Compare an observed skill sequence with a policy.
    Verify {
        /// Policy JSON: `{"alphabet": [...], "intended": [...]}`.
        #[arg(long)]
        policy: PathBuf,
        /// Observed skills, comma separated.
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        observed: Vec<String>,
    },
    /// Aggregate fold outputs into metrics reports under `report/`.
    Report,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Survey => "survey",
            Command::Extract => "extract",
            Command::Train => "train",
            Command::Evaluate => "evaluate",
            Command::Verify { .. } => "verify",
            Command::Report => "report",
        }
    }
}

fn run(cli: Cli) -> Result<serde_json::Value, Failure> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::new("invalid_argument", format!("--threads: {e}")))?;
    }
    let config = cli
        .config
        .as_deref()
        .ok_or_else(|| Failure::new("missing_input", "--config is required"))?;
    let ctx = Context::open(config, &cli.root, cli.seed, &cli.overrides, cli.threads)?;
    let name = cli.command.name();
    let result = match &cli.command {
        Command::Simulate => commands::simulate(&ctx),
        Command::Survey => commands::survey(&ctx),
        Command::Extract => commands::extract(&ctx),
        Command::Train => commands::train(&ctx),
        Command::Evaluate => commands::evaluate(&ctx),
        Command::Verify { policy, observed } => commands::verify(&ctx, policy, observed),
        Command::Report => commands::report(&ctx),
    };
    ctx.log_run(name, &result)?;
    result
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(summary) => {
            println!("{}", serde_json::to_string_pretty(&summary).expect("summary serializes"));
            ExitCode::SUCCESS
        }
        Err(f) => {
            eprintln!("{}", f.to_json());
            ExitCode::FAILURE
        }
    }
}
