// SPDX-License-Identifier: MIT OR Apache-2.0

//! Command-line front end.
//!
//! Subcommands: `dataset validate`, `dataset generate`, `trace`, `contrib`,
//! and `knockout`. Settings resolve in three layers — built-in defaults,
//! then an optional `--config` file, then flags — and every run that writes
//! results also writes a `manifest.json` accounting for each input prompt.
//!
//! Exit codes: 0 success, 1 validation or data failure, 2 configuration
//! error (bad flags, bad config file, missing required inputs).

mod commands;
mod config;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::error::Result;

pub use config::{ExperimentConfig, ScenarioChoice, BUILTIN_COPY_TASK};

/// Flags shared by all subcommands; every one mirrors a config-file key and
/// overrides it.
#[derive(Debug, Default, Args)]
struct SharedFlags {
    /// Model directory/manifest path, or `builtin:copy-task`.
    #[arg(long)]
    model: Option<String>,
    /// Vocabulary file (optional with the built-in model).
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Fact records (JSON array).
    #[arg(long)]
    facts: Option<PathBuf>,
    /// Context records (JSON array); output path for `dataset generate`.
    #[arg(long)]
    contexts: Option<PathBuf>,
    /// Scenario sweep: vanilla | rag | both.
    #[arg(long)]
    scenario: Option<String>,
    /// Sample this many prompts (seeded, without replacement).
    #[arg(long)]
    sample: Option<usize>,
    /// Seed for sampling and corruption noise.
    #[arg(long)]
    seed: Option<u64>,
    /// Restoration site: residual_post | attn_out | mlp_out.
    #[arg(long)]
    site: Option<String>,
    /// Restoration-window radius (defaults to the site's convention).
    #[arg(long)]
    radius: Option<usize>,
    /// Corruption noise amplitude, in embedding-sigma units.
    #[arg(long)]
    noise: Option<f32>,
    /// Knockout window sizes, comma-separated; empty means none.
    #[arg(long)]
    window: Option<String>,
    /// Top fraction of (layer, head) cells pooled into contribution means.
    #[arg(long)]
    fraction: Option<f64>,
    /// Span aggregation for contributions: max | sum.
    #[arg(long)]
    agg: Option<String>,
    /// Output directory for CSVs and the run manifest.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads for prompt-level parallelism (0 = default pool).
    #[arg(long)]
    workers: Option<usize>,
    /// Canned chat replies for offline context generation.
    #[arg(long)]
    fixtures: Option<PathBuf>,
    /// Generation retry budget per record.
    #[arg(long)]
    attempts: Option<u32>,
    /// Require the attribute occurrence in the first segment (true/false).
    #[arg(long, value_name = "BOOL")]
    strict: Option<bool>,
    /// Count attribute occurrences at word boundaries only (true/false).
    #[arg(long, value_name = "BOOL")]
    word_boundary: Option<bool>,
}

impl SharedFlags {
    fn apply(&self, config: &mut ExperimentConfig) -> Result<()> {
        if let Some(v) = &self.model {
            config.model = Some(v.clone());
        }
        if let Some(v) = &self.vocab {
            config.vocab = Some(v.clone());
        }
        if let Some(v) = &self.facts {
            config.facts = Some(v.clone());
        }
        if let Some(v) = &self.contexts {
            config.contexts = Some(v.clone());
        }
        if let Some(v) = &self.scenario {
            config.scenario = v.parse()?;
        }
        if let Some(v) = self.sample {
            config.sample = Some(v);
        }
        if let Some(v) = self.seed {
            config.seed = v;
        }
        if let Some(v) = &self.site {
            config.site = v.parse()?;
        }
        if let Some(v) = self.radius {
            config.radius = Some(v);
        }
        if let Some(v) = self.noise {
            config.noise = v;
        }
        if let Some(v) = &self.window {
            config.window = config::parse_window_list(v)?;
        }
        if let Some(v) = self.fraction {
            config.fraction = v;
        }
        if let Some(v) = &self.agg {
            config.agg = v.parse()?;
        }
        if let Some(v) = &self.out {
            config.out = Some(v.clone());
        }
        if let Some(v) = self.workers {
            config.workers = v;
        }
        if let Some(v) = &self.fixtures {
            config.fixtures = Some(v.clone());
        }
        if let Some(v) = self.attempts {
            config.attempts = v;
        }
        if let Some(v) = self.strict {
            config.strict = v;
        }
        if let Some(v) = self.word_boundary {
            config.word_boundary = v;
        }
        Ok(())
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "ragprobe",
    version,
    about = "Probe whether a transformer answers from its weights or from retrieved context."
)]
struct Cli {
    /// Flat `key = value` config file; flags override its values.
    #[arg(long, value_name = "FILE", global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Validate or generate retrieval-context records.
    Dataset {
        #[command(subcommand)]
        action: DatasetAction,
    },
    /// Causal-tracing sweep: per-cell indirect effects and AIE summaries.
    Trace(CommandArgs),
    /// Attention-contribution sweep: per-(layer, head) span norms and means.
    Contrib(CommandArgs),
    /// Attention-knockout sweep: sliding-window probability changes.
    Knockout(CommandArgs),
}

#[derive(Debug, Subcommand)]
enum DatasetAction {
    /// Check every context against the dataset constraints.
    Validate(CommandArgs),
    /// Build contexts through a chat client (offline with --fixtures).
    Generate(CommandArgs),
}

#[derive(Debug, Args)]
struct CommandArgs {
    #[command(flatten)]
    flags: SharedFlags,
}

fn resolve(config_file: Option<&PathBuf>, flags: &SharedFlags) -> Result<ExperimentConfig> {
    let mut config = ExperimentConfig::default();
    if let Some(path) = config_file {
        config.apply_file(path)?;
    }
    flags.apply(&mut config)?;
    Ok(config)
}

fn dispatch(cli: &Cli) -> Result<i32> {
    match &cli.command {
        Command::Dataset { action } => match action {
            DatasetAction::Validate(args) => {
                commands::dataset_validate(&resolve(cli.config.as_ref(), &args.flags)?)
            }
            DatasetAction::Generate(args) => {
                commands::dataset_generate(&resolve(cli.config.as_ref(), &args.flags)?)
            }
        },
        Command::Trace(args) => commands::cmd_trace(&resolve(cli.config.as_ref(), &args.flags)?),
        Command::Contrib(args) => {
            commands::cmd_contrib(&resolve(cli.config.as_ref(), &args.flags)?)
        }
        Command::Knockout(args) => {
            commands::cmd_knockout(&resolve(cli.config.as_ref(), &args.flags)?)
        }
    }
}

/// Parse arguments, run the selected command, and return the process exit
/// code (0 success, 1 data/validation failure, 2 configuration error).
pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // --help and --version print and succeed; real parse errors are
            // configuration errors.
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
