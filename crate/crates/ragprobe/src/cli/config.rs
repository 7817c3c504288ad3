// SPDX-License-Identifier: MIT OR Apache-2.0

//! Experiment configuration: a flat `key = value` config file, command-line
//! overrides, and the resolved settings commands run with.
//!
//! Precedence is conventional: built-in defaults, then the config file, then
//! command-line flags. Secrets never appear here — the chat API key is read
//! from the environment by the HTTP client.

use std::path::{Path, PathBuf};

use crate::attention::SpanAgg;
use crate::dataset::Scenario;
use crate::error::{Error, Result};
use crate::trace::TraceSite;

/// Which scenarios a sweep covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScenarioChoice {
    Vanilla,
    Rag,
    Both,
}

impl ScenarioChoice {
    /// The concrete scenarios to run, in canonical order.
    pub fn list(self) -> Vec<Scenario> {
        match self {
            ScenarioChoice::Vanilla => vec![Scenario::Vanilla],
            ScenarioChoice::Rag => vec![Scenario::Rag],
            ScenarioChoice::Both => vec![Scenario::Vanilla, Scenario::Rag],
        }
    }
}

impl std::str::FromStr for ScenarioChoice {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vanilla" => Ok(ScenarioChoice::Vanilla),
            "rag" => Ok(ScenarioChoice::Rag),
            "both" => Ok(ScenarioChoice::Both),
            other => Err(Error::Config(format!(
                "unknown scenario `{other}` (expected vanilla, rag, or both)"
            ))),
        }
    }
}

impl std::fmt::Display for ScenarioChoice {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ScenarioChoice::Vanilla => "vanilla",
            ScenarioChoice::Rag => "rag",
            ScenarioChoice::Both => "both",
        })
    }
}

/// Model argument: sentinel for the built-in handcrafted model, or a path to
/// a saved manifest.
pub const BUILTIN_COPY_TASK: &str = "builtin:copy-task";

/// Fully resolved settings for one invocation.
///
/// Config file schema — one `key = value` per line, `#` comments, keys
/// matching the long flag names:
///
/// ```text
/// model     = builtin:copy-task   # or a model directory / manifest path
/// vocab     = fixtures/toy.vocab
/// facts     = fixtures/known_facts.json
/// contexts  = fixtures/toy_contexts.json
/// scenario  = both                # vanilla | rag | both
/// sample    = 50
/// seed      = 11
/// site      = residual_post       # residual_post | attn_out | mlp_out
/// radius    = 5
/// noise     = 3.0                 # corruption amplitude, in embedding-sigma units
/// window    = 5                   # comma-separated knockout window sizes
/// fraction  = 0.05
/// agg       = max                 # max | sum
/// out       = runs/demo
/// workers   = 4
/// fixtures  = fixtures/chat_replies.json
/// attempts  = 5
/// strict    = true
/// word_boundary = false
/// ```
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub model: Option<String>,
    pub vocab: Option<PathBuf>,
    pub facts: Option<PathBuf>,
    pub contexts: Option<PathBuf>,
    pub scenario: ScenarioChoice,
    /// Prompts to sample (without replacement); `None` means all.
    pub sample: Option<usize>,
    pub seed: u64,
    pub site: TraceSite,
    /// Restoration-window radius override; `None` takes the site default.
    pub radius: Option<usize>,
    /// Corruption noise amplitude, in embedding-sigma units.
    pub noise: f32,
    /// Knockout window sizes; may be empty (no knockouts, summary only).
    pub window: Vec<usize>,
    /// Top fraction of (layer, head) cells pooled into contribution means.
    pub fraction: f64,
    pub agg: SpanAgg,
    pub out: Option<PathBuf>,
    /// Worker threads for prompt-level parallelism; 0 = library default.
    pub workers: usize,
    /// Canned chat replies for offline context generation.
    pub fixtures: Option<PathBuf>,
    /// Generation retry budget per record.
    pub attempts: u32,
    /// Require the attribute occurrence in segment 1 during validation.
    pub strict: bool,
    /// Count attribute occurrences at word boundaries only.
    pub word_boundary: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            model: None,
            vocab: None,
            facts: None,
            contexts: None,
            scenario: ScenarioChoice::Both,
            sample: None,
            seed: 0,
            site: TraceSite::ResidualPost,
            radius: None,
            noise: 3.0,
            window: vec![5],
            fraction: 0.05,
            agg: SpanAgg::Max,
            out: None,
            workers: 0,
            fixtures: None,
            attempts: 5,
            strict: true,
            word_boundary: false,
        }
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str, line: usize) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e| {
        Error::Config(format!("config line {line}: bad value for `{key}`: {e}"))
    })
}

/// Parse a comma-separated list of window sizes; empty input means "no
/// windows".
pub fn parse_window_list(value: &str) -> Result<Vec<usize>> {
    let trimmed = value.trim();
    if trimmed.is_empty() {
        return Ok(Vec::new());
    }
    trimmed
        .split(',')
        .map(|part| {
            part.trim().parse::<usize>().map_err(|_| {
                Error::Config(format!("bad window size `{}` in `{value}`", part.trim()))
            })
        })
        .collect()
}

fn parse_bool(key: &str, value: &str, line: usize) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        other => Err(Error::Config(format!(
            "config line {line}: bad value for `{key}`: expected true/false, got `{other}`"
        ))),
    }
}

impl ExperimentConfig {
    /// Apply one config file on top of `self`; later calls and flags win.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!(
                    "config line {line_no}: expected `key = value`, got `{raw}`"
                ))
            })?;
            let (key, value) = (key.trim(), value.trim());
            match key {
                "model" => self.model = Some(value.to_string()),
                "vocab" => self.vocab = Some(PathBuf::from(value)),
                "facts" => self.facts = Some(PathBuf::from(value)),
                "contexts" => self.contexts = Some(PathBuf::from(value)),
                "scenario" => self.scenario = parse_value(key, value, line_no)?,
                "sample" => self.sample = Some(parse_value(key, value, line_no)?),
                "seed" => self.seed = parse_value(key, value, line_no)?,
                "site" => self.site = parse_value(key, value, line_no)?,
                "radius" => self.radius = Some(parse_value(key, value, line_no)?),
                "noise" => self.noise = parse_value(key, value, line_no)?,
                "window" => self.window = parse_window_list(value)?,
                "fraction" => self.fraction = parse_value(key, value, line_no)?,
                "agg" => self.agg = parse_value(key, value, line_no)?,
                "out" => self.out = Some(PathBuf::from(value)),
                "workers" => self.workers = parse_value(key, value, line_no)?,
                "fixtures" => self.fixtures = Some(PathBuf::from(value)),
                "attempts" => self.attempts = parse_value(key, value, line_no)?,
                "strict" => self.strict = parse_bool(key, value, line_no)?,
                "word_boundary" => self.word_boundary = parse_bool(key, value, line_no)?,
                other => {
                    return Err(Error::Config(format!(
                        "config line {line_no}: unknown key `{other}`"
                    )))
                }
            }
        }
        Ok(())
    }

    pub fn require_model(&self) -> Result<&str> {
        self.model
            .as_deref()
            .ok_or_else(|| Error::Config("--model is required (path or builtin:copy-task)".into()))
    }

    pub fn require_facts(&self) -> Result<&Path> {
        self.facts
            .as_deref()
            .ok_or_else(|| Error::Config("--facts is required".into()))
    }

    pub fn require_contexts(&self) -> Result<&Path> {
        self.contexts
            .as_deref()
            .ok_or_else(|| Error::Config("--contexts is required".into()))
    }

    pub fn require_out(&self) -> Result<&Path> {
        self.out
            .as_deref()
            .ok_or_else(|| Error::Config("--out is required".into()))
    }

    /// Snapshot as ordered key/value pairs for the run manifest. Only set
    /// values appear; the schema mirrors the config file.
    pub fn snapshot(&self) -> Vec<(String, String)> {
        let mut pairs = Vec::new();
        let mut push = |k: &str, v: String| pairs.push((k.to_string(), v));
        if let Some(m) = &self.model {
            push("model", m.clone());
        }
        if let Some(p) = &self.vocab {
            push("vocab", p.display().to_string());
        }
        if let Some(p) = &self.facts {
            push("facts", p.display().to_string());
        }
        if let Some(p) = &self.contexts {
            push("contexts", p.display().to_string());
        }
        push("scenario", self.scenario.to_string());
        if let Some(n) = self.sample {
            push("sample", n.to_string());
        }
        push("seed", self.seed.to_string());
        push("site", self.site.to_string());
        if let Some(r) = self.radius {
            push("radius", r.to_string());
        }
        push("noise", self.noise.to_string());
        push(
            "window",
            self.window
                .iter()
                .map(usize::to_string)
                .collect::<Vec<_>>()
                .join(","),
        );
        push("fraction", self.fraction.to_string());
        push("agg", self.agg.to_string());
        if let Some(p) = &self.out {
            push("out", p.display().to_string());
        }
        push("workers", self.workers.to_string());
        if let Some(p) = &self.fixtures {
            push("fixtures", p.display().to_string());
        }
        push("attempts", self.attempts.to_string());
        push("strict", self.strict.to_string());
        push("word_boundary", self.word_boundary.to_string());
        pairs
    }
}
