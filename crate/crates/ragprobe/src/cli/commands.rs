// SPDX-License-Identifier: MIT OR Apache-2.0

//! The five commands: dataset validation and generation, causal-trace
//! sweeps, attention-contribution sweeps, and attention-knockout sweeps.
//!
//! Shared mechanics live here too: asset loading, seeded sampling without
//! replacement, prompt construction with per-prompt skip reasons (a bad
//! record never aborts a sweep), bounded prompt-level parallelism, and
//! deterministic result files — rows are sorted on logical keys and floats
//! are written in shortest round-trip form, so a rerun with the same config,
//! seed, and fixtures is byte-identical. Wall-clock timings go only into the
//! run manifest, never into data files.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::attention::{
    compute_contributions, head_span_contributions, layer_span_contributions,
    sliding_window_knockout, top_fraction, HeadSpanContribution, SpanAgg,
};
use crate::dataset::{
    build_prompt, generate::generate_context, generate::ChatClient, generate::FixtureChatClient,
    generate::GenerationOptions, generate::HttpChatClient, load_contexts, load_known_facts,
    save_contexts, FactRecord, PromptInstance, RagContext, Scenario, ValidationOptions,
};
use crate::error::{Error, Result};
use crate::model::{
    construct_copy_task_model, load_model, toy_vocabulary, TransformerModel,
};
use crate::tokenizer::{TokenSpan, Vocabulary};
use crate::trace::{aggregate_aie, run_trace, PositionCategory, TraceConfig, TraceResult};

use super::config::{ExperimentConfig, BUILTIN_COPY_TASK};

// ======================================================================
// Run manifest
// ======================================================================

#[derive(Debug, Serialize)]
struct PromptStatus {
    known_id: u64,
    scenario: String,
    status: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    reason: Option<String>,
}

#[derive(Debug, Serialize)]
struct StageTiming {
    name: &'static str,
    seconds: f64,
}

/// What a run did: config snapshot, toolkit version, one status per input
/// prompt (ok or skipped with reason), and wall-clock per stage.
#[derive(Debug, Serialize)]
struct RunManifest {
    version: &'static str,
    command: &'static str,
    config: BTreeMap<String, String>,
    prompts: Vec<PromptStatus>,
    stages: Vec<StageTiming>,
}

impl RunManifest {
    fn new(command: &'static str, config: &ExperimentConfig) -> Self {
        RunManifest {
            version: env!("CARGO_PKG_VERSION"),
            command,
            config: config.snapshot().into_iter().collect(),
            prompts: Vec::new(),
            stages: Vec::new(),
        }
    }

    fn stage(&mut self, name: &'static str, started: Instant) {
        self.stages.push(StageTiming {
            name,
            seconds: started.elapsed().as_secs_f64(),
        });
    }

    fn write(&mut self, dir: &Path) -> Result<()> {
        self.prompts.sort_by(|a, b| {
            (a.known_id, &a.scenario).cmp(&(b.known_id, &b.scenario))
        });
        let path = dir.join("manifest.json");
        let mut text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Dataset(format!("manifest serialization failed: {e}")))?;
        text.push('\n');
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}

// ======================================================================
// Shared scaffolding
// ======================================================================

fn load_model_and_vocab(config: &ExperimentConfig) -> Result<(TransformerModel, Vocabulary)> {
    let spec = config.require_model()?;
    if spec == BUILTIN_COPY_TASK {
        let vocab = match &config.vocab {
            Some(path) => Vocabulary::from_file(path)?,
            None => toy_vocabulary(),
        };
        let (model, _) = construct_copy_task_model(&vocab)?;
        Ok((model, vocab))
    } else {
        let model = load_model(Path::new(spec))?;
        let vocab_path = config.vocab.as_deref().ok_or_else(|| {
            Error::Config("--vocab is required when --model is a path".into())
        })?;
        let vocab = Vocabulary::from_file(vocab_path)?;
        if vocab.len() != model.config.vocab_size {
            return Err(Error::Config(format!(
                "vocabulary has {} entries but the model expects {}",
                vocab.len(),
                model.config.vocab_size
            )));
        }
        Ok((model, vocab))
    }
}

/// Pick `sample` of `n` indices without replacement (seeded shuffle), then
/// return them in ascending order so downstream output is canonically
/// ordered. `None` keeps everything.
fn sample_indices(n: usize, sample: Option<usize>, seed: u64) -> Result<Vec<usize>> {
    let mut indices: Vec<usize> = (0..n).collect();
    let Some(k) = sample else {
        return Ok(indices);
    };
    if k > n {
        return Err(Error::Config(format!(
            "sample size {k} exceeds the {n} available prompts"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    indices.shuffle(&mut rng);
    indices.truncate(k);
    indices.sort_unstable();
    Ok(indices)
}

/// One prompt of a sweep: either a ready instance or a skip reason.
struct PromptJob {
    known_id: u64,
    scenario: Scenario,
    outcome: std::result::Result<PromptInstance, String>,
}

fn build_jobs(
    config: &ExperimentConfig,
    vocab: &Vocabulary,
    model: &TransformerModel,
    facts: &[FactRecord],
    contexts: &BTreeMap<u64, RagContext>,
) -> Result<Vec<PromptJob>> {
    let selected = sample_indices(facts.len(), config.sample, config.seed)?;
    let mut jobs = Vec::new();
    for scenario in config.scenario.list() {
        for &i in &selected {
            let fact = &facts[i];
            let context = contexts.get(&fact.known_id);
            if scenario == Scenario::Rag && context.is_none() {
                jobs.push(PromptJob {
                    known_id: fact.known_id,
                    scenario,
                    outcome: Err("no context record for this known_id".into()),
                });
                continue;
            }
            let outcome = build_prompt(vocab, fact, context, scenario)
                .map_err(|e| e.to_string())
                .and_then(|instance| {
                    if instance.tokens.len() > model.config.max_seq_len {
                        Err(format!(
                            "prompt has {} tokens but the model context is {}",
                            instance.tokens.len(),
                            model.config.max_seq_len
                        ))
                    } else {
                        Ok(instance)
                    }
                });
            jobs.push(PromptJob {
                known_id: fact.known_id,
                scenario,
                outcome,
            });
        }
    }
    Ok(jobs)
}

fn load_context_map(config: &ExperimentConfig) -> Result<BTreeMap<u64, RagContext>> {
    let needs_contexts = config
        .scenario
        .list()
        .contains(&Scenario::Rag);
    if !needs_contexts {
        return Ok(BTreeMap::new());
    }
    let path = config.require_contexts()?;
    Ok(load_contexts(path)?
        .into_iter()
        .map(|c| (c.index, c))
        .collect())
}

/// Record one manifest status per job. A job is "ok" only if it both built
/// and ran; divergent answer tokenization is annotated on otherwise-ok rows.
fn record_statuses<T>(
    manifest: &mut RunManifest,
    jobs: &[PromptJob],
    outcomes: &[(u64, Scenario, std::result::Result<T, String>)],
) {
    for (job, (_, _, outcome)) in jobs.iter().zip(outcomes) {
        manifest.prompts.push(match outcome {
            Ok(_) => PromptStatus {
                known_id: job.known_id,
                scenario: job.scenario.to_string(),
                status: "ok",
                reason: job.outcome.as_ref().ok().and_then(|instance| {
                    instance
                        .tracked_divergence
                        .then(|| "tokenization_divergent".to_string())
                }),
            },
            Err(reason) => PromptStatus {
                known_id: job.known_id,
                scenario: job.scenario.to_string(),
                status: "skipped",
                reason: Some(reason.clone()),
            },
        });
    }
}

/// Run `work` on a bounded pool when `workers > 0`, otherwise on the global
/// one. Results are re-sorted by the caller, so scheduling never shows.
fn with_pool<T: Send>(workers: usize, work: impl FnOnce() -> T + Send) -> Result<T> {
    if workers == 0 {
        return Ok(work());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot build a {workers}-worker pool: {e}")))?;
    Ok(pool.install(work))
}

fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| {
        Error::io(path, std::io::Error::other(e.to_string()))
    })?;
    let io_err = |e: csv::Error| Error::io(path, std::io::Error::other(e.to_string()));
    writer.write_record(header).map_err(io_err)?;
    for row in rows {
        writer.write_record(row).map_err(io_err)?;
    }
    writer.flush().map_err(|e| Error::io(path, e))
}

fn scenario_file(dir: &Path, stem: &str, scenario: Scenario, suffix: &str) -> std::path::PathBuf {
    dir.join(format!("{stem}_{scenario}{suffix}.csv"))
}

// ======================================================================
// dataset validate
// ======================================================================

pub fn dataset_validate(config: &ExperimentConfig) -> Result<i32> {
    let contexts = load_contexts(config.require_contexts()?)?;
    // With a fact file present, cross-check each context against its record.
    let facts: BTreeMap<u64, FactRecord> = match &config.facts {
        Some(path) => load_known_facts(path)?
            .into_iter()
            .map(|f| (f.known_id, f))
            .collect(),
        None => BTreeMap::new(),
    };
    let options = ValidationOptions {
        strict_first_segment: config.strict,
        word_boundary: config.word_boundary,
    };

    let mut valid = 0usize;
    for ctx in &contexts {
        let mut verdict = ctx.validate(&options);
        if let Some(fact) = facts.get(&ctx.index) {
            if ctx.user_query != fact.prompt {
                verdict.reasons.push("query_mismatch".into());
                verdict.valid = false;
            }
            if ctx.object != fact.attribute {
                verdict.reasons.push("object_mismatch".into());
                verdict.valid = false;
            }
        } else if !facts.is_empty() {
            verdict.reasons.push("unknown_record".into());
            verdict.valid = false;
        }
        if verdict.valid {
            valid += 1;
            println!(
                "context {}: valid (mean segment words {:.1})",
                ctx.index, verdict.mean_segment_words
            );
        } else {
            println!(
                "context {}: INVALID [{}]",
                ctx.index,
                verdict.reasons.join(", ")
            );
        }
    }
    println!("valid: {valid}/{}", contexts.len());
    Ok(if valid == contexts.len() { 0 } else { 1 })
}

// ======================================================================
// dataset generate
// ======================================================================

pub fn dataset_generate(config: &ExperimentConfig) -> Result<i32> {
    let started = Instant::now();
    let facts = load_known_facts(config.require_facts()?)?;
    let out_path = config.require_contexts()?;
    let selected = sample_indices(facts.len(), config.sample, config.seed)?;

    let mut client: Box<dyn ChatClient> = match &config.fixtures {
        Some(path) => Box::new(FixtureChatClient::from_file(path)?),
        None => Box::new(HttpChatClient::from_env()?),
    };
    let options = GenerationOptions {
        max_attempts: config.attempts,
        validation: ValidationOptions {
            strict_first_segment: config.strict,
            word_boundary: config.word_boundary,
        },
    };

    let mut manifest = RunManifest::new("dataset generate", config);
    manifest.stage("load", started);
    let generating = Instant::now();
    let mut generated = Vec::new();
    let mut failures = 0usize;
    for &i in &selected {
        let fact = &facts[i];
        match generate_context(client.as_mut(), fact, &options) {
            Ok(ctx) => {
                generated.push(ctx);
                manifest.prompts.push(PromptStatus {
                    known_id: fact.known_id,
                    scenario: "generate".into(),
                    status: "ok",
                    reason: None,
                });
            }
            Err(e @ Error::GenerationFailed { .. }) => {
                failures += 1;
                eprintln!("record {}: {e}", fact.known_id);
                manifest.prompts.push(PromptStatus {
                    known_id: fact.known_id,
                    scenario: "generate".into(),
                    status: "skipped",
                    reason: Some(e.to_string()),
                });
            }
            // Transport and configuration trouble aborts: retrying other
            // records would hammer the same broken endpoint.
            Err(e) => return Err(e),
        }
    }
    manifest.stage("generate", generating);

    let writing = Instant::now();
    save_contexts(out_path, &generated)?;
    if let Some(dir) = &config.out {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        manifest.stage("write", writing);
        manifest.write(dir)?;
    }
    println!(
        "generated {}/{} contexts -> {}",
        generated.len(),
        selected.len(),
        out_path.display()
    );
    Ok(if failures == 0 { 0 } else { 1 })
}

// ======================================================================
// trace
// ======================================================================

pub fn cmd_trace(config: &ExperimentConfig) -> Result<i32> {
    let started = Instant::now();
    let (model, vocab) = load_model_and_vocab(config)?;
    let facts = load_known_facts(config.require_facts()?)?;
    let contexts = load_context_map(config)?;
    let out = config.require_out()?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut manifest = RunManifest::new("trace", config);
    manifest.stage("load", started);

    let building = Instant::now();
    let jobs = build_jobs(config, &vocab, &model, &facts, &contexts)?;
    manifest.stage("build", building);

    let trace_config = TraceConfig {
        site: config.site,
        window_radius: config.radius,
        noise_seed: config.seed,
        std_multiplier: config.noise,
        ..TraceConfig::default()
    };

    let tracing = Instant::now();
    let outcomes: Vec<(u64, Scenario, std::result::Result<TraceResult, String>)> =
        with_pool(config.workers, || {
            jobs.par_iter()
                .map(|job| {
                    let result = match &job.outcome {
                        Ok(instance) => {
                            run_trace(&model, &instance.trace_request(), &trace_config)
                                .map_err(|e| e.to_string())
                        }
                        Err(reason) => Err(reason.clone()),
                    };
                    (job.known_id, job.scenario, result)
                })
                .collect()
        })?;
    manifest.stage("trace", tracing);

    let writing = Instant::now();
    record_statuses(&mut manifest, &jobs, &outcomes);
    let mut per_scenario: BTreeMap<String, Vec<&TraceResult>> = BTreeMap::new();
    for (_, scenario, outcome) in &outcomes {
        if let Ok(result) = outcome {
            per_scenario
                .entry(scenario.to_string())
                .or_default()
                .push(result);
        }
    }

    // LST AIE per scenario in two readings (mean over layers, peak over
    // layers): the vanilla/rag ratio of either summarizes where the answer
    // lives.
    let mut lst_means: BTreeMap<String, f64> = BTreeMap::new();
    let mut lst_peaks: BTreeMap<String, f64> = BTreeMap::new();

    for scenario in config.scenario.list() {
        let key = scenario.to_string();
        let results = per_scenario.get(&key).map_or(&[][..], |v| &v[..]);

        let mut cell_rows = Vec::new();
        let mut prompt_rows = Vec::new();
        for result in results {
            let id = result.known_id.unwrap_or(0);
            prompt_rows.push(vec![
                id.to_string(),
                result.seq_len.to_string(),
                result.answer_token.to_string(),
                result.p_clean.to_string(),
                result.p_corrupt.to_string(),
                result.flipped.to_string(),
            ]);
            for layer in 0..result.ie.nrows() {
                for position in 0..result.ie.ncols() {
                    cell_rows.push(vec![
                        id.to_string(),
                        layer.to_string(),
                        position.to_string(),
                        result.categories[position].label().to_string(),
                        result.site.to_string(),
                        result.ie[[layer, position]].to_string(),
                    ]);
                }
            }
        }
        // Jobs already run in (known_id, layer, position) order per
        // scenario, but sorting here keeps the contract independent of
        // scheduling and collection order.
        cell_rows.sort();
        prompt_rows.sort();
        write_csv(
            &scenario_file(out, "trace", scenario, ""),
            &["prompt_id", "layer", "position", "category", "site", "ie"],
            &cell_rows,
        )?;
        write_csv(
            &scenario_file(out, "trace_prompts", scenario, ""),
            &["prompt_id", "seq_len", "answer_token", "p_clean", "p_corrupt", "flipped"],
            &prompt_rows,
        )?;

        if results.is_empty() {
            println!("{key}: no traceable prompts");
            continue;
        }
        let owned: Vec<TraceResult> = results.iter().map(|r| (*r).clone()).collect();
        let cells = aggregate_aie(&owned)?;
        let aie_rows: Vec<Vec<String>> = cells
            .iter()
            .map(|c| {
                vec![
                    c.layer.to_string(),
                    c.category.label().to_string(),
                    c.aie.to_string(),
                    c.n.to_string(),
                ]
            })
            .collect();
        write_csv(
            &scenario_file(out, "aie", scenario, ""),
            &["layer", "category", "aie", "n"],
            &aie_rows,
        )?;

        println!(
            "{key}: traced {} prompts at site {} ({} layers)",
            results.len(),
            config.site,
            model.config.n_layers
        );
        for category in PositionCategory::ALL {
            let of_category: Vec<&crate::trace::AieCell> =
                cells.iter().filter(|c| c.category == category).collect();
            if of_category.is_empty() {
                continue;
            }
            let mean = of_category.iter().map(|c| c.aie).sum::<f64>() / of_category.len() as f64;
            let peak = of_category.iter().map(|c| c.aie).fold(f64::MIN, f64::max);
            let n = of_category.iter().map(|c| c.n).max().unwrap_or(0);
            println!("  AIE[{}] mean over layers = {:+.6} (n={})", category.label(), mean, n);
            if category == PositionCategory::Lst {
                lst_means.insert(key.clone(), mean);
                lst_peaks.insert(key.clone(), peak);
            }
        }
    }

    for (reading, values) in [("mean", &lst_means), ("peak", &lst_peaks)] {
        if let (Some(v), Some(r)) = (values.get("vanilla"), values.get("rag")) {
            if r.abs() > 1e-12 {
                println!("LST AIE ratio, {reading} over layers (vanilla / rag): {:.3}", v / r);
            } else {
                println!("LST AIE ratio, {reading} over layers (vanilla / rag): undefined (rag LST AIE ~ 0)");
            }
        }
    }

    manifest.stage("write", writing);
    manifest.write(out)?;
    Ok(0)
}

// ======================================================================
// contrib
// ======================================================================

struct ContribRows {
    /// (span_label, per-(layer, head) values in canonical order).
    labeled: Vec<(&'static str, Vec<HeadSpanContribution>)>,
    /// (span_label, aggregation, layer, head-summed norm): both max and sum
    /// over the span, so span-length sensitivity is visible downstream.
    layers: Vec<(&'static str, &'static str, usize, f64)>,
}

pub fn cmd_contrib(config: &ExperimentConfig) -> Result<i32> {
    let started = Instant::now();
    let (model, vocab) = load_model_and_vocab(config)?;
    let facts = load_known_facts(config.require_facts()?)?;
    let contexts = load_context_map(config)?;
    let out = config.require_out()?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut manifest = RunManifest::new("contrib", config);
    manifest.stage("load", started);

    let building = Instant::now();
    let jobs = build_jobs(config, &vocab, &model, &facts, &contexts)?;
    manifest.stage("build", building);

    let computing = Instant::now();
    let outcomes: Vec<(u64, Scenario, std::result::Result<ContribRows, String>)> =
        with_pool(config.workers, || {
            jobs.par_iter()
                .map(|job| {
                    let result = match &job.outcome {
                        Ok(instance) => contributions_for(&model, instance, config)
                            .map_err(|e| e.to_string()),
                        Err(reason) => Err(reason.clone()),
                    };
                    (job.known_id, job.scenario, result)
                })
                .collect()
        })?;
    manifest.stage("contrib", computing);

    let writing = Instant::now();
    // scenario -> span_label -> pooled top-fraction values across prompts.
    let mut pooled: BTreeMap<(String, &'static str), Vec<f64>> = BTreeMap::new();

    for scenario in config.scenario.list() {
        let key = scenario.to_string();
        let mut rows = Vec::new();
        let mut layer_rows = Vec::new();
        let mut ok = 0usize;
        for (known_id, job_scenario, outcome) in &outcomes {
            if *job_scenario != scenario {
                continue;
            }
            let Ok(contrib) = outcome else { continue };
            ok += 1;
            for (label, cells) in &contrib.labeled {
                let values: Vec<f64> = cells.iter().map(|c| c.value).collect();
                for idx in top_fraction(&values, config.fraction) {
                    pooled
                        .entry((key.clone(), label))
                        .or_default()
                        .push(values[idx]);
                }
                for cell in cells {
                    rows.push(vec![
                        known_id.to_string(),
                        cell.layer.to_string(),
                        cell.head.to_string(),
                        (*label).to_string(),
                        cell.value.to_string(),
                    ]);
                }
            }
            for (label, agg, layer, value) in &contrib.layers {
                layer_rows.push(vec![
                    known_id.to_string(),
                    layer.to_string(),
                    (*label).to_string(),
                    (*agg).to_string(),
                    value.to_string(),
                ]);
            }
        }
        rows.sort();
        layer_rows.sort();
        write_csv(
            &scenario_file(out, "contrib", scenario, ""),
            &["prompt_id", "layer", "head", "source_label", "norm"],
            &rows,
        )?;
        write_csv(
            &scenario_file(out, "contrib_layers", scenario, ""),
            &["prompt_id", "layer", "source_label", "agg", "norm"],
            &layer_rows,
        )?;
        println!("{key}: contributions for {ok} prompts (agg {}, top fraction {})", config.agg, config.fraction);

        let mut summary_rows = Vec::new();
        for label in ["attribute", "subject"] {
            if let Some(values) = pooled.get(&(key.clone(), label)) {
                let mean = values.iter().sum::<f64>() / values.len() as f64;
                summary_rows.push(vec![
                    label.to_string(),
                    config.fraction.to_string(),
                    mean.to_string(),
                    values.len().to_string(),
                ]);
                println!("  mean {label} contribution (top cells) = {mean:.6} (n={})", values.len());
            }
        }
        write_csv(
            &scenario_file(out, "contrib_summary", scenario, ""),
            &["span_label", "fraction", "mean", "n"],
            &summary_rows,
        )?;
    }

    record_statuses(&mut manifest, &jobs, &outcomes);
    manifest.stage("write", writing);
    manifest.write(out)?;
    Ok(0)
}

fn contributions_for(
    model: &TransformerModel,
    instance: &PromptInstance,
    config: &ExperimentConfig,
) -> Result<ContribRows> {
    let set = compute_contributions(model, &instance.tokens, instance.last_position())?;
    let mut spans = vec![("subject", instance.subject_span)];
    if let Some(attribute) = instance.attribute_span {
        spans.push(("attribute", attribute));
    }
    let mut labeled = Vec::new();
    let mut layers = Vec::new();
    for (label, span) in spans {
        labeled.push((label, head_span_contributions(&set, &span, config.agg)));
        for (agg_label, agg) in [("max", SpanAgg::Max), ("sum", SpanAgg::Sum)] {
            for cell in layer_span_contributions(&set, &span, agg) {
                layers.push((label, agg_label, cell.layer, cell.value));
            }
        }
    }
    Ok(ContribRows { labeled, layers })
}

// ======================================================================
// knockout
// ======================================================================

/// Label a knockout window by the span it overlaps; the in-context answer
/// wins over the subject when a window straddles both.
fn window_label(
    start: usize,
    size: usize,
    subject: &TokenSpan,
    attribute: Option<&TokenSpan>,
) -> &'static str {
    let overlaps = |span: &TokenSpan| start < span.end && start + size > span.start;
    if attribute.is_some_and(overlaps) {
        "attribute"
    } else if overlaps(subject) {
        "subject"
    } else {
        "other"
    }
}

struct KnockoutRows {
    /// (window size, window start, label, p_base, p_knocked, change_pct).
    rows: Vec<(usize, usize, &'static str, f64, f64, f64)>,
}

pub fn cmd_knockout(config: &ExperimentConfig) -> Result<i32> {
    let started = Instant::now();
    let (model, vocab) = load_model_and_vocab(config)?;
    let facts = load_known_facts(config.require_facts()?)?;
    let contexts = load_context_map(config)?;
    let out = config.require_out()?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut manifest = RunManifest::new("knockout", config);
    manifest.stage("load", started);

    let building = Instant::now();
    let jobs = build_jobs(config, &vocab, &model, &facts, &contexts)?;
    manifest.stage("build", building);

    let knocking = Instant::now();
    let outcomes: Vec<(u64, Scenario, std::result::Result<KnockoutRows, String>)> =
        with_pool(config.workers, || {
            jobs.par_iter()
                .map(|job| {
                    let result = match &job.outcome {
                        Ok(instance) => knockouts_for(&model, instance, &config.window)
                            .map_err(|e| e.to_string()),
                        Err(reason) => Err(reason.clone()),
                    };
                    (job.known_id, job.scenario, result)
                })
                .collect()
        })?;
    manifest.stage("knockout", knocking);

    let writing = Instant::now();
    for scenario in config.scenario.list() {
        let key = scenario.to_string();
        // (scenario, label) -> most negative relative change and its locus.
        let mut max_drop: BTreeMap<&'static str, (f64, u64, usize, usize)> = BTreeMap::new();
        let mut ok = 0usize;
        for &size in &config.window {
            let mut rows = Vec::new();
            for (known_id, job_scenario, outcome) in &outcomes {
                if *job_scenario != scenario {
                    continue;
                }
                if let Ok(knockouts) = outcome {
                    for (w, start, label, p_base, p_knocked, change) in &knockouts.rows {
                        if *w != size {
                            continue;
                        }
                        rows.push(vec![
                            known_id.to_string(),
                            (*label).to_string(),
                            start.to_string(),
                            p_base.to_string(),
                            p_knocked.to_string(),
                            change.to_string(),
                        ]);
                        let best = max_drop.entry(label).or_insert((f64::INFINITY, 0, 0, 0));
                        if *change < best.0 {
                            *best = (*change, *known_id, *start, size);
                        }
                    }
                }
            }
            rows.sort();
            write_csv(
                &scenario_file(out, "knockout", scenario, &format!("_w{size}")),
                &["prompt_id", "span_label", "window_start", "p_base", "p_knocked", "change_pct"],
                &rows,
            )?;
        }
        for (_, _, outcome) in outcomes
            .iter()
            .filter(|(_, s, _)| *s == scenario)
        {
            if outcome.is_ok() {
                ok += 1;
            }
        }
        println!("{key}: knockouts for {ok} prompts (window sizes {:?})", config.window);
        if config.window.is_empty() {
            println!("  no knockout windows requested; all changes 0.0%");
        } else {
            for label in ["attribute", "subject", "other"] {
                if let Some((change, id, start, size)) = max_drop.get(label) {
                    println!(
                        "  max drop [{label}] = {change:+.2}% (record {id}, window start {start}, size {size})"
                    );
                }
            }
        }
    }

    record_statuses(&mut manifest, &jobs, &outcomes);
    manifest.stage("write", writing);
    manifest.write(out)?;
    Ok(0)
}

fn knockouts_for(
    model: &TransformerModel,
    instance: &PromptInstance,
    windows: &[usize],
) -> Result<KnockoutRows> {
    let mut rows = Vec::new();
    for &size in windows {
        for (start, outcome) in
            sliding_window_knockout(model, &instance.tokens, instance.tracked_token, size)?
        {
            let label = window_label(
                start,
                size,
                &instance.subject_span,
                instance.attribute_span.as_ref(),
            );
            rows.push((
                size,
                start,
                label,
                outcome.p_base,
                outcome.p_knocked,
                outcome.relative_change_pct,
            ));
        }
    }
    Ok(KnockoutRows { rows })
}

// ======================================================================
// Tests
// ======================================================================
