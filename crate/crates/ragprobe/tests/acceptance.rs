// SPDX-License-Identifier: MIT OR Apache-2.0

//! Acceptance suite: the contracts the toolkit is sold on, each as one test
//! with a pinned tolerance and a runtime budget. The harness's per-test
//! `ok`/`FAILED` line is the pass/fail verdict; run with `-- --nocapture` to
//! also see each check's measured margin.
//!
//! ```text
//! cargo test --test acceptance -- --nocapture
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ragprobe::attention::{compute_contributions, run_knockout_experiment};
use ragprobe::dataset::generate::{generate_context, FixtureChatClient, GenerationOptions};
use ragprobe::dataset::{
    build_prompt, load_contexts, load_known_facts, save_contexts, validate_context,
    PromptInstance, Scenario, ValidationOptions,
};
use ragprobe::intervention::{
    apply_noise, InterventionPlan, KnockoutEdge, KnockoutSpec, NoiseSpec,
};
use ragprobe::model::{
    construct_copy_task_model, init_random, toy_vocabulary, CaptureSpec, HookSite, ModelConfig,
    PositionalScheme, SiteKind, TransformerModel,
};
use ragprobe::tokenizer::{SpanLabel, TokenSpan};
use ragprobe::trace::{
    aggregate_aie, categorize_positions, run_trace, PositionCategory, TraceConfig, TraceResult,
    TraceSite,
};
use ragprobe::Error;

// ======================================================================
// Shared scaffolding
// ======================================================================

fn fixtures_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

/// A small random-weight model: 4 layers, 2 heads, d_model 32.
fn tiny_random_model(seed: u64) -> TransformerModel {
    init_random(
        ModelConfig {
            n_layers: 4,
            n_heads: 2,
            d_model: 32,
            d_head: 16,
            d_mlp: 64,
            vocab_size: 100,
            max_seq_len: 48,
            positional_scheme: PositionalScheme::LearnedAbsolute,
        },
        seed,
    )
    .expect("valid config")
}

fn random_tokens(rng: &mut ChaCha8Rng, len: usize, vocab_size: u32) -> Vec<u32> {
    (0..len).map(|_| rng.random_range(0..vocab_size)).collect()
}

fn span(start: usize, end: usize, label: SpanLabel) -> TokenSpan {
    TokenSpan {
        start,
        end,
        byte_start: 0,
        byte_end: 0,
        label,
    }
}

/// All four bundled retrieval prompts on the handcrafted copy model.
fn toy_rag_prompts() -> Vec<PromptInstance> {
    let vocab = toy_vocabulary();
    let facts = load_known_facts(&fixtures_dir().join("known_facts.json")).unwrap();
    let contexts = load_contexts(&fixtures_dir().join("toy_contexts.json")).unwrap();
    facts
        .iter()
        .map(|fact| {
            let context = contexts.iter().find(|c| c.index == fact.known_id);
            build_prompt(&vocab, fact, context, Scenario::Rag).unwrap()
        })
        .collect()
}

fn max_abs_diff(a: &ndarray::Array1<f32>, b: &ndarray::Array1<f32>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (*x as f64 - *y as f64).abs())
        .fold(0.0, f64::max)
}

fn within_budget(t0: Instant, budget: Duration, what: &str) -> Duration {
    let elapsed = t0.elapsed();
    assert!(
        elapsed < budget,
        "{what} took {elapsed:.2?}, over its {budget:.2?} budget"
    );
    elapsed
}

// ======================================================================
// 1. Patching every clean residual cell recovers the clean distribution
// ======================================================================

#[test]
fn t01_full_restoration_recovers_clean_distribution() {
    let t0 = Instant::now();
    let model = tiny_random_model(7);
    let mut rng = ChaCha8Rng::seed_from_u64(701);
    let tokens = random_tokens(&mut rng, 12, 100);

    let capture = CaptureSpec::all_positions(SiteKind::ResidualPost, 4, tokens.len());
    let clean = model
        .forward(&tokens, &InterventionPlan::clean(), &capture)
        .unwrap();

    let noise = NoiseSpec::auto(vec![span(2, 9, SpanLabel::Subject)], 33);
    let corrupted = model
        .forward(
            &tokens,
            &InterventionPlan::with_noise(noise.clone()),
            &CaptureSpec::none(),
        )
        .unwrap();
    let moved = max_abs_diff(&clean.next_token_probs, &corrupted.next_token_probs);
    assert!(
        moved > 1e-4,
        "corruption barely moved the distribution ({moved:.2e}); restoring would prove nothing"
    );

    let mut plan = InterventionPlan::with_noise(noise);
    for (site, value) in &clean.captured {
        plan.add_patch(*site, value.clone());
    }
    let restored = model.forward(&tokens, &plan, &CaptureSpec::none()).unwrap();
    let diff = max_abs_diff(&clean.next_token_probs, &restored.next_token_probs);
    assert!(
        diff <= 1e-5,
        "restored distribution differs from clean by {diff:.2e} (tolerance 1e-5)"
    );

    let elapsed = within_budget(t0, Duration::from_secs(10), "full restoration");
    println!(
        "[PASS] full restoration recovers the clean distribution \
         (max |dp| = {diff:.2e}, corruption had moved it {moved:.2e}; {elapsed:.2?})"
    );
}

// ======================================================================
// 2. Patching a cell with its own corrupted value has zero effect
// ======================================================================

#[test]
fn t02_self_patch_has_zero_indirect_effect() {
    let t0 = Instant::now();
    let model = tiny_random_model(7);
    let mut rng = ChaCha8Rng::seed_from_u64(702);
    let tokens = random_tokens(&mut rng, 16, 100);
    let noise = NoiseSpec::auto(vec![span(3, 11, SpanLabel::Subject)], 5);

    let capture = CaptureSpec::all_positions(SiteKind::ResidualPost, 4, tokens.len());
    let corrupted = model
        .forward(&tokens, &InterventionPlan::with_noise(noise.clone()), &capture)
        .unwrap();
    let answer = corrupted.argmax;
    let p_corrupt = corrupted.prob(answer);

    let mut worst = 0.0f64;
    for _ in 0..100 {
        let layer = rng.random_range(0..4usize);
        let position = rng.random_range(0..tokens.len());
        let site = HookSite::new(layer, SiteKind::ResidualPost, position);
        let mut plan = InterventionPlan::with_noise(noise.clone());
        plan.add_patch(site, corrupted.captured[&site].clone());
        let rerun = model.forward(&tokens, &plan, &CaptureSpec::none()).unwrap();
        let ie = rerun.prob(answer) - p_corrupt;
        worst = worst.max(ie.abs());
        assert!(
            ie.abs() <= 1e-6,
            "self-patch at layer {layer}, position {position} moved the answer \
             probability by {ie:.2e} (tolerance 1e-6)"
        );
    }

    let elapsed = within_budget(t0, Duration::from_secs(10), "null-effect sweep");
    println!(
        "[PASS] self-patching 100 random corrupted cells changes nothing \
         (max |IE| = {worst:.2e}; {elapsed:.2?})"
    );
}

// ======================================================================
// 3. Per-source contributions sum back to each head's attention output
// ======================================================================

#[test]
fn t03_contributions_reconstruct_attention_output() {
    let t0 = Instant::now();
    let model = tiny_random_model(7);
    let mut rng = ChaCha8Rng::seed_from_u64(703);
    let d_model = model.config.d_model;
    let mut worst_rel = 0.0f64;

    for _ in 0..20 {
        let len = rng.random_range(4..=32usize);
        let tokens = random_tokens(&mut rng, len, 100);
        let target = len - 1;
        let set = compute_contributions(&model, &tokens, target).unwrap();
        let capture = CaptureSpec {
            head_outputs: true,
            ..CaptureSpec::none()
        };
        let out = model
            .forward(&tokens, &InterventionPlan::clean(), &capture)
            .unwrap();
        let head_outputs = out.head_outputs.as_ref().unwrap();

        for layer in 0..model.config.n_layers {
            for head in 0..model.config.n_heads {
                let mut summed = vec![0.0f64; d_model];
                for source in 0..=target {
                    let record = set.record(layer, head, source).unwrap();
                    for (d, v) in record.vector.iter().enumerate() {
                        summed[d] += *v as f64;
                    }
                }
                let mut diff_sq = 0.0f64;
                let mut norm_sq = 0.0f64;
                for d in 0..d_model {
                    let actual = head_outputs[layer][[head, target, d]] as f64;
                    diff_sq += (summed[d] - actual).powi(2);
                    norm_sq += actual.powi(2);
                }
                let rel = diff_sq.sqrt() / norm_sq.sqrt().max(1e-12);
                worst_rel = worst_rel.max(rel);
                assert!(
                    rel <= 1e-5,
                    "layer {layer}, head {head}: source-summed contributions miss the \
                     attention output by {rel:.2e} relative (tolerance 1e-5)"
                );
            }
        }
    }

    let elapsed = within_budget(t0, Duration::from_secs(30), "decomposition sweep");
    println!(
        "[PASS] contributions reconstruct every head's output on 20 random prompts \
         (worst relative error {worst_rel:.2e}; {elapsed:.2?})"
    );
}

// ======================================================================
// 4. Knocked edges carry exactly zero weight; surviving rows renormalize
// ======================================================================

/// Drop just enough targets that no attention row loses all its sources.
fn prune_starved_rows(mut edges: Vec<KnockoutEdge>) -> Vec<KnockoutEdge> {
    let mut per_row: BTreeMap<(usize, usize), BTreeSet<usize>> = BTreeMap::new();
    for e in &edges {
        per_row.entry((e.layer, e.source)).or_default().insert(e.target);
    }
    for ((layer, source), targets) in per_row {
        if targets.len() == source + 1 {
            let sacrificed = *targets.iter().next_back().unwrap();
            edges.retain(|e| {
                !(e.layer == layer && e.source == source && e.target == sacrificed)
            });
        }
    }
    edges
}

#[test]
fn t04_knockout_zeroes_edges_and_rows_renormalize() {
    let t0 = Instant::now();
    let model = tiny_random_model(9);
    let mut rng = ChaCha8Rng::seed_from_u64(704);
    let tokens = random_tokens(&mut rng, 14, 100);
    let seq = tokens.len();
    let (n_layers, n_heads) = (model.config.n_layers, model.config.n_heads);

    let mut cases = 0usize;
    let mut worst_row_error = 0.0f64;
    for _ in 0..64 {
        let mut edges = Vec::new();
        for _ in 0..rng.random_range(1..=12usize) {
            let layer = rng.random_range(0..n_layers);
            let source = rng.random_range(0..seq);
            let target = rng.random_range(0..=source);
            edges.push(KnockoutEdge {
                layer,
                source,
                target,
            });
        }
        let edges = prune_starved_rows(edges);
        if edges.is_empty() {
            continue;
        }
        let spec = KnockoutSpec::new(edges);
        let out = model
            .forward(
                &tokens,
                &InterventionPlan::with_knockout(spec.clone()),
                &CaptureSpec::none(),
            )
            .unwrap();

        for e in &spec.edges {
            for h in 0..n_heads {
                let w = out.attention_weights[e.layer][[h, e.source, e.target]];
                assert_eq!(
                    w, 0.0,
                    "knocked edge (layer {}, {} -> {}) still carries weight {w} in head {h}",
                    e.layer, e.source, e.target
                );
            }
        }
        for (layer, weights) in out.attention_weights.iter().enumerate() {
            for h in 0..n_heads {
                for row in 0..seq {
                    let visible: f64 = (0..=row).map(|col| weights[[h, row, col]] as f64).sum();
                    let future: f64 = (row + 1..seq).map(|col| weights[[h, row, col]] as f64).sum();
                    worst_row_error = worst_row_error.max((visible - 1.0).abs());
                    assert!(
                        (visible - 1.0).abs() <= 1e-6,
                        "layer {layer}, head {h}, row {row} sums to {visible} after knockout"
                    );
                    assert_eq!(future, 0.0, "causal mask leaked at layer {layer}, row {row}");
                }
            }
        }
        cases += 1;
    }
    assert!(cases >= 50, "only {cases} random edge sets survived pruning");

    let elapsed = within_budget(t0, Duration::from_secs(10), "knockout property sweep");
    println!(
        "[PASS] {cases} random edge sets: knocked weights exactly 0, rows renormalize \
         (worst row-sum error {worst_row_error:.2e}; {elapsed:.2?})"
    );
}

// ======================================================================
// 5. On the copy model, the in-context answer is what the last token reads
// ======================================================================

#[test]
fn t05_answer_span_dominates_knockout_and_contributions() {
    let t0 = Instant::now();
    let vocab = toy_vocabulary();
    let (model, _) = construct_copy_task_model(&vocab).unwrap();
    let n_layers = model.config.n_layers;

    for instance in toy_rag_prompts() {
        let attr = instance.attribute_span.unwrap();
        let last = instance.last_position();

        // (a) Severing the answer's span starves the prediction; severing an
        // unrelated scaffold span of the same width does nothing.
        let hit = run_knockout_experiment(
            &model,
            &instance.tokens,
            instance.tracked_token,
            &KnockoutSpec::span_to_target(0..n_layers, last, &attr),
        )
        .unwrap();
        assert!(
            hit.relative_change_pct <= -90.0,
            "record {}: answer-span knockout only changed probability by {:+.2}%",
            instance.known_id,
            hit.relative_change_pct
        );

        let control = span(1, 1 + attr.token_len(), SpanLabel::Control);
        assert!(control.end <= instance.subject_span.start && control.end <= attr.start);
        let unrelated = run_knockout_experiment(
            &model,
            &instance.tokens,
            instance.tracked_token,
            &KnockoutSpec::span_to_target(0..n_layers, last, &control),
        )
        .unwrap();
        assert!(
            unrelated.relative_change_pct.abs() < 5.0,
            "record {}: unrelated-span knockout changed probability by {:+.2}%",
            instance.known_id,
            unrelated.relative_change_pct
        );

        // (b) The answer tokens inject more into the last position's stream
        // than the query's subject tokens do.
        let set = compute_contributions(&model, &instance.tokens, last).unwrap();
        let mean_norm = |s: &TokenSpan| {
            let norms: Vec<f64> = set
                .records
                .iter()
                .filter(|r| s.contains(r.source))
                .map(|r| r.norm)
                .collect();
            norms.iter().sum::<f64>() / norms.len() as f64
        };
        let attr_mean = mean_norm(&attr);
        let subject_mean = mean_norm(&instance.subject_span);
        assert!(
            attr_mean > subject_mean,
            "record {}: answer contribution {attr_mean:.4} does not exceed \
             subject contribution {subject_mean:.4}",
            instance.known_id
        );

        println!(
            "[PASS] record {}: answer knockout {:+.1}%, unrelated {:+.2}%, \
             contribution means {:.4} vs {:.4}",
            instance.known_id,
            hit.relative_change_pct,
            unrelated.relative_change_pct,
            attr_mean,
            subject_mean
        );
    }

    let elapsed = within_budget(t0, Duration::from_secs(10), "copy-model knockout study");
    println!("[PASS] the in-context answer dominates information flow ({elapsed:.2?})");
}

// ======================================================================
// 6. Tracing a retrieval prompt localizes the answer at its context slot
// ======================================================================

#[test]
fn t06_tracing_peaks_at_the_context_answer_position() {
    let t0 = Instant::now();
    let vocab = toy_vocabulary();
    let (model, _) = construct_copy_task_model(&vocab).unwrap();
    // The handcrafted model's embeddings are small (sigma ~0.30), so the
    // stock 3-sigma corruption barely dents its one-hot word signal; this
    // seed/amplitude pair verifiably flips every bundled prompt.
    let config = TraceConfig {
        noise_seed: 45,
        std_multiplier: 8.0,
        ..TraceConfig::default()
    };

    let mut results: Vec<TraceResult> = Vec::new();
    let mut weakest_attr_ie = f64::INFINITY;
    for instance in toy_rag_prompts() {
        let result = run_trace(&model, &instance.trace_request(), &config).unwrap();
        assert!(
            result.p_corrupt < 0.1 && result.flipped,
            "record {}: corruption left the answer at p = {:.4}",
            instance.known_id,
            result.p_corrupt
        );

        // The final position is excluded from the peak search: restoring the
        // stream right where the prediction is read off trivially recovers
        // the answer, so only earlier positions localize anything.
        let attr_pos = instance.attribute_span.unwrap().start;
        let (peak_layer, peak_pos) = (0..result.ie.nrows())
            .flat_map(|l| (0..result.seq_len - 1).map(move |p| (l, p)))
            .max_by(|a, b| result.ie[[a.0, a.1]].total_cmp(&result.ie[[b.0, b.1]]))
            .unwrap();
        assert_eq!(
            peak_pos, attr_pos,
            "record {}: IE peaks at position {peak_pos}, not at the in-context \
             answer position {attr_pos}",
            instance.known_id
        );

        let attr_ie = (0..result.ie.nrows())
            .map(|l| result.ie[[l, attr_pos]])
            .fold(f64::NEG_INFINITY, f64::max);
        weakest_attr_ie = weakest_attr_ie.min(attr_ie);
        println!(
            "[PASS] record {}: peak IE {:+.4} at layer {peak_layer}, position {peak_pos} \
             (the answer's context slot)",
            instance.known_id,
            result.ie[[peak_layer, peak_pos]]
        );
        results.push(result);
    }

    // Restoring the query subject's last token restores far less than the
    // in-context answer does.
    let lst_aie = aggregate_aie(&results)
        .unwrap()
        .into_iter()
        .filter(|c| c.category == PositionCategory::Lst && c.n > 0)
        .map(|c| c.aie)
        .fold(f64::NEG_INFINITY, f64::max);
    assert!(
        lst_aie < weakest_attr_ie,
        "subject-last-token AIE {lst_aie:+.4} is not below the weakest \
         answer-position IE {weakest_attr_ie:+.4}"
    );

    let elapsed = within_budget(t0, Duration::from_secs(60), "retrieval tracing study");
    println!(
        "[PASS] subject-last-token AIE {lst_aie:+.4} < answer-position IE \
         {weakest_attr_ie:+.4} ({elapsed:.2?})"
    );
}

// ======================================================================
// 7. Corruption noise is the distribution it claims to be
// ======================================================================

#[test]
fn t07_noise_matches_declared_distribution() {
    let t0 = Instant::now();
    let vocab = toy_vocabulary();
    let (model, _) = construct_copy_task_model(&vocab).unwrap();

    // The cached embedding sigma equals a brute-force population std.
    let table = model.embed_tokens();
    let n = (table.nrows() * table.ncols()) as f64;
    let mean: f64 = table.iter().map(|v| *v as f64).sum::<f64>() / n;
    let var: f64 = table.iter().map(|v| (*v as f64 - mean).powi(2)).sum::<f64>() / n;
    let oracle = var.sqrt();
    let sigma = model.embedding_sigma() as f64;
    assert!(
        (sigma - oracle).abs() <= 1e-6,
        "cached sigma {sigma} vs brute-force {oracle}"
    );

    // A 10,000-entry noise sample has the declared moments. The noised
    // matrix starts at zero, so after corruption it *is* the noise tensor.
    let d_model = model.config.d_model;
    let noised_rows = 10_000 / d_model;
    let spec = NoiseSpec::auto(vec![span(0, noised_rows, SpanLabel::Context)], 4242)
        .resolve(&model)
        .unwrap();
    let nu = spec.nu().unwrap() as f64;
    assert!((nu - 3.0 * sigma).abs() <= 1e-9, "nu {nu} is not 3 sigma");

    let mut embeddings = Array2::<f32>::zeros((noised_rows + 15, d_model));
    apply_noise(&mut embeddings, &spec).unwrap();
    let sample: Vec<f64> = embeddings
        .rows()
        .into_iter()
        .take(noised_rows)
        .flat_map(|row| row.to_vec())
        .map(|v| v as f64)
        .collect();
    assert_eq!(sample.len(), 10_000);
    let sample_n = sample.len() as f64;
    let sample_mean = sample.iter().sum::<f64>() / sample_n;
    let sample_std = (sample.iter().map(|v| (v - sample_mean).powi(2)).sum::<f64>()
        / sample_n)
        .sqrt();
    let mean_bound = 3.0 * nu / sample_n.sqrt();
    assert!(
        sample_mean.abs() <= mean_bound,
        "sample mean {sample_mean:.5} outside +/-{mean_bound:.5}"
    );
    assert!(
        (sample_std - nu).abs() <= 0.1 * nu,
        "sample std {sample_std:.5} not within 10% of nu {nu:.5}"
    );

    // Rows outside the span stay untouched.
    for row in noised_rows..embeddings.nrows() {
        assert!(embeddings.row(row).iter().all(|v| *v == 0.0));
    }

    let elapsed = within_budget(t0, Duration::from_secs(10), "noise-distribution check");
    println!(
        "[PASS] noise sample: mean {sample_mean:+.5} (bound {mean_bound:.5}), \
         std {sample_std:.5} vs nu {nu:.5}, sigma matches oracle to {:.1e} ({elapsed:.2?})",
        (sigma - oracle).abs()
    );
}

// ======================================================================
// 8. Dataset fixtures hold their contracts; generation retries as promised
// ======================================================================

fn reply_with_duplicate_answer() -> String {
    serde_json::to_string(&[
        "She was raised in Dublin beside the river.",
        "Dublin features prominently in her early poems.",
        "The family later moved abroad for work.",
        "Critics praised her steady voice.",
        "Readers return to these lines often.",
    ])
    .unwrap()
}

fn reply_valid() -> String {
    serde_json::to_string(&[
        "She was raised in Dublin beside the river.",
        "Her early poems describe quiet streets.",
        "The family later moved abroad for work.",
        "Critics praised her steady voice.",
        "Readers return to these lines often.",
    ])
    .unwrap()
}

#[test]
fn t08_dataset_fixtures_and_generation_contract() {
    let t0 = Instant::now();
    let dir = fixtures_dir();
    let tmp = tempfile::tempdir().unwrap();

    // Fixtures load and validate.
    let facts = load_known_facts(&dir.join("known_facts.json")).unwrap();
    let fact = facts.iter().find(|f| f.known_id == 14).unwrap();
    assert_eq!(fact.subject, "Eavan Boland");
    assert_eq!(fact.prompt, "Eavan Boland was born in");
    for file in ["contexts.json", "toy_contexts.json"] {
        let contexts = load_contexts(&dir.join(file)).unwrap();
        assert!(!contexts.is_empty());
        for context in &contexts {
            let verdict = context.validate(&ValidationOptions::default());
            assert!(
                verdict.valid,
                "{file} record {}: {:?}",
                context.index, verdict.reasons
            );
        }
        // Round-trip byte-identically.
        let copy = tmp.path().join(file);
        save_contexts(&copy, &contexts).unwrap();
        assert_eq!(
            std::fs::read(&copy).unwrap(),
            std::fs::read(dir.join(file)).unwrap(),
            "{file} did not round-trip byte-identically"
        );
    }

    // A doctored duplicate of the answer is rejected with the exact reason.
    let reference = load_contexts(&dir.join("contexts.json")).unwrap();
    let mut segments = reference[0].response.clone();
    segments[2].push_str(" She kept returning to Dublin in later essays.");
    let verdict = validate_context(
        &reference[0].user_query,
        &reference[0].object,
        &segments,
        &ValidationOptions::default(),
    );
    assert!(!verdict.valid);
    assert!(
        verdict.reasons.iter().any(|r| r == "object_count=2"),
        "expected reason object_count=2, got {:?}",
        verdict.reasons
    );

    // Generation accepts on retry: one bad reply burns one attempt.
    let make_client = |replies: Vec<String>| {
        FixtureChatClient::new(BTreeMap::from([("14".to_string(), replies)]))
    };
    let mut client = make_client(vec![reply_with_duplicate_answer(), reply_valid()]);
    let options = GenerationOptions::default();
    let context = generate_context(&mut client, fact, &options).unwrap();
    assert_eq!(context.index, 14);
    assert_eq!(context.response.len(), 5);
    let verdict = context.validate(&ValidationOptions::default());
    assert!(verdict.valid);

    // Generation exhausts its budget exactly: two attempts consume exactly
    // two replies, and the error reports the budget and the last reason.
    let mut client = make_client(vec![
        reply_with_duplicate_answer(),
        reply_with_duplicate_answer(),
        reply_valid(),
    ]);
    let options = GenerationOptions {
        max_attempts: 2,
        ..GenerationOptions::default()
    };
    let err = generate_context(&mut client, fact, &options).unwrap_err();
    match err {
        Error::GenerationFailed {
            known_id,
            attempts,
            ref last_reason,
        } => {
            assert_eq!(known_id, 14);
            assert_eq!(attempts, 2);
            assert!(last_reason.contains("object_count=2"), "{last_reason}");
        }
        other => panic!("expected a generation failure, got {other}"),
    }
    // The third (valid) reply was never consumed; a fresh one-attempt run
    // picks it up and succeeds.
    let options = GenerationOptions {
        max_attempts: 1,
        ..GenerationOptions::default()
    };
    assert!(generate_context(&mut client, fact, &options).is_ok());

    let elapsed = within_budget(t0, Duration::from_secs(5), "dataset contract checks");
    println!(
        "[PASS] fixtures validate and round-trip; duplicate answers rejected; \
         generation retries per contract ({elapsed:.2?})"
    );
}

// ======================================================================
// 9. Reruns with the same configuration are byte-identical
// ======================================================================

fn run_cli(args: &[&str]) -> (i32, Vec<u8>) {
    let output = Command::new(env!("CARGO_BIN_EXE_ragprobe"))
        .args(args)
        .output()
        .expect("spawn the CLI");
    let code = output.status.code().unwrap_or(-1);
    assert_eq!(
        code,
        0,
        "`ragprobe {}` failed:\n{}",
        args.join(" "),
        String::from_utf8_lossy(&output.stderr)
    );
    (code, output.stdout)
}

/// All CSV bytes in a directory, keyed by file name.
fn csv_files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().and_then(|e| e.to_str()) == Some("csv") {
            out.insert(
                path.file_name().unwrap().to_string_lossy().into_owned(),
                std::fs::read(&path).unwrap(),
            );
        }
    }
    out
}

#[test]
fn t09_cli_reruns_are_byte_identical() {
    let t0 = Instant::now();
    let dir = fixtures_dir();
    let tmp = tempfile::tempdir().unwrap();
    let facts = dir.join("known_facts.json");
    let contexts = dir.join("toy_contexts.json");
    let replies = dir.join("chat_replies.json");
    let path = |p: &Path| p.to_str().unwrap().to_string();

    let shared = [
        "--model".to_string(),
        "builtin:copy-task".to_string(),
        "--facts".to_string(),
        path(&facts),
        "--contexts".to_string(),
        path(&contexts),
        "--scenario".to_string(),
        "both".to_string(),
        "--seed".to_string(),
        "45".to_string(),
        "--noise".to_string(),
        "8".to_string(),
        "--workers".to_string(),
        "2".to_string(),
    ];

    let sweeps: Vec<(&str, Vec<String>)> = vec![
        ("trace", vec!["trace".to_string()]),
        (
            "contrib",
            vec![
                "contrib".to_string(),
                "--fraction".to_string(),
                "0.25".to_string(),
                "--agg".to_string(),
                "max".to_string(),
            ],
        ),
        (
            "knockout",
            vec![
                "knockout".to_string(),
                "--window".to_string(),
                "1,2".to_string(),
            ],
        ),
    ];

    for (name, head) in &sweeps {
        let mut outputs = Vec::new();
        for round in ["a", "b"] {
            let out_dir = tmp.path().join(format!("{name}_{round}"));
            let mut args: Vec<String> = head.clone();
            args.extend(shared.iter().cloned());
            args.push("--out".to_string());
            args.push(path(&out_dir));
            let arg_refs: Vec<&str> = args.iter().map(String::as_str).collect();
            let (_, stdout) = run_cli(&arg_refs);
            outputs.push((csv_files(&out_dir), stdout));
        }
        assert!(
            !outputs[0].0.is_empty(),
            "{name} produced no CSV files at all"
        );
        assert_eq!(
            outputs[0].0, outputs[1].0,
            "{name}: CSV outputs differ between identical reruns"
        );
        assert_eq!(
            outputs[0].1, outputs[1].1,
            "{name}: stdout differs between identical reruns"
        );
        println!(
            "[PASS] {name}: {} CSV files byte-identical across reruns",
            outputs[0].0.len()
        );
    }

    // dataset generate writes its context file deterministically too. The
    // two rounds use different output paths, so stdout is compared with the
    // path masked out.
    let mut generated = Vec::new();
    for round in ["a", "b"] {
        let out_contexts = tmp.path().join(format!("generated_{round}.json"));
        let (_, stdout) = run_cli(&[
            "dataset",
            "generate",
            "--facts",
            &path(&facts),
            "--fixtures",
            &path(&replies),
            "--contexts",
            &path(&out_contexts),
        ]);
        let report = String::from_utf8(stdout)
            .unwrap()
            .replace(&path(&out_contexts), "<contexts>");
        generated.push((std::fs::read(&out_contexts).unwrap(), report));
    }
    assert_eq!(generated[0], generated[1], "dataset generate is not reproducible");

    // dataset validate prints the same report every time.
    let mut reports = Vec::new();
    for _ in 0..2 {
        let (_, stdout) = run_cli(&[
            "dataset",
            "validate",
            "--facts",
            &path(&facts),
            "--contexts",
            &path(&contexts),
        ]);
        reports.push(stdout);
    }
    assert_eq!(reports[0], reports[1]);

    let elapsed = within_budget(t0, Duration::from_secs(60), "CLI rerun comparison");
    println!("[PASS] every subcommand reruns byte-identically ({elapsed:.2?})");
}

// ======================================================================
// 10. Grid averaging matches a brute-force oracle
// ======================================================================

#[test]
fn t10_aie_aggregation_matches_brute_force() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(710);
    let n_layers = 3;

    let results: Vec<TraceResult> = (0..40)
        .map(|i| {
            let seq_len = rng.random_range(3..=28usize);
            let start = rng.random_range(0..seq_len);
            let end = rng.random_range(start + 1..=seq_len.min(start + 4));
            let subject = span(start, end, SpanLabel::Subject);
            TraceResult {
                scenario: "synthetic".to_string(),
                known_id: Some(i),
                site: TraceSite::ResidualPost,
                n_layers,
                seq_len,
                answer_token: 0,
                p_clean: 1.0,
                p_corrupt: 0.0,
                flipped: true,
                ie: Array2::from_shape_fn((n_layers, seq_len), |_| {
                    rng.random_range(-1.0..1.0)
                }),
                categories: categorize_positions(seq_len, &subject),
            }
        })
        .collect();

    let cells = aggregate_aie(&results).unwrap();
    assert_eq!(cells.len(), n_layers * PositionCategory::ALL.len());

    let mut worst = 0.0f64;
    for (i, cell) in cells.iter().enumerate() {
        // Cells come out layer-major in the canonical category order.
        assert_eq!(cell.layer, i / PositionCategory::ALL.len());
        assert_eq!(cell.category, PositionCategory::ALL[i % PositionCategory::ALL.len()]);

        // Independent re-derivation: equal-weight mean over the per-prompt
        // means of this category's positions.
        let mut prompt_means = Vec::new();
        for r in &results {
            let values: Vec<f64> = (0..r.seq_len)
                .filter(|p| r.categories[*p] == cell.category)
                .map(|p| r.ie[[cell.layer, p]])
                .collect();
            if !values.is_empty() {
                prompt_means.push(values.iter().sum::<f64>() / values.len() as f64);
            }
        }
        let oracle = if prompt_means.is_empty() {
            0.0
        } else {
            prompt_means.iter().sum::<f64>() / prompt_means.len() as f64
        };
        assert_eq!(cell.n, prompt_means.len());
        let diff = (cell.aie - oracle).abs();
        worst = worst.max(diff);
        assert!(
            diff <= 1e-9,
            "layer {}, category {}: aggregate {:.12} vs oracle {oracle:.12}",
            cell.layer,
            cell.category,
            cell.aie
        );
    }

    let elapsed = within_budget(t0, Duration::from_secs(5), "aggregation oracle");
    println!(
        "[PASS] aggregation matches the brute-force oracle on 40 random grids \
         (worst |diff| = {worst:.2e}; {elapsed:.2?})"
    );
}
