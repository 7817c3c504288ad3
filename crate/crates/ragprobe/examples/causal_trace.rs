// SPDX-License-Identifier: MIT OR Apache-2.0

//! Causal tracing end to end: corrupt a prompt's informative spans with
//! noise, then restore clean activations one (layer, position) cell at a
//! time and measure how much answer probability each cell recovers.
//!
//! Two runs on the built-in model show the contrast the toolkit exists to
//! measure:
//!
//! * a retrieval-style prompt (context contains the answer) — the indirect
//!   effect concentrates on the in-context answer token, not on the query's
//!   subject;
//! * a parametric-style prompt (answer embedded in the subject itself) —
//!   the effect sits on the subject's last token.
//!
//! ```text
//! cargo run --example causal_trace
//! ```

use std::path::Path;

use ragprobe::dataset::{build_prompt, load_contexts, load_known_facts, Scenario};
use ragprobe::model::{construct_copy_task_model, toy_vocabulary};
use ragprobe::trace::{aggregate_aie, run_trace, TraceConfig, TraceResult};

fn print_grid(result: &TraceResult) {
    println!(
        "  p_clean = {:.4}, p_corrupt = {:.4}, prediction flipped by corruption: {}",
        result.p_clean, result.p_corrupt, result.flipped
    );
    println!("  IE grid (rows = layers, columns = positions; . means |IE| < 0.05):");
    for layer in 0..result.ie.nrows() {
        let mut row = format!("    layer {layer}: ");
        for position in 0..result.ie.ncols() {
            let ie = result.ie[[layer, position]];
            row.push_str(&if ie.abs() < 0.05 {
                "   . ".to_string()
            } else {
                format!("{ie:+.2} ")
            });
        }
        println!("{row}");
    }
    let labels: Vec<&str> = result.categories.iter().map(|c| c.label()).collect();
    println!("  position categories: {labels:?}");
}

fn main() -> ragprobe::Result<()> {
    let fixtures = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures");
    let vocab = toy_vocabulary();
    let (model, _) = construct_copy_task_model(&vocab)?;
    // The handcrafted model's embeddings are small (sigma ~0.30), so the
    // default 3-sigma corruption barely dents its one-hot word signal. Turn
    // the amplitude up until corruption actually flips these prompts —
    // tracing only means something when the corrupted run loses the answer.
    let config = TraceConfig {
        noise_seed: 45,
        std_multiplier: 8.0,
        ..TraceConfig::default()
    };

    // --- Retrieval-style: the answer is in the context ------------------
    let facts = load_known_facts(&fixtures.join("known_facts.json"))?;
    let contexts = load_contexts(&fixtures.join("toy_contexts.json"))?;
    let fact = &facts[0];
    let context = contexts.iter().find(|c| c.index == fact.known_id);
    let rag = build_prompt(&vocab, fact, context, Scenario::Rag)?;
    println!("retrieval prompt for record {} ({} tokens):", fact.known_id, rag.tokens.len());
    let rag_result = run_trace(&model, &rag.trace_request(), &config)?;

    // The grid is wide; summarize instead of printing all positions. The
    // final position is excluded from the peak search: restoring the stream
    // right where the prediction is read off trivially recovers the answer,
    // so only earlier positions say anything about where it came from.
    let attr = rag.attribute_span.unwrap();
    let last = rag_result.ie.ncols() - 1;
    let peak = (0..rag_result.ie.nrows())
        .flat_map(|l| (0..last).map(move |p| (l, p)))
        .max_by(|a, b| rag_result.ie[[a.0, a.1]].total_cmp(&rag_result.ie[[b.0, b.1]]))
        .unwrap();
    println!(
        "  p_clean = {:.4}, p_corrupt = {:.4}; peak IE before the final position = {:+.4} at layer {}, position {}",
        rag_result.p_clean,
        rag_result.p_corrupt,
        rag_result.ie[[peak.0, peak.1]],
        peak.0,
        peak.1
    );
    println!(
        "  in-context answer token sits at position {} (category {}); subject span is {}..{}",
        attr.start,
        rag_result.categories[attr.start].label(),
        rag.subject_span.start,
        rag.subject_span.end
    );
    println!();

    // --- Parametric-style: the answer is inside the subject -------------
    let vanilla_facts = load_known_facts(&fixtures.join("vanilla_facts.json"))?;
    let fact = &vanilla_facts[0];
    let instance = build_prompt(&vocab, fact, None, Scenario::Vanilla)?;
    println!("parametric prompt {:?}:", instance.text);
    let vanilla_result = run_trace(&model, &instance.trace_request(), &config)?;
    print_grid(&vanilla_result);
    println!();

    // --- AIE: averaging grids over prompts, per (layer, category) -------
    let results: Vec<TraceResult> = vanilla_facts
        .iter()
        .map(|fact| {
            let instance = build_prompt(&vocab, fact, None, Scenario::Vanilla)?;
            run_trace(&model, &instance.trace_request(), &config)
        })
        .collect::<ragprobe::Result<_>>()?;
    println!("AIE over {} parametric prompts:", results.len());
    for cell in aggregate_aie(&results)? {
        if cell.aie.abs() >= 0.005 {
            println!(
                "  layer {}, category {:<4} AIE = {:+.4} (n = {})",
                cell.layer,
                cell.category.label(),
                cell.aie,
                cell.n
            );
        }
    }
    Ok(())
}
