// SPDX-License-Identifier: MIT OR Apache-2.0

//! The dataset pipeline end to end: load fact records, validate contexts
//! against the three dataset constraints, regenerate contexts offline
//! through the fixture chat client, and assemble both prompt forms with
//! resolved token spans.
//!
//! ```text
//! cargo run --example dataset_pipeline
//! ```

use std::path::Path;

use ragprobe::dataset::generate::{generate_context, FixtureChatClient, GenerationOptions};
use ragprobe::dataset::{
    build_prompt, load_contexts, load_known_facts, rag_prompt_text, Scenario, ValidationOptions,
};
use ragprobe::model::toy_vocabulary;

fn main() -> ragprobe::Result<()> {
    let fixtures = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures");
    let facts = load_known_facts(&fixtures.join("known_facts.json"))?;
    println!("loaded {} fact records; first: {:?} -> {:?}", facts.len(), facts[0].prompt, facts[0].attribute);
    println!();

    // Validation: the attribute exactly once, in the first segment, and the
    // query nowhere.
    let options = ValidationOptions::default();
    println!("validating bundled contexts:");
    for ctx in load_contexts(&fixtures.join("toy_contexts.json"))? {
        let verdict = ctx.validate(&options);
        println!(
            "  context {}: valid = {}, mean segment words = {:.1}",
            ctx.index, verdict.valid, verdict.mean_segment_words
        );
    }
    println!();

    // A context that breaks the single-occurrence constraint is rejected
    // with a machine-readable reason.
    let mut broken = load_contexts(&fixtures.join("toy_contexts.json"))?.remove(0);
    broken.response[3] = "Critics praised her steady Dublin voice.".into();
    let verdict = broken.validate(&options);
    println!("doctored context verdict: valid = {}, reasons = {:?}", verdict.valid, verdict.reasons);
    println!();

    // Offline generation: canned replies stand in for a chat model; bad
    // replies burn an attempt, the loop returns the first validated one.
    let mut client = FixtureChatClient::from_file(&fixtures.join("chat_replies.json"))?;
    println!("generating contexts through the fixture client:");
    for fact in &facts {
        let ctx = generate_context(&mut client, fact, &GenerationOptions::default())?;
        println!("  record {}: got 5 segments, first = {:?}", ctx.index, ctx.response[0]);
    }
    println!();

    // Prompt assembly. The retrieval form wraps the query in a fixed
    // scaffold and resolves subject/attribute/context token spans.
    let contexts = load_contexts(&fixtures.join("toy_contexts.json"))?;
    let fact = &facts[0];
    let context = contexts.iter().find(|c| c.index == fact.known_id);
    let vocab = toy_vocabulary();

    let vanilla = build_prompt(&vocab, fact, None, Scenario::Vanilla)?;
    println!(
        "vanilla prompt: {:?} ({} tokens, subject tokens {}..{})",
        vanilla.text,
        vanilla.tokens.len(),
        vanilla.subject_span.start,
        vanilla.subject_span.end
    );

    let rag = build_prompt(&vocab, fact, context, Scenario::Rag)?;
    let attribute = rag.attribute_span.unwrap();
    let context_span = rag.context_span.unwrap();
    println!(
        "retrieval prompt: {} tokens; context tokens {}..{}, in-context answer at {}, subject at {}..{}",
        rag.tokens.len(),
        context_span.start,
        context_span.end,
        attribute.start,
        rag.subject_span.start,
        rag.subject_span.end
    );
    println!();
    let (text, _) = rag_prompt_text(&fact.prompt, &context.unwrap().response);
    println!("rendered retrieval scaffold:\n---\n{text}\n---");
    Ok(())
}
