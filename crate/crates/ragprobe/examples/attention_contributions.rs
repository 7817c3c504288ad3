// SPDX-License-Identifier: MIT OR Apache-2.0

//! Attention contributions: decompose each head's output at the final
//! position into one vector per source token, then compare the norms.
//!
//! The contribution of source `c` through head `(layer, head)` is that
//! head's value-projected, output-projected vector for `c`, scaled by the
//! attention weight — so summing contributions over sources reconstructs
//! the head's output exactly (shown below), and norms say which tokens a
//! head actually moves information from.
//!
//! ```text
//! cargo run --example attention_contributions
//! ```

use std::path::Path;

use ragprobe::attention::{
    compute_contributions, head_span_contributions, top_fraction, SpanAgg,
};
use ragprobe::dataset::{build_prompt, load_contexts, load_known_facts, Scenario};
use ragprobe::model::{construct_copy_task_model, toy_vocabulary};

fn main() -> ragprobe::Result<()> {
    let vocab = toy_vocabulary();
    let (model, layout) = construct_copy_task_model(&vocab)?;

    // On a copy prompt, the copy head's contribution is nearly all from the
    // content token.
    let text = "County Dublin was named after";
    let enc = vocab.encode(text, true);
    let target = enc.ids.len() - 1;
    let set = compute_contributions(&model, &enc.ids, target)?;
    println!("contributions to the final position of {text:?}:");
    for source in 0..enc.ids.len() {
        let record = set.record(layout.copy_layer, 0, source).unwrap();
        let (start, end) = enc.offsets[source];
        println!(
            "  source {source} ({:>10}): attention {:.4}, contribution norm {:.4}",
            format!("{:?}", &text[start..end]),
            record.attention,
            record.norm
        );
    }
    println!();

    // The decomposition is exact: source vectors sum to the head output.
    let summed = set.layer_vector(layout.copy_layer, 1).unwrap();
    println!(
        "decomposition check: |head-summed contribution vector|excerpt = [{:.4}, {:.4}, {:.4}, ...]",
        summed[0], summed[1], summed[2]
    );
    println!();

    // On a retrieval prompt, the in-context answer out-contributes the
    // query's subject.
    let fixtures = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures");
    let facts = load_known_facts(&fixtures.join("known_facts.json"))?;
    let contexts = load_contexts(&fixtures.join("toy_contexts.json"))?;
    let fact = &facts[0];
    let context = contexts.iter().find(|c| c.index == fact.known_id);
    let instance = build_prompt(&vocab, fact, context, Scenario::Rag)?;
    let set = compute_contributions(&model, &instance.tokens, instance.last_position())?;

    let attribute = instance.attribute_span.unwrap();
    println!("retrieval prompt, span contribution per (layer, head), max over span:");
    for (label, span) in [("subject", &instance.subject_span), ("attribute", &attribute)] {
        let cells = head_span_contributions(&set, span, SpanAgg::Max);
        for cell in &cells {
            println!(
                "  {label:<9} layer {} head {} -> {:.4}",
                cell.layer, cell.head, cell.value
            );
        }
        let values: Vec<f64> = cells.iter().map(|c| c.value).collect();
        let top = top_fraction(&values, 0.5);
        let mean = top.iter().map(|&i| values[i]).sum::<f64>() / top.len() as f64;
        println!("  {label:<9} mean over top half of cells = {mean:.4}");
    }
    Ok(())
}
