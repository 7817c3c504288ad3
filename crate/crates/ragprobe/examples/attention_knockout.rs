// SPDX-License-Identifier: MIT OR Apache-2.0

//! Attention knockout: sever chosen attention edges (their post-softmax
//! weight becomes exactly zero) and measure what the prediction loses.
//!
//! On the built-in copy model the ground truth is known: the final position
//! reads the answer through one attention edge, so cutting that edge
//! collapses the answer probability while cutting anything else barely
//! moves it. A sliding window then localizes the same edge without knowing
//! it in advance.
//!
//! ```text
//! cargo run --example attention_knockout
//! ```

use ragprobe::attention::{run_knockout_experiment, sliding_window_knockout};
use ragprobe::intervention::KnockoutSpec;
use ragprobe::model::{construct_copy_task_model, toy_vocabulary};
use ragprobe::tokenizer::{find_span, Occurrence, SpanLabel};

fn main() -> ragprobe::Result<()> {
    let vocab = toy_vocabulary();
    let (model, _) = construct_copy_task_model(&vocab)?;

    let text = "County Dublin was named after";
    let enc = vocab.encode(text, true);
    let last = enc.ids.len() - 1;
    let answer = vocab.text_id(" Dublin").expect("city token");
    let n_layers = model.config.n_layers;

    let attribute = find_span(text, &enc, "Dublin", Occurrence::First, SpanLabel::Attribute)?;
    let control = find_span(text, &enc, "was", Occurrence::First, SpanLabel::Control)?;

    println!("prompt {text:?}; the answer token sits at position {}", attribute.start);
    for (label, span) in [("answer span", &attribute), ("control span", &control)] {
        let spec = KnockoutSpec::span_to_target(0..n_layers, last, span);
        let outcome = run_knockout_experiment(&model, &enc.ids, answer, &spec)?;
        println!(
            "  knocking {label:<12} p {:.4} -> {:.4} ({:+.2}%)",
            outcome.p_base, outcome.p_knocked, outcome.relative_change_pct
        );
    }
    println!();

    println!("sliding a 1-token knockout window along the prompt:");
    for (start, outcome) in sliding_window_knockout(&model, &enc.ids, answer, 1)? {
        let (byte_start, byte_end) = enc.offsets[start];
        let bar_len = (outcome.relative_change_pct.abs() / 2.0).round() as usize;
        println!(
            "  window at {start} ({:>10}): {:+7.2}% {}",
            format!("{:?}", &text[byte_start..byte_end]),
            outcome.relative_change_pct,
            "#".repeat(bar_len.min(50))
        );
    }
    Ok(())
}
