// SPDX-License-Identifier: MIT OR Apache-2.0

//! Tokenization and span resolution: greedy longest-match encoding with
//! byte fallback, character-offset bookkeeping, needle-to-token-span
//! mapping with occurrence policies, and the position taxonomy used by
//! trace aggregation.
//!
//! ```text
//! cargo run --example token_spans
//! ```

use ragprobe::model::toy_vocabulary;
use ragprobe::tokenizer::{find_span, Occurrence, SpanLabel};
use ragprobe::trace::categorize_positions;

fn main() -> ragprobe::Result<()> {
    let vocab = toy_vocabulary();

    // Offsets partition the text; unknown characters fall back to bytes.
    let text = "County Dublin was named after";
    let enc = vocab.encode(text, true);
    println!("{text:?} encodes to {} tokens:", enc.ids.len());
    for (id, (start, end)) in enc.ids.iter().zip(&enc.offsets) {
        println!("  id {id:>3}  bytes {start:>2}..{end:<2}  {:?}", &text[*start..*end]);
    }
    println!();

    // A needle maps to the smallest covering token span; policies pick the
    // occurrence. Needles that split a token widen to cover it.
    let span = find_span(text, &enc, "Dublin", Occurrence::First, SpanLabel::Attribute)?;
    println!(
        "span of \"Dublin\": tokens {}..{} covering bytes {}..{} ({:?})",
        span.start, span.end, span.byte_start, span.byte_end,
        &text[span.byte_start..span.byte_end]
    );

    // RequireUnique refuses ambiguous needles instead of guessing.
    let twice = "County Dublin was named after Dublin";
    let enc_twice = vocab.encode(twice, true);
    match find_span(twice, &enc_twice, "Dublin", Occurrence::RequireUnique, SpanLabel::Attribute) {
        Err(e) => println!("ambiguous needle is refused: {e}"),
        Ok(_) => unreachable!("two occurrences cannot be unique"),
    }
    let last = find_span(twice, &enc_twice, "Dublin", Occurrence::Last, SpanLabel::Attribute)?;
    println!("Occurrence::Last picks tokens {}..{}", last.start, last.end);
    println!();

    // The position taxonomy: each position gets exactly one category
    // relative to the subject span (first/middle/last subject token, the
    // token before the subject, further tokens, and the final position).
    let subject = find_span(text, &enc, "County Dublin", Occurrence::First, SpanLabel::Subject)?;
    let categories = categorize_positions(enc.ids.len(), &subject);
    println!("position categories relative to the subject span:");
    for (position, category) in categories.iter().enumerate() {
        let (start, end) = enc.offsets[position];
        println!("  {position}: {:<4} {:?}", category.label(), &text[start..end]);
    }
    Ok(())
}
