// SPDX-License-Identifier: MIT OR Apache-2.0

//! A tour of the built-in handcrafted model: a 2-layer, 1-head transformer
//! wired by construction (not training) to copy a marked "content" token
//! into its prediction.
//!
//! Layer 0 is an exact no-op. Layer 1's head attends from the final position
//! to whichever earlier token carries the content flag (the four city
//! tokens), copies that city's identity dimensions into the residual stream,
//! and the unembedding turns them back into the city token. Because the
//! mechanism is legible by design, every analysis in this crate has a known
//! ground truth on it.
//!
//! ```text
//! cargo run --example copy_task_tour
//! ```

use ragprobe::intervention::InterventionPlan;
use ragprobe::model::{
    canonical_copy_prompts, construct_copy_task_model, toy_vocabulary, CaptureSpec, HookSite,
    SiteKind,
};

fn main() -> ragprobe::Result<()> {
    let vocab = toy_vocabulary();
    let (model, layout) = construct_copy_task_model(&vocab)?;
    println!(
        "model: {} layers, {} head(s), d_model {}, copy head in layer {}",
        model.config.n_layers, model.config.n_heads, model.config.d_model, layout.copy_layer
    );
    println!();

    // The model copies: each prompt embeds its answer as a content-flagged
    // token, and the final position's head finds it.
    println!("prompts the model can answer (the answer is on the page):");
    for (prompt, answer) in canonical_copy_prompts() {
        let enc = vocab.encode(&prompt, true);
        let out = model.forward(&enc.ids, &InterventionPlan::clean(), &CaptureSpec::none())?;
        let answer_id = vocab.text_id(&answer).expect("answer is a vocab word");
        let attn = &out.attention_weights[layout.copy_layer];
        let last = enc.ids.len() - 1;
        let (best_src, best_w) = (0..enc.ids.len())
            .map(|s| (s, attn[[0, last, s]]))
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap();
        println!(
            "  {prompt:<32} p({answer:?}) = {:.4}   copy head looks at token {} with weight {:.4}",
            out.prob(answer_id),
            best_src,
            best_w
        );
    }
    println!();

    // A prompt whose answer is NOT on the page: the model has no stored
    // fact to fall back on, so no city is confidently predicted.
    println!("a prompt the model cannot answer (nothing to copy):");
    let prompt = "Eavan Boland was born in";
    let enc = vocab.encode(prompt, true);
    let out = model.forward(&enc.ids, &InterventionPlan::clean(), &CaptureSpec::none())?;
    for (city, id) in &layout.city_tokens {
        println!("  p({city:?}) = {:.4}", out.prob(*id));
    }
    println!();

    // Layer 0 really is a no-op: the residual stream is bitwise unchanged.
    let tokens = vocab.encode("County Dublin was named after", true).ids;
    let capture = CaptureSpec::none()
        .with_site(HookSite::new(0, SiteKind::ResidualPre, 0))
        .with_site(HookSite::new(0, SiteKind::ResidualPost, 0));
    let out = model.forward(&tokens, &InterventionPlan::clean(), &capture)?;
    let pre = &out.captured[&HookSite::new(0, SiteKind::ResidualPre, 0)];
    let post = &out.captured[&HookSite::new(0, SiteKind::ResidualPost, 0)];
    println!(
        "layer 0 no-op check at position 0: pre == post is {}",
        pre == post
    );
    Ok(())
}
