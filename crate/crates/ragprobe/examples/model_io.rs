// SPDX-License-Identifier: MIT OR Apache-2.0

//! Save a model and its vocabulary to disk, reload them, and verify the
//! round trip is exact.
//!
//! The on-disk form is a plain-text manifest (`model.manifest`: config keys
//! plus one line per tensor) next to a raw little-endian f32 blob
//! (`weights.bin`), and a one-token-per-line vocabulary file. Everything is
//! byte-stable: saving the same model twice produces identical files, and a
//! reloaded model reproduces the original's logits bit for bit.
//!
//! Run with an optional target directory (default: a temp dir):
//!
//! ```text
//! cargo run --example model_io -- /tmp/toy-model
//! ```

use ragprobe::model::{
    construct_copy_task_model, load_model, save_model, toy_vocabulary, CaptureSpec,
};
use ragprobe::intervention::InterventionPlan;
use ragprobe::tokenizer::Vocabulary;

fn main() -> ragprobe::Result<()> {
    let dir = match std::env::args().nth(1) {
        Some(arg) => std::path::PathBuf::from(arg),
        None => std::env::temp_dir().join("ragprobe-model-io"),
    };
    std::fs::create_dir_all(&dir).map_err(|e| ragprobe::Error::io(&dir, e))?;

    let vocab = toy_vocabulary();
    let (model, _) = construct_copy_task_model(&vocab)?;

    save_model(&model, &dir)?;
    let vocab_path = dir.join("toy.vocab");
    vocab.to_file(&vocab_path)?;
    println!("saved model + vocabulary under {}", dir.display());

    let reloaded = load_model(&dir)?;
    let revocab = Vocabulary::from_file(&vocab_path)?;
    assert_eq!(reloaded.config, model.config);
    assert_eq!(revocab.len(), vocab.len());

    let prompt = "County Dublin was named after";
    let tokens = revocab.encode(prompt, true).ids;
    let before = model.forward(&tokens, &InterventionPlan::clean(), &CaptureSpec::none())?;
    let after = reloaded.forward(&tokens, &InterventionPlan::clean(), &CaptureSpec::none())?;
    assert_eq!(before.logits, after.logits, "reload must be bit-exact");
    assert_eq!(before.argmax, after.argmax);
    println!(
        "round trip verified: {:?} -> {:?} (p = {:.4})",
        prompt,
        revocab.piece(after.argmax),
        after.prob(after.argmax)
    );
    Ok(())
}
