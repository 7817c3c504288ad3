// SPDX-License-Identifier: MIT OR Apache-2.0

//! Mechanistic probes for how a decoder-only transformer balances what it
//! has memorized against what a retrieved context hands it.
//!
//! The crate bundles a deterministic, fully hookable transformer substrate
//! with the three intervention techniques built on it:
//!
//! * **Causal tracing** — corrupt a span of token embeddings with calibrated
//!   Gaussian noise, then restore clean activations one (layer, position)
//!   cell at a time and measure how much answer probability each cell
//!   recovers.
//! * **Attention contributions** — decompose each attention block's output
//!   at the final position into per-source-token, per-head vectors and rank
//!   sources by contribution norm.
//! * **Attention knockout** — delete individual attention edges exactly (the
//!   masked weight is *zero*, not merely small) and measure the damage.
//!
//! A controlled dataset pipeline (facts, retrieval contexts, validation, and
//! prompt construction) and a handcrafted copy-task model make every number
//! reproducible from scratch; the `ragprobe` binary drives the same code
//! from the command line.
//!
//! ```no_run
//! use ragprobe::model::{construct_copy_task_model, toy_vocabulary, CaptureSpec};
//! use ragprobe::intervention::InterventionPlan;
//!
//! let vocab = toy_vocabulary();
//! let (model, _) = construct_copy_task_model(&vocab)?;
//! let enc = vocab.encode("County Dublin was named after", true);
//! let out = model.forward(&enc.ids, &InterventionPlan::clean(), &CaptureSpec::none())?;
//! assert_eq!(out.argmax, vocab.text_id(" Dublin").unwrap());
//! # Ok::<(), ragprobe::Error>(())
//! ```

pub mod attention;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod intervention;
pub mod model;
pub mod trace;
pub mod tokenizer;

pub use error::{Error, Result};
