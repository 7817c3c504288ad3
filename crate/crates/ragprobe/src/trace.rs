// SPDX-License-Identifier: MIT OR Apache-2.0

//! Causal tracing: locate where a model's answer is decided.
//!
//! The protocol runs the model three ways:
//!
//! 1. **clean** — the unmodified prompt; activations at the chosen site are
//!    recorded everywhere;
//! 2. **corrupted** — calibrated Gaussian noise is added to the token
//!    embeddings of the corruption spans, typically destroying the answer;
//! 3. **corrupted-with-restoration** — the corrupted run again, but with the
//!    clean activation restored at one (layer, position) cell (widened to a
//!    window of neighboring layers for block-output sites).
//!
//! The indirect effect of a cell is the answer probability it recovers:
//! `IE = p_restored − p_corrupted`. Sweeping all cells yields a grid whose
//! hot spots are the states that causally carry the answer.
//!
//! Grids from many prompts are averaged per *position category* (first /
//! middle / last subject token, first subsequent, last, elsewhere), since
//! absolute positions are not comparable across prompts.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::intervention::{InterventionPlan, NoiseSpec, SigmaSpec};
use crate::model::{CaptureSpec, HookSite, SiteKind, TransformerModel};
use crate::tokenizer::TokenSpan;

// ======================================================================
// Configuration
// ======================================================================

/// Residual-stream sites a trace can restore.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceSite {
    /// The residual stream after a full layer. Restoring it is exact, so the
    /// default window is a single layer.
    ResidualPost,
    /// The attention block's output. Individually small; the default window
    /// restores a 10-layer neighborhood so band structure shows up.
    AttnOut,
    /// The MLP block's output, windowed like [`TraceSite::AttnOut`].
    MlpOut,
}

impl TraceSite {
    pub fn kind(self) -> SiteKind {
        match self {
            TraceSite::ResidualPost => SiteKind::ResidualPost,
            TraceSite::AttnOut => SiteKind::AttnOut,
            TraceSite::MlpOut => SiteKind::MlpOut,
        }
    }

    /// Default window radius: 0 (exact single layer) for the residual
    /// stream, 5 (a 10-layer window) for block outputs.
    pub fn default_radius(self) -> usize {
        match self {
            TraceSite::ResidualPost => 0,
            TraceSite::AttnOut | TraceSite::MlpOut => 5,
        }
    }
}

impl std::fmt::Display for TraceSite {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            TraceSite::ResidualPost => "residual_post",
            TraceSite::AttnOut => "attn_out",
            TraceSite::MlpOut => "mlp_out",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for TraceSite {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "residual_post" => Ok(TraceSite::ResidualPost),
            "attn_out" => Ok(TraceSite::AttnOut),
            "mlp_out" => Ok(TraceSite::MlpOut),
            other => Err(Error::Config(format!(
                "unknown trace site `{other}` (expected residual_post, attn_out, or mlp_out)"
            ))),
        }
    }
}

/// Which token counts as "the answer" whose probability the trace follows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnswerPolicy {
    /// The clean run's greedy prediction.
    CleanArgmax,
    /// A caller-chosen token (e.g. the first token of a dataset attribute).
    Token(u32),
}

/// Tracing parameters.
#[derive(Debug, Clone)]
pub struct TraceConfig {
    pub site: TraceSite,
    /// Restoration window radius; `None` takes the site default. Radius 0
    /// restores exactly layer `l`; radius `r > 0` restores the half-open
    /// layer window `[l − r, l + r)` clipped to the model.
    pub window_radius: Option<usize>,
    pub noise_seed: u64,
    /// Noise amplitude in embedding-sigma units.
    pub std_multiplier: f32,
    pub sigma: SigmaSpec,
}

impl Default for TraceConfig {
    fn default() -> Self {
        TraceConfig {
            site: TraceSite::ResidualPost,
            window_radius: None,
            noise_seed: 11,
            std_multiplier: 3.0,
            sigma: SigmaSpec::Auto,
        }
    }
}

impl TraceConfig {
    pub fn for_site(site: TraceSite) -> Self {
        TraceConfig {
            site,
            ..TraceConfig::default()
        }
    }

    pub fn effective_radius(&self) -> usize {
        self.window_radius.unwrap_or_else(|| self.site.default_radius())
    }
}

/// The half-open layer window a restoration at `layer` covers.
pub fn restoration_window(layer: usize, n_layers: usize, radius: usize) -> std::ops::Range<usize> {
    if radius == 0 {
        layer..layer + 1
    } else {
        layer.saturating_sub(radius)..(layer + radius).min(n_layers)
    }
}

// ======================================================================
// Position categories
// ======================================================================

/// Prompt-length-independent position classes used to average trace grids
/// across prompts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum PositionCategory {
    /// First subject token.
    #[serde(rename = "FST")]
    Fst,
    /// Middle subject tokens.
    #[serde(rename = "MST")]
    Mst,
    /// Last subject token.
    #[serde(rename = "LST")]
    Lst,
    /// First token after the subject.
    #[serde(rename = "FSST")]
    Fsst,
    /// Any other token (everything before the subject and the rest of the
    /// tail, including retrieved context).
    #[serde(rename = "FT")]
    Ft,
    /// Last token of the sequence.
    #[serde(rename = "LT")]
    Lt,
}

impl PositionCategory {
    pub const ALL: [PositionCategory; 6] = [
        PositionCategory::Fst,
        PositionCategory::Mst,
        PositionCategory::Lst,
        PositionCategory::Fsst,
        PositionCategory::Ft,
        PositionCategory::Lt,
    ];

    pub fn label(self) -> &'static str {
        match self {
            PositionCategory::Fst => "FST",
            PositionCategory::Mst => "MST",
            PositionCategory::Lst => "LST",
            PositionCategory::Fsst => "FSST",
            PositionCategory::Ft => "FT",
            PositionCategory::Lt => "LT",
        }
    }
}

impl std::fmt::Display for PositionCategory {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

/// Assign every position exactly one category. Precedence when classes
/// collide (short prompts, subject at the very end):
/// LT > LST > FST > MST > FSST > FT.
pub fn categorize_positions(seq_len: usize, subject: &TokenSpan) -> Vec<PositionCategory> {
    (0..seq_len)
        .map(|pos| {
            if pos == seq_len - 1 {
                PositionCategory::Lt
            } else if pos + 1 == subject.end {
                PositionCategory::Lst
            } else if pos == subject.start {
                PositionCategory::Fst
            } else if subject.contains(pos) {
                PositionCategory::Mst
            } else if pos == subject.end {
                PositionCategory::Fsst
            } else {
                PositionCategory::Ft
            }
        })
        .collect()
}

// ======================================================================
// Tracing
// ======================================================================

/// One prompt to trace.
#[derive(Debug, Clone)]
pub struct TraceRequest {
    pub tokens: Vec<u32>,
    /// Subject span (drives position categories).
    pub subject_span: TokenSpan,
    /// Spans whose token embeddings are corrupted. For plain prompts this is
    /// the subject; for retrieval prompts, context and subject together.
    pub corrupt_spans: Vec<TokenSpan>,
    pub answer: AnswerPolicy,
    /// Free-form scenario label carried into results (e.g. "vanilla", "rag").
    pub scenario: String,
    /// Dataset record id, if the prompt came from one.
    pub known_id: Option<u64>,
}

/// A traced grid for one prompt.
#[derive(Debug, Clone)]
pub struct TraceResult {
    pub scenario: String,
    pub known_id: Option<u64>,
    pub site: TraceSite,
    pub n_layers: usize,
    pub seq_len: usize,
    pub answer_token: u32,
    pub p_clean: f64,
    pub p_corrupt: f64,
    /// Whether corruption changed the greedy prediction away from the answer.
    pub flipped: bool,
    /// `ie[[layer, position]] = p_restored − p_corrupt`.
    pub ie: Array2<f64>,
    pub categories: Vec<PositionCategory>,
}

/// Run the full three-stage protocol for one prompt.
pub fn run_trace(
    model: &TransformerModel,
    request: &TraceRequest,
    config: &TraceConfig,
) -> Result<TraceResult> {
    let n_layers = model.config.n_layers;
    let seq = request.tokens.len();
    if request.corrupt_spans.is_empty() {
        return Err(Error::Analysis(
            "a trace needs at least one corruption span".into(),
        ));
    }
    if request.subject_span.end > seq || request.subject_span.token_len() == 0 {
        return Err(Error::Analysis(format!(
            "subject span {:?}..{:?} outside prompt of {seq} tokens",
            request.subject_span.start, request.subject_span.end
        )));
    }

    let mut noise = NoiseSpec::auto(request.corrupt_spans.clone(), config.noise_seed)
        .with_multiplier(config.std_multiplier);
    noise.sigma = config.sigma;

    // Stage 1: clean run, capturing the restoration site everywhere.
    let site_kind = config.site.kind();
    let capture = CaptureSpec::all_positions(site_kind, n_layers, seq);
    let clean = model.forward(&request.tokens, &InterventionPlan::clean(), &capture)?;
    let answer_token = match request.answer {
        AnswerPolicy::CleanArgmax => clean.argmax,
        AnswerPolicy::Token(t) => {
            if t as usize >= model.config.vocab_size {
                return Err(Error::TokenOutOfRange {
                    token: t,
                    vocab_size: model.config.vocab_size,
                });
            }
            t
        }
    };
    let p_clean = clean.prob(answer_token);
    if p_clean <= 0.0 {
        return Err(Error::Analysis(format!(
            "clean probability of tracked token {answer_token} is zero; \
             nothing to restore"
        )));
    }

    // Stage 2: corrupted run.
    let corrupt_plan = InterventionPlan::with_noise(noise.clone());
    let corrupted = model.forward(&request.tokens, &corrupt_plan, &CaptureSpec::none())?;
    let p_corrupt = corrupted.prob(answer_token);
    let flipped = corrupted.argmax != answer_token;

    // Stage 3: restore one cell at a time. The noise spec is identical in
    // every run (same seed, same spans), so restored cells are the only
    // difference against stage 2.
    let radius = config.effective_radius();
    let mut ie = Array2::<f64>::zeros((n_layers, seq));
    for layer in 0..n_layers {
        for pos in 0..seq {
            let mut plan = InterventionPlan::with_noise(noise.clone());
            for w in restoration_window(layer, n_layers, radius) {
                let site = HookSite::new(w, site_kind, pos);
                let value = clean
                    .captured
                    .get(&site)
                    .expect("clean run captured every site cell")
                    .clone();
                plan.add_patch(site, value);
            }
            let restored = model.forward(&request.tokens, &plan, &CaptureSpec::none())?;
            ie[[layer, pos]] = restored.prob(answer_token) - p_corrupt;
        }
    }

    Ok(TraceResult {
        scenario: request.scenario.clone(),
        known_id: request.known_id,
        site: config.site,
        n_layers,
        seq_len: seq,
        answer_token,
        p_clean,
        p_corrupt,
        flipped,
        ie,
        categories: categorize_positions(seq, &request.subject_span),
    })
}

// ======================================================================
// Aggregation
// ======================================================================

/// One (layer, category) cell of an averaged grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AieCell {
    pub layer: usize,
    pub category: PositionCategory,
    /// Average indirect effect: each prompt first averages its own positions
    /// of this category at this layer, then prompts average with equal
    /// weight.
    pub aie: f64,
    /// Number of prompts that had at least one position of this category.
    pub n: usize,
}

/// Average trace grids over prompts, per layer and position category.
///
/// Prompts contribute equally regardless of length: within a prompt the
/// positions of a category are averaged first, and only prompts that contain
/// the category count toward its `n`.
pub fn aggregate_aie(results: &[TraceResult]) -> Result<Vec<AieCell>> {
    let first = results
        .first()
        .ok_or_else(|| Error::Analysis("cannot aggregate zero trace results".into()))?;
    let n_layers = first.n_layers;
    for r in results {
        if r.n_layers != n_layers {
            return Err(Error::Analysis(format!(
                "trace results disagree on layer count: {} vs {n_layers}",
                r.n_layers
            )));
        }
    }

    let mut cells = Vec::with_capacity(n_layers * PositionCategory::ALL.len());
    for layer in 0..n_layers {
        for category in PositionCategory::ALL {
            let mut sum = 0.0f64;
            let mut n = 0usize;
            for r in results {
                let positions: Vec<usize> = (0..r.seq_len)
                    .filter(|p| r.categories[*p] == category)
                    .collect();
                if positions.is_empty() {
                    continue;
                }
                let prompt_mean: f64 = positions
                    .iter()
                    .map(|p| r.ie[[layer, *p]])
                    .sum::<f64>()
                    / positions.len() as f64;
                sum += prompt_mean;
                n += 1;
            }
            cells.push(AieCell {
                layer,
                category,
                aie: if n > 0 { sum / n as f64 } else { 0.0 },
                n,
            });
        }
    }
    Ok(cells)
}

// ======================================================================
// Tests
// ======================================================================
