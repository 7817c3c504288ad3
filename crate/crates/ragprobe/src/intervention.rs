// SPDX-License-Identifier: MIT OR Apache-2.0

//! Interventions on a forward pass: embedding corruption, attention-edge
//! knockouts, and activation patches.
//!
//! All three compose into an [`InterventionPlan`], which the model applies in
//! a fixed order: **corruption → knockout masks → patches**. A plan plus a
//! seed fully determines a run, and plans serialize to JSON so an experiment
//! can be replayed exactly.
//!
//! Noise follows the classic corrupted-run recipe: spherical Gaussian with
//! width `ν = std_multiplier × σ`, where `σ` is the standard deviation of the
//! token-embedding table (see [`resolve_sigma`]). Knockouts zero attention
//! edges by setting the pre-softmax score to the most negative finite `f32`
//! ([`ATTENTION_MASK_VALUE`]): after max-subtraction the exponential
//! underflows to exactly `0.0`, so knocked edges carry *exactly* zero weight
//! and the rest of the row renormalizes.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{HookSite, ModelConfig, SiteKind, TransformerModel};
use crate::tokenizer::TokenSpan;

/// Pre-softmax score written into masked attention edges (causal or knocked).
///
/// The most negative *finite* `f32` rather than `-inf`: subtracting the row
/// maximum keeps the value finite (no NaN from `-inf - -inf` in degenerate
/// rows), while `exp` still underflows to exactly zero.
pub const ATTENTION_MASK_VALUE: f32 = f32::MIN;

// ======================================================================
// Noise
// ======================================================================

/// Where the Gaussian width comes from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum SigmaSpec {
    /// Use the owning model's cached embedding-table sigma.
    Auto,
    /// An explicit, already-resolved sigma (strictly positive).
    Fixed(f32),
}

/// Spherical Gaussian corruption of token embeddings over a set of spans.
///
/// The noise tensor is a pure function of `(seed, spans, ν)`: re-running the
/// same spec reproduces the same corruption bit-for-bit. In particular, all
/// restoration runs of a tracing sweep share one fixed corruption — the
/// corrupted baseline never shifts underneath the patches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    /// Token spans to corrupt. May be non-contiguous (e.g. context ∪ subject);
    /// spans must not overlap.
    pub spans: Vec<TokenSpan>,
    /// Multiplier on sigma; the classic recipe uses 3.
    pub std_multiplier: f32,
    pub seed: u64,
    pub sigma: SigmaSpec,
}

impl NoiseSpec {
    /// Noise with automatic sigma (resolved against the model at run time).
    pub fn auto(spans: Vec<TokenSpan>, seed: u64) -> Self {
        NoiseSpec {
            spans,
            std_multiplier: 3.0,
            seed,
            sigma: SigmaSpec::Auto,
        }
    }

    /// Noise with an explicit sigma. Rejects non-positive values — a zero
    /// sigma (e.g. a degenerate all-equal embedding table) cannot corrupt
    /// anything and almost certainly signals a setup bug.
    pub fn with_fixed_sigma(spans: Vec<TokenSpan>, seed: u64, sigma: f32) -> Result<Self> {
        if !(sigma > 0.0) {
            return Err(Error::SigmaNotPositive { sigma });
        }
        Ok(NoiseSpec {
            spans,
            std_multiplier: 3.0,
            seed,
            sigma: SigmaSpec::Fixed(sigma),
        })
    }

    pub fn with_multiplier(mut self, std_multiplier: f32) -> Self {
        self.std_multiplier = std_multiplier;
        self
    }

    /// Replace an `Auto` sigma with the model's cached embedding sigma.
    pub fn resolve(&self, model: &TransformerModel) -> Result<NoiseSpec> {
        let sigma = match self.sigma {
            SigmaSpec::Fixed(s) => s,
            SigmaSpec::Auto => model.embedding_sigma(),
        };
        if !(sigma > 0.0) {
            return Err(Error::SigmaNotPositive { sigma });
        }
        Ok(NoiseSpec {
            sigma: SigmaSpec::Fixed(sigma),
            ..self.clone()
        })
    }

    /// Effective Gaussian width `ν`. Errors if sigma is still `Auto`.
    pub fn nu(&self) -> Result<f32> {
        match self.sigma {
            SigmaSpec::Auto => Err(Error::SigmaUnresolved),
            SigmaSpec::Fixed(s) => {
                let nu = self.std_multiplier * s;
                if !(nu > 0.0) {
                    return Err(Error::SigmaNotPositive { sigma: nu });
                }
                Ok(nu)
            }
        }
    }

    /// All corrupted token positions, ascending.
    pub fn positions(&self) -> BTreeSet<usize> {
        self.spans.iter().flat_map(|s| s.positions()).collect()
    }
}

/// Population standard deviation over the entries of the token-embedding
/// table, restricted to `sample` rows when given (all rows otherwise).
///
/// This is the flat std over *scalars*: every entry of every selected row
/// pools into one distribution. Accumulation runs in f64.
pub fn resolve_sigma(model: &TransformerModel, sample: Option<&[u32]>) -> Result<f32> {
    let table = model.embed_tokens();
    let rows: Vec<usize> = match sample {
        None => (0..table.nrows()).collect(),
        Some(ids) => {
            let mut rows = Vec::with_capacity(ids.len());
            for &id in ids {
                if id as usize >= table.nrows() {
                    return Err(Error::TokenOutOfRange {
                        token: id,
                        vocab_size: table.nrows(),
                    });
                }
                rows.push(id as usize);
            }
            rows
        }
    };
    if rows.is_empty() {
        return Err(Error::Analysis("sigma over an empty sample".into()));
    }
    let n = (rows.len() * table.ncols()) as f64;
    let mut sum = 0.0f64;
    let mut sum_sq = 0.0f64;
    for &r in &rows {
        for &x in table.row(r) {
            let x = x as f64;
            sum += x;
            sum_sq += x * x;
        }
    }
    let mean = sum / n;
    let var = (sum_sq / n - mean * mean).max(0.0);
    Ok(var.sqrt() as f32)
}

/// Add the spec's Gaussian corruption to an embedding matrix in place.
///
/// `embeddings` is `[seq_len × d_model]`. The spec must already carry a fixed
/// sigma (`Auto` errors with [`Error::SigmaUnresolved`]). Corruption is
/// sampled position-ascending, dimension-ascending from a ChaCha8 stream
/// seeded with `spec.seed`, so the noise tensor is reproducible and
/// independent of span listing order.
pub fn apply_noise(embeddings: &mut Array2<f32>, spec: &NoiseSpec) -> Result<()> {
    let nu = spec.nu()?;
    let seq_len = embeddings.nrows();
    let positions = spec.positions();
    if let Some(&max) = positions.iter().next_back() {
        if max >= seq_len {
            return Err(Error::PlanOutOfRange(format!(
                "noise span position {max} outside sequence of length {seq_len}"
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let normal = Normal::new(0.0f32, nu).expect("nu validated positive and finite");
    for pos in positions {
        for d in 0..embeddings.ncols() {
            embeddings[[pos, d]] += normal.sample(&mut rng);
        }
    }
    Ok(())
}

// ======================================================================
// Knockout
// ======================================================================

/// One attention edge to sever: at `layer`, stop row `source` from attending
/// to column `target` (for every head). Causality requires `target ≤ source`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct KnockoutEdge {
    pub layer: usize,
    pub source: usize,
    pub target: usize,
}

/// A set of attention edges to knock out.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnockoutSpec {
    pub edges: Vec<KnockoutEdge>,
}

impl KnockoutSpec {
    pub fn new(edges: Vec<KnockoutEdge>) -> Self {
        KnockoutSpec { edges }
    }

    /// Edges severing `source → every position of span` across `layers`.
    pub fn span_to_target(layers: std::ops::Range<usize>, source: usize, span: &TokenSpan) -> Self {
        let mut edges = Vec::new();
        for layer in layers {
            for target in span.positions() {
                edges.push(KnockoutEdge {
                    layer,
                    source,
                    target,
                });
            }
        }
        KnockoutSpec { edges }
    }

    /// Check causality, ranges, and that no attention row loses every
    /// visible source.
    pub fn validate(&self, n_layers: usize, seq_len: usize) -> Result<()> {
        let mut per_row: BTreeMap<(usize, usize), BTreeSet<usize>> = BTreeMap::new();
        for e in &self.edges {
            if e.layer >= n_layers || e.source >= seq_len || e.target >= seq_len {
                return Err(Error::PlanOutOfRange(format!(
                    "knockout edge (layer {}, source {}, target {}) outside model \
                     ({n_layers} layers, seq_len {seq_len})",
                    e.layer, e.source, e.target
                )));
            }
            if e.target > e.source {
                return Err(Error::AntiCausalEdge {
                    layer: e.layer,
                    source_pos: e.source,
                    target: e.target,
                });
            }
            per_row
                .entry((e.layer, e.source))
                .or_default()
                .insert(e.target);
        }
        for ((layer, row), targets) in per_row {
            // Visible sources for `row` are 0..=row.
            if targets.len() == row + 1 {
                return Err(Error::RowFullyMasked { layer, row });
            }
        }
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }
}

/// Apply the spec's edges for one layer to a pre-softmax score tensor
/// `[heads × seq × seq]`, returning the masked copy.
///
/// Knocked entries are set to [`ATTENTION_MASK_VALUE`] in every head, so the
/// subsequent row softmax gives them exactly zero weight and redistributes
/// the mass over the surviving entries.
pub fn knockout_scores(
    scores: &Array3<f32>,
    spec: &KnockoutSpec,
    layer: usize,
) -> Result<Array3<f32>> {
    let (heads, seq, _) = scores.dim();
    // Validate just the edges this call applies; the spec may also hold
    // edges for other layers.
    let applied: Vec<KnockoutEdge> = spec
        .edges
        .iter()
        .filter(|e| e.layer == layer)
        .cloned()
        .collect();
    KnockoutSpec::new(applied.clone()).validate(layer + 1, seq)?;
    let mut out = scores.clone();
    for e in &applied {
        for h in 0..heads {
            out[[h, e.source, e.target]] = ATTENTION_MASK_VALUE;
        }
    }
    Ok(out)
}

// ======================================================================
// Patches
// ======================================================================

/// Overwrite one activation slice with a stored value (typically captured
/// from a named prior run, e.g. the clean run of a tracing sweep).
///
/// For stream sites the value is a `[d_model]` vector; for
/// [`SiteKind::AttnScores`] it is the full pre-softmax row of the source
/// position across heads, `[n_heads × seq_len]` flattened head-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchSpec {
    pub site: HookSite,
    pub value: Vec<f32>,
}

// ======================================================================
// Plan
// ======================================================================

/// Everything to do to one forward pass. An empty plan is a clean run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct InterventionPlan {
    pub noise: Option<NoiseSpec>,
    pub knockout: Option<KnockoutSpec>,
    pub patches: Vec<PatchSpec>,
}

impl InterventionPlan {
    pub fn clean() -> Self {
        InterventionPlan::default()
    }

    pub fn with_noise(noise: NoiseSpec) -> Self {
        InterventionPlan {
            noise: Some(noise),
            ..Default::default()
        }
    }

    pub fn with_knockout(knockout: KnockoutSpec) -> Self {
        InterventionPlan {
            knockout: Some(knockout),
            ..Default::default()
        }
    }

    pub fn add_patch(&mut self, site: HookSite, value: Vec<f32>) {
        self.patches.push(PatchSpec { site, value });
    }

    pub fn is_clean(&self) -> bool {
        self.noise.is_none() && self.knockout.is_none() && self.patches.is_empty()
    }

    /// Validate every component against a model shape and sequence length.
    pub fn validate(&self, config: &ModelConfig, seq_len: usize) -> Result<()> {
        if let Some(noise) = &self.noise {
            if !(noise.std_multiplier > 0.0) {
                return Err(Error::SigmaNotPositive {
                    sigma: noise.std_multiplier,
                });
            }
            let mut spans: Vec<&TokenSpan> = noise.spans.iter().collect();
            spans.sort_by_key(|s| s.start);
            for w in spans.windows(2) {
                if w[1].start < w[0].end {
                    return Err(Error::PlanOutOfRange(format!(
                        "noise spans overlap at token {}",
                        w[1].start
                    )));
                }
            }
            for s in spans {
                if s.start >= s.end || s.end > seq_len {
                    return Err(Error::PlanOutOfRange(format!(
                        "noise span [{}, {}) outside sequence of length {seq_len}",
                        s.start, s.end
                    )));
                }
            }
        }
        if let Some(knockout) = &self.knockout {
            knockout.validate(config.n_layers, seq_len)?;
        }
        let mut seen: BTreeSet<HookSite> = BTreeSet::new();
        for patch in &self.patches {
            let site = patch.site;
            site.validate(config, seq_len)?;
            if !seen.insert(site) {
                return Err(Error::ConflictingPatch {
                    site: format!("{site:?}"),
                });
            }
            let expected = match site.site {
                SiteKind::AttnScores => config.n_heads * seq_len,
                _ => config.d_model,
            };
            if patch.value.len() != expected {
                return Err(Error::PlanOutOfRange(format!(
                    "patch at {site:?} carries {} values, site expects {expected}",
                    patch.value.len()
                )));
            }
        }
        Ok(())
    }

    /// Serialize to the JSON replay format.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan serialization cannot fail")
    }

    /// Parse a plan from the JSON replay format.
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Analysis(format!("bad plan json: {e}")))
    }
}

// ======================================================================
// Tests
// ======================================================================
