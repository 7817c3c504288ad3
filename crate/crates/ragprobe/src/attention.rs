// SPDX-License-Identifier: MIT OR Apache-2.0

//! Attention analysis: what does each source token *write* into a target
//! position, and what happens when an edge is deleted?
//!
//! **Contributions.** For a target position `T`, head `h` of layer `l`
//! writes `Σ_c A[T,c] · (ln1(x_c) W_V^h) W_O^h` into the residual stream —
//! a sum of per-source vectors. Each source's vector norm measures how much
//! that token contributes through that head, combining attention weight and
//! value magnitude in the units that actually hit the stream. The vectors
//! are computed from the same forward pass being analyzed (captured
//! residuals, captured attention), so they sum back to the block's real
//! output — an identity the tests pin down.
//!
//! **Knockouts.** Deleting an edge sets its pre-softmax score to the mask
//! sentinel in every head, giving it exactly zero weight; the damage is the
//! change in answer probability. A contribution norm is correlational; the
//! knockout is the causal check of the same edge.

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::intervention::{InterventionPlan, KnockoutEdge, KnockoutSpec};
use crate::model::{CaptureSpec, HookSite, SiteKind, TransformerModel};
use crate::tokenizer::TokenSpan;

// ======================================================================
// Contributions
// ======================================================================

/// One (layer, head, source) contribution into `target`'s residual stream.
#[derive(Debug, Clone)]
pub struct ContributionRecord {
    pub layer: usize,
    pub head: usize,
    /// The attended-to position.
    pub source: usize,
    /// The attending position the contribution lands on.
    pub target: usize,
    /// The post-softmax attention weight on this edge.
    pub attention: f64,
    /// L2 norm of the contribution vector.
    pub norm: f64,
    /// The full `[d_model]` contribution vector (attention-weighted,
    /// output-projected value).
    pub vector: Vec<f32>,
}

/// All contributions into one target position.
#[derive(Debug, Clone)]
pub struct ContributionSet {
    pub target: usize,
    pub seq_len: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Ordered by (layer, head, source); sources run `0..=target` (causal).
    pub records: Vec<ContributionRecord>,
}

impl ContributionSet {
    pub fn record(&self, layer: usize, head: usize, source: usize) -> Option<&ContributionRecord> {
        self.records
            .iter()
            .find(|r| r.layer == layer && r.head == head && r.source == source)
    }

    /// Vector sum over heads for one (layer, source): the full write this
    /// source makes into the target's stream at this layer (bias excluded).
    pub fn layer_vector(&self, layer: usize, source: usize) -> Option<Array1<f32>> {
        let mut sum: Option<Array1<f32>> = None;
        for r in &self.records {
            if r.layer == layer && r.source == source {
                let v = Array1::from_vec(r.vector.clone());
                sum = Some(match sum {
                    Some(acc) => acc + v,
                    None => v,
                });
            }
        }
        sum
    }
}

/// Decompose the attention output at `target` into per-source contributions,
/// for every layer and head, using a clean forward pass.
pub fn compute_contributions(
    model: &TransformerModel,
    tokens: &[u32],
    target: usize,
) -> Result<ContributionSet> {
    let c = &model.config;
    let seq = tokens.len();
    if target >= seq {
        return Err(Error::Analysis(format!(
            "contribution target {target} outside sequence of length {seq}"
        )));
    }

    // One pass captures everything needed: the residual entering each layer
    // (for values) and the attention weights (for edge strengths).
    let capture = CaptureSpec::all_positions(SiteKind::ResidualPre, c.n_layers, seq);
    let out = model.forward(tokens, &InterventionPlan::clean(), &capture)?;

    let mut records = Vec::with_capacity(c.n_layers * c.n_heads * (target + 1));
    for layer in 0..c.n_layers {
        let lw = model.layer(layer);
        // Reassemble ln1 of the residual rows this layer actually saw.
        let mut x = ndarray::Array2::<f32>::zeros((target + 1, c.d_model));
        for source in 0..=target {
            let row = &out.captured[&HookSite::new(layer, SiteKind::ResidualPre, source)];
            for (d, v) in row.iter().enumerate() {
                x[[source, d]] = *v;
            }
        }
        let h1 = TransformerModel::layer_norm(&x, &lw.ln1_scale, &lw.ln1_bias);
        let v_full = h1.dot(&lw.w_v);
        for head in 0..c.n_heads {
            let cols = ndarray::s![.., head * c.d_head..(head + 1) * c.d_head];
            let v_h = v_full.slice(cols).to_owned();
            let w_o_rows = lw
                .w_o
                .slice(ndarray::s![head * c.d_head..(head + 1) * c.d_head, ..]);
            for source in 0..=target {
                let attention = out.attention_weights[layer][[head, target, source]] as f64;
                let projected = v_h.row(source).dot(&w_o_rows);
                let vector: Vec<f32> = projected
                    .iter()
                    .map(|v| *v * attention as f32)
                    .collect();
                let norm = vector.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
                records.push(ContributionRecord {
                    layer,
                    head,
                    source,
                    target,
                    attention,
                    norm,
                    vector,
                });
            }
        }
    }
    Ok(ContributionSet {
        target,
        seq_len: seq,
        n_layers: c.n_layers,
        n_heads: c.n_heads,
        records,
    })
}

// ======================================================================
// Span aggregation and ranking
// ======================================================================

/// How to collapse a span's per-position norms into one number.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpanAgg {
    /// The span's strongest position (default: robust to span length).
    Max,
    /// The span's total (sensitive to span length; kept for comparison).
    Sum,
}

impl std::str::FromStr for SpanAgg {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max" => Ok(SpanAgg::Max),
            "sum" => Ok(SpanAgg::Sum),
            other => Err(Error::Config(format!(
                "unknown span aggregation `{other}` (expected max or sum)"
            ))),
        }
    }
}

impl std::fmt::Display for SpanAgg {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SpanAgg::Max => "max",
            SpanAgg::Sum => "sum",
        })
    }
}

fn collapse(values: impl Iterator<Item = f64>, agg: SpanAgg) -> f64 {
    match agg {
        SpanAgg::Max => values.fold(0.0, f64::max),
        SpanAgg::Sum => values.sum(),
    }
}

/// Per-(layer, head) contribution of a token span.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct HeadSpanContribution {
    pub layer: usize,
    pub head: usize,
    pub value: f64,
}

/// Collapse each head's per-source norms over `span`.
pub fn head_span_contributions(
    set: &ContributionSet,
    span: &TokenSpan,
    agg: SpanAgg,
) -> Vec<HeadSpanContribution> {
    let mut out = Vec::with_capacity(set.n_layers * set.n_heads);
    for layer in 0..set.n_layers {
        for head in 0..set.n_heads {
            let value = collapse(
                set.records
                    .iter()
                    .filter(|r| r.layer == layer && r.head == head && span.contains(r.source))
                    .map(|r| r.norm),
                agg,
            );
            out.push(HeadSpanContribution { layer, head, value });
        }
    }
    out
}

/// Per-layer contribution of a token span: heads are vector-summed per
/// source (the combined write), normed, then collapsed over the span.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LayerSpanContribution {
    pub layer: usize,
    pub value: f64,
}

pub fn layer_span_contributions(
    set: &ContributionSet,
    span: &TokenSpan,
    agg: SpanAgg,
) -> Vec<LayerSpanContribution> {
    (0..set.n_layers)
        .map(|layer| {
            let value = collapse(
                span.positions().filter(|s| *s <= set.target).map(|source| {
                    set.layer_vector(layer, source)
                        .map(|v| v.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt())
                        .unwrap_or(0.0)
                }),
                agg,
            );
            LayerSpanContribution { layer, value }
        })
        .collect()
}

/// Indices of the `ceil(fraction · n)` largest scores, descending; ties
/// break toward the lower index.
pub fn top_fraction(scores: &[f64], fraction: f64) -> Vec<usize> {
    let n = scores.len();
    let k = ((fraction * n as f64).ceil() as usize).min(n);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|a, b| {
        scores[*b]
            .partial_cmp(&scores[*a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(b))
    });
    order.truncate(k);
    order
}

// ======================================================================
// Knockout experiments
// ======================================================================

/// Result of deleting a set of attention edges.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct KnockoutOutcome {
    pub p_base: f64,
    pub p_knocked: f64,
    /// `100 · (p_knocked − p_base) / p_base`; 0 when the base probability is
    /// itself zero (see `zero_base`).
    pub relative_change_pct: f64,
    /// The base probability was zero, so a relative change is undefined.
    pub zero_base: bool,
}

impl KnockoutOutcome {
    pub fn from_probs(p_base: f64, p_knocked: f64) -> Self {
        let zero_base = p_base <= 0.0;
        KnockoutOutcome {
            p_base,
            p_knocked,
            relative_change_pct: if zero_base {
                0.0
            } else {
                100.0 * (p_knocked - p_base) / p_base
            },
            zero_base,
        }
    }
}

/// Measure how much answer probability a knockout destroys.
pub fn run_knockout_experiment(
    model: &TransformerModel,
    tokens: &[u32],
    answer: u32,
    knockout: &KnockoutSpec,
) -> Result<KnockoutOutcome> {
    let base = model.forward(tokens, &InterventionPlan::clean(), &CaptureSpec::none())?;
    let knocked = model.forward(
        tokens,
        &InterventionPlan::with_knockout(knockout.clone()),
        &CaptureSpec::none(),
    )?;
    Ok(KnockoutOutcome::from_probs(
        base.prob(answer),
        knocked.prob(answer),
    ))
}

/// Slide a window of `window` consecutive source positions along the
/// sequence, each time severing the final position's attention to the whole
/// window in every layer. Returns `(window_start, outcome)` pairs.
///
/// Windows covering *all* of the final position's visible sources are
/// skipped (an attention row must keep at least one source).
pub fn sliding_window_knockout(
    model: &TransformerModel,
    tokens: &[u32],
    answer: u32,
    window: usize,
) -> Result<Vec<(usize, KnockoutOutcome)>> {
    let seq = tokens.len();
    if window == 0 || window > seq {
        return Err(Error::Analysis(format!(
            "knockout window {window} invalid for sequence of length {seq}"
        )));
    }
    let last = seq - 1;
    let mut out = Vec::new();
    for start in 0..=(seq - window) {
        if window == seq {
            // Would starve the final row entirely.
            continue;
        }
        let edges: Vec<KnockoutEdge> = (0..model.config.n_layers)
            .flat_map(|layer| {
                (start..start + window).map(move |target| KnockoutEdge {
                    layer,
                    source: last,
                    target,
                })
            })
            .collect();
        let outcome = run_knockout_experiment(model, tokens, answer, &KnockoutSpec::new(edges))?;
        out.push((start, outcome));
    }
    Ok(out)
}

// ======================================================================
// Tests
// ======================================================================
