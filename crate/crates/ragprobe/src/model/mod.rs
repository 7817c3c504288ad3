// SPDX-License-Identifier: MIT OR Apache-2.0

//! Deterministic decoder-only transformer substrate.
//!
//! This is a small, fully inspectable pre-norm transformer built for
//! intervention experiments, not for throughput:
//!
//! * all math is `f32`, single-threaded, in a fixed evaluation order, so a
//!   forward pass is bit-deterministic for identical inputs;
//! * every intermediate of interest is addressable as a [`HookSite`]
//!   (capture or patch);
//! * attention masking (causal and knockout) uses a finite sentinel score
//!   whose softmax weight is exactly zero, so "no edge" means *exactly* zero.
//!
//! Block structure per layer: `x += attn(ln1(x)); x += mlp(ln2(x))`, with a
//! final layer norm before the unembedding. Positions are either learned
//! absolute embeddings (added once, after the embedding hook) or rotary
//! (applied to q/k inside attention).

mod copy_task;
mod manifest;

pub use copy_task::{
    canonical_copy_prompts, construct_copy_task_model, toy_vocabulary, CopyTaskLayout,
};
pub use manifest::{load_model, save_model};

use std::collections::BTreeMap;

use ndarray::{s, Array1, Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::intervention::{apply_noise, InterventionPlan, ATTENTION_MASK_VALUE};

const LN_EPS: f32 = 1e-5;

// ======================================================================
// Configuration
// ======================================================================

/// How token positions enter the computation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PositionalScheme {
    /// A learned `[max_seq_len × d_model]` table added to token embeddings.
    LearnedAbsolute,
    /// Rotary q/k phases; no positional table.
    Rotary,
}

impl std::fmt::Display for PositionalScheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PositionalScheme::LearnedAbsolute => f.write_str("learned-absolute"),
            PositionalScheme::Rotary => f.write_str("rotary"),
        }
    }
}

impl std::str::FromStr for PositionalScheme {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "learned-absolute" => Ok(PositionalScheme::LearnedAbsolute),
            "rotary" => Ok(PositionalScheme::Rotary),
            other => Err(Error::ModelConfig(format!(
                "unknown positional scheme `{other}` (expected learned-absolute or rotary)"
            ))),
        }
    }
}

/// Static shape of a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub d_mlp: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub positional_scheme: PositionalScheme,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let all_positive = self.n_layers > 0
            && self.n_heads > 0
            && self.d_model > 0
            && self.d_head > 0
            && self.d_mlp > 0
            && self.vocab_size > 0
            && self.max_seq_len > 0;
        if !all_positive {
            return Err(Error::ModelConfig("all dimensions must be >= 1".into()));
        }
        if self.d_model != self.n_heads * self.d_head {
            return Err(Error::ModelConfig(format!(
                "d_model ({}) must equal n_heads * d_head ({} * {})",
                self.d_model, self.n_heads, self.d_head
            )));
        }
        if self.positional_scheme == PositionalScheme::Rotary && self.d_head % 2 != 0 {
            return Err(Error::ModelConfig(
                "rotary positions require an even d_head".into(),
            ));
        }
        Ok(())
    }
}

// ======================================================================
// Hook sites
// ======================================================================

/// Kinds of activation a hook can address.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum SiteKind {
    /// Token embedding rows, after corruption, before the positional table.
    /// Only meaningful at layer 0.
    Embedding,
    /// Residual stream entering layer `layer`.
    ResidualPre,
    /// Pre-softmax attention score row of `position` (all heads), after
    /// masking/knockout, at layer `layer`.
    AttnScores,
    /// Attention block output (after output projection and bias, before the
    /// residual addition).
    AttnOut,
    /// MLP block output, before the residual addition.
    MlpOut,
    /// Residual stream leaving layer `layer`.
    ResidualPost,
}

impl std::fmt::Display for SiteKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            SiteKind::Embedding => "embedding",
            SiteKind::ResidualPre => "residual_pre",
            SiteKind::AttnScores => "attn_scores",
            SiteKind::AttnOut => "attn_out",
            SiteKind::MlpOut => "mlp_out",
            SiteKind::ResidualPost => "residual_post",
        };
        f.write_str(s)
    }
}

/// One addressable activation slice: a (layer, kind, token position) triple.
///
/// Stream sites address a `[d_model]` vector; [`SiteKind::AttnScores`]
/// addresses the `[n_heads × seq_len]` score row of `position` (head-major).
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub struct HookSite {
    pub layer: usize,
    pub site: SiteKind,
    pub position: usize,
}

impl HookSite {
    pub fn new(layer: usize, site: SiteKind, position: usize) -> Self {
        HookSite {
            layer,
            site,
            position,
        }
    }

    pub fn validate(&self, config: &ModelConfig, seq_len: usize) -> Result<()> {
        if self.site == SiteKind::Embedding && self.layer != 0 {
            return Err(Error::PlanOutOfRange(format!(
                "embedding site must use layer 0, got layer {}",
                self.layer
            )));
        }
        if self.layer >= config.n_layers {
            return Err(Error::PlanOutOfRange(format!(
                "site layer {} outside model with {} layers",
                self.layer, config.n_layers
            )));
        }
        if self.position >= seq_len {
            return Err(Error::PlanOutOfRange(format!(
                "site position {} outside sequence of length {seq_len}",
                self.position
            )));
        }
        Ok(())
    }
}

/// Which activations a forward pass should record.
#[derive(Debug, Clone, Default)]
pub struct CaptureSpec {
    pub sites: std::collections::BTreeSet<HookSite>,
    /// Also record per-head attention outputs (`[heads × seq × d_model]` per
    /// layer, after the per-head output projection, before bias). Used to
    /// check the source-sum decomposition of attention outputs.
    pub head_outputs: bool,
}

impl CaptureSpec {
    pub fn none() -> Self {
        CaptureSpec::default()
    }

    pub fn with_site(mut self, site: HookSite) -> Self {
        self.sites.insert(site);
        self
    }

    /// Capture `kind` at every layer and every position.
    pub fn all_positions(kind: SiteKind, n_layers: usize, seq_len: usize) -> Self {
        let mut spec = CaptureSpec::default();
        let layers = if kind == SiteKind::Embedding {
            0..1
        } else {
            0..n_layers
        };
        for layer in layers {
            for position in 0..seq_len {
                spec.sites.insert(HookSite {
                    layer,
                    site: kind,
                    position,
                });
            }
        }
        spec
    }

    pub fn validate(&self, config: &ModelConfig, seq_len: usize) -> Result<()> {
        for site in &self.sites {
            site.validate(config, seq_len)?;
        }
        Ok(())
    }
}

// ======================================================================
// Run outcome
// ======================================================================

/// Everything a forward pass reports.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    /// Logits at the final position, `[vocab_size]`.
    pub logits: Array1<f32>,
    /// Softmax of `logits`, `[vocab_size]`.
    pub next_token_probs: Array1<f32>,
    /// Greedy readout (ties resolve to the lowest token id).
    pub argmax: u32,
    /// Post-softmax attention, one `[heads × seq × seq]` tensor per layer.
    pub attention_weights: Vec<Array3<f32>>,
    /// Requested activation slices.
    pub captured: BTreeMap<HookSite, Vec<f32>>,
    /// Per-head attention outputs when requested (see [`CaptureSpec`]).
    pub head_outputs: Option<Vec<Array3<f32>>>,
}

impl RunOutcome {
    /// Probability of one token at the final position.
    pub fn prob(&self, token: u32) -> f64 {
        self.next_token_probs
            .get(token as usize)
            .map(|p| *p as f64)
            .unwrap_or(0.0)
    }
}

// ======================================================================
// Weights
// ======================================================================

/// Weights of one transformer block.
///
/// Attention projections are `[d_model × d_model]`, sliced per head: head `h`
/// owns query/key/value columns `h*d_head..(h+1)*d_head` and output-projection
/// rows of the same range. Only the output projection carries a bias.
#[derive(Debug, Clone)]
pub struct LayerWeights {
    pub w_q: Array2<f32>,
    pub w_k: Array2<f32>,
    pub w_v: Array2<f32>,
    pub w_o: Array2<f32>,
    pub b_o: Array1<f32>,
    pub w_in: Array2<f32>,
    pub w_out: Array2<f32>,
    pub ln1_scale: Array1<f32>,
    pub ln1_bias: Array1<f32>,
    pub ln2_scale: Array1<f32>,
    pub ln2_bias: Array1<f32>,
}

impl LayerWeights {
    fn zeros(config: &ModelConfig) -> Self {
        let d = config.d_model;
        LayerWeights {
            w_q: Array2::zeros((d, d)),
            w_k: Array2::zeros((d, d)),
            w_v: Array2::zeros((d, d)),
            w_o: Array2::zeros((d, d)),
            b_o: Array1::zeros(d),
            w_in: Array2::zeros((d, config.d_mlp)),
            w_out: Array2::zeros((config.d_mlp, d)),
            ln1_scale: Array1::ones(d),
            ln1_bias: Array1::zeros(d),
            ln2_scale: Array1::ones(d),
            ln2_bias: Array1::zeros(d),
        }
    }
}

/// A complete model: config plus weights, with the embedding-table sigma
/// cached for automatic noise calibration.
#[derive(Debug, Clone)]
pub struct TransformerModel {
    pub config: ModelConfig,
    pub(crate) embed_tokens: Array2<f32>,
    pub(crate) embed_pos: Option<Array2<f32>>,
    pub(crate) layers: Vec<LayerWeights>,
    pub(crate) final_ln_scale: Array1<f32>,
    pub(crate) final_ln_bias: Array1<f32>,
    pub(crate) unembed: Array2<f32>,
    embedding_sigma: f32,
}

impl TransformerModel {
    pub(crate) fn from_parts(
        config: ModelConfig,
        embed_tokens: Array2<f32>,
        embed_pos: Option<Array2<f32>>,
        layers: Vec<LayerWeights>,
        final_ln_scale: Array1<f32>,
        final_ln_bias: Array1<f32>,
        unembed: Array2<f32>,
    ) -> Result<Self> {
        config.validate()?;
        let sigma = sigma_of_table(&embed_tokens);
        let model = TransformerModel {
            config,
            embed_tokens,
            embed_pos,
            layers,
            final_ln_scale,
            final_ln_bias,
            unembed,
            embedding_sigma: sigma,
        };
        model.check_shapes()?;
        Ok(model)
    }

    fn check_shapes(&self) -> Result<()> {
        let c = &self.config;
        let check = |name: &str, actual: &[usize], expected: &[usize]| -> Result<()> {
            if actual != expected {
                return Err(Error::ShapeMismatch {
                    tensor: name.into(),
                    expected: expected.to_vec(),
                    actual: actual.to_vec(),
                });
            }
            Ok(())
        };
        check(
            "embed.tokens",
            &[self.embed_tokens.nrows(), self.embed_tokens.ncols()],
            &[c.vocab_size, c.d_model],
        )?;
        match (&self.embed_pos, c.positional_scheme) {
            (Some(pos), PositionalScheme::LearnedAbsolute) => check(
                "embed.pos",
                &[pos.nrows(), pos.ncols()],
                &[c.max_seq_len, c.d_model],
            )?,
            (None, PositionalScheme::LearnedAbsolute) => {
                return Err(Error::MissingTensor {
                    name: "embed.pos".into(),
                })
            }
            (Some(_), PositionalScheme::Rotary) => {
                return Err(Error::ModelConfig(
                    "rotary models must not carry an embed.pos table".into(),
                ))
            }
            (None, PositionalScheme::Rotary) => {}
        }
        if self.layers.len() != c.n_layers {
            return Err(Error::ModelConfig(format!(
                "model has {} layer weight sets, config says {}",
                self.layers.len(),
                c.n_layers
            )));
        }
        for (i, lw) in self.layers.iter().enumerate() {
            let d = c.d_model;
            check(&format!("layers.{i}.attn.w_q"), &[lw.w_q.nrows(), lw.w_q.ncols()], &[d, d])?;
            check(&format!("layers.{i}.attn.w_k"), &[lw.w_k.nrows(), lw.w_k.ncols()], &[d, d])?;
            check(&format!("layers.{i}.attn.w_v"), &[lw.w_v.nrows(), lw.w_v.ncols()], &[d, d])?;
            check(&format!("layers.{i}.attn.w_o"), &[lw.w_o.nrows(), lw.w_o.ncols()], &[d, d])?;
            check(&format!("layers.{i}.attn.b_o"), &[lw.b_o.len()], &[d])?;
            check(
                &format!("layers.{i}.mlp.w_in"),
                &[lw.w_in.nrows(), lw.w_in.ncols()],
                &[d, c.d_mlp],
            )?;
            check(
                &format!("layers.{i}.mlp.w_out"),
                &[lw.w_out.nrows(), lw.w_out.ncols()],
                &[c.d_mlp, d],
            )?;
            check(&format!("layers.{i}.ln1.scale"), &[lw.ln1_scale.len()], &[d])?;
            check(&format!("layers.{i}.ln1.bias"), &[lw.ln1_bias.len()], &[d])?;
            check(&format!("layers.{i}.ln2.scale"), &[lw.ln2_scale.len()], &[d])?;
            check(&format!("layers.{i}.ln2.bias"), &[lw.ln2_bias.len()], &[d])?;
        }
        check(
            "final_ln.scale",
            &[self.final_ln_scale.len()],
            &[c.d_model],
        )?;
        check("final_ln.bias", &[self.final_ln_bias.len()], &[c.d_model])?;
        check(
            "unembed.w",
            &[self.unembed.nrows(), self.unembed.ncols()],
            &[c.d_model, c.vocab_size],
        )?;
        Ok(())
    }

    pub fn embed_tokens(&self) -> &Array2<f32> {
        &self.embed_tokens
    }

    /// Population std of the token-embedding table, computed once at
    /// construction. This is the automatic sigma used by noise specs.
    pub fn embedding_sigma(&self) -> f32 {
        self.embedding_sigma
    }

    pub fn layer(&self, i: usize) -> &LayerWeights {
        &self.layers[i]
    }

    /// Normalize rows with this model's layer norm (epsilon included), using
    /// the given scale/bias. Exposed so analyses can reproduce the exact
    /// normalization the forward pass applies.
    pub fn layer_norm(x: &Array2<f32>, scale: &Array1<f32>, bias: &Array1<f32>) -> Array2<f32> {
        layer_norm(x, scale, bias)
    }

    #[cfg(test)]
    pub(crate) fn set_embed_tokens_for_test(&mut self, table: Array2<f32>) {
        self.embedding_sigma = sigma_of_table(&table);
        self.embed_tokens = table;
    }

    // ==================================================================
    // Forward pass
    // ==================================================================

    /// Run the model over `tokens` under an intervention plan, recording the
    /// requested captures.
    ///
    /// Interventions apply in a fixed order: embedding corruption first, then
    /// per-layer knockout masks, then activation patches as their sites are
    /// reached. At every site the patch (if any) is applied *before* the
    /// capture, so captured values are what downstream computation actually
    /// consumed.
    pub fn forward(
        &self,
        tokens: &[u32],
        plan: &InterventionPlan,
        capture: &CaptureSpec,
    ) -> Result<RunOutcome> {
        let c = &self.config;
        let seq = tokens.len();
        if seq == 0 {
            return Err(Error::Analysis("cannot run an empty token sequence".into()));
        }
        if seq > c.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: seq,
                max: c.max_seq_len,
            });
        }
        for &t in tokens {
            if t as usize >= c.vocab_size {
                return Err(Error::TokenOutOfRange {
                    token: t,
                    vocab_size: c.vocab_size,
                });
            }
        }
        plan.validate(c, seq)?;
        capture.validate(c, seq)?;

        let resolved_noise = match &plan.noise {
            Some(spec) => Some(spec.resolve(self)?),
            None => None,
        };

        let mut captured: BTreeMap<HookSite, Vec<f32>> = BTreeMap::new();
        let mut attention_weights: Vec<Array3<f32>> = Vec::with_capacity(c.n_layers);
        let mut head_outputs: Option<Vec<Array3<f32>>> = capture.head_outputs.then(Vec::new);

        // --- Embedding stage -----------------------------------------
        let mut x = Array2::<f32>::zeros((seq, c.d_model));
        for (i, &t) in tokens.iter().enumerate() {
            x.row_mut(i).assign(&self.embed_tokens.row(t as usize));
        }
        if let Some(spec) = &resolved_noise {
            apply_noise(&mut x, spec)?;
        }
        self.patch_and_capture_rows(&mut x, 0, SiteKind::Embedding, plan, capture, &mut captured);
        if let Some(pos) = &self.embed_pos {
            for i in 0..seq {
                let row = pos.row(i).to_owned();
                x.row_mut(i).zip_mut_with(&row, |a, b| *a += b);
            }
        }

        // --- Blocks ---------------------------------------------------
        for l in 0..c.n_layers {
            let lw = &self.layers[l];
            self.patch_and_capture_rows(&mut x, l, SiteKind::ResidualPre, plan, capture, &mut captured);

            // Attention.
            let h1 = layer_norm(&x, &lw.ln1_scale, &lw.ln1_bias);
            let q_full = h1.dot(&lw.w_q);
            let k_full = h1.dot(&lw.w_k);
            let v_full = h1.dot(&lw.w_v);

            let mut scores = Array3::<f32>::zeros((c.n_heads, seq, seq));
            let scale = 1.0 / (c.d_head as f32).sqrt();
            for h in 0..c.n_heads {
                let cols = s![.., h * c.d_head..(h + 1) * c.d_head];
                let mut q = q_full.slice(cols).to_owned();
                let mut k = k_full.slice(cols).to_owned();
                if c.positional_scheme == PositionalScheme::Rotary {
                    apply_rotary(&mut q);
                    apply_rotary(&mut k);
                }
                let s_h = q.dot(&k.t());
                for r in 0..seq {
                    for col in 0..seq {
                        scores[[h, r, col]] = if col > r {
                            ATTENTION_MASK_VALUE
                        } else {
                            s_h[[r, col]] * scale
                        };
                    }
                }
            }

            // Knockout masks for this layer.
            if let Some(spec) = &plan.knockout {
                for e in &spec.edges {
                    if e.layer == l {
                        for h in 0..c.n_heads {
                            scores[[h, e.source, e.target]] = ATTENTION_MASK_VALUE;
                        }
                    }
                }
            }

            // Score-row patches, then the causal mask is reasserted (a patch
            // cannot resurrect anti-causal cells).
            for patch in &plan.patches {
                if patch.site.layer == l && patch.site.site == SiteKind::AttnScores {
                    let r = patch.site.position;
                    for h in 0..c.n_heads {
                        for col in 0..seq {
                            scores[[h, r, col]] = if col > r {
                                ATTENTION_MASK_VALUE
                            } else {
                                patch.value[h * seq + col]
                            };
                        }
                    }
                }
            }
            for site in &capture.sites {
                if site.layer == l && site.site == SiteKind::AttnScores {
                    let r = site.position;
                    let mut row = Vec::with_capacity(c.n_heads * seq);
                    for h in 0..c.n_heads {
                        for col in 0..seq {
                            row.push(scores[[h, r, col]]);
                        }
                    }
                    captured.insert(*site, row);
                }
            }

            let weights = softmax_scores(&scores);

            let mut attn_out = Array2::<f32>::zeros((seq, c.d_model));
            let mut layer_head_out = capture
                .head_outputs
                .then(|| Array3::<f32>::zeros((c.n_heads, seq, c.d_model)));
            for h in 0..c.n_heads {
                let v_h = v_full
                    .slice(s![.., h * c.d_head..(h + 1) * c.d_head])
                    .to_owned();
                let ctx = weights.slice(s![h, .., ..]).dot(&v_h);
                let out_h = ctx.dot(&lw.w_o.slice(s![h * c.d_head..(h + 1) * c.d_head, ..]));
                attn_out += &out_h;
                if let Some(per_head) = layer_head_out.as_mut() {
                    per_head.slice_mut(s![h, .., ..]).assign(&out_h);
                }
            }
            for mut row in attn_out.rows_mut() {
                row.zip_mut_with(&lw.b_o, |a, b| *a += b);
            }
            attention_weights.push(weights);
            if let (Some(store), Some(per_head)) = (head_outputs.as_mut(), layer_head_out) {
                store.push(per_head);
            }

            self.patch_and_capture_rows(&mut attn_out, l, SiteKind::AttnOut, plan, capture, &mut captured);
            x += &attn_out;

            // MLP.
            let h2 = layer_norm(&x, &lw.ln2_scale, &lw.ln2_bias);
            let mut inner = h2.dot(&lw.w_in);
            inner.mapv_inplace(gelu);
            let mut mlp_out = inner.dot(&lw.w_out);
            self.patch_and_capture_rows(&mut mlp_out, l, SiteKind::MlpOut, plan, capture, &mut captured);
            x += &mlp_out;

            self.patch_and_capture_rows(&mut x, l, SiteKind::ResidualPost, plan, capture, &mut captured);
        }

        // --- Readout ---------------------------------------------------
        let final_norm = layer_norm(&x, &self.final_ln_scale, &self.final_ln_bias);
        let logits: Array1<f32> = final_norm.row(seq - 1).dot(&self.unembed);
        let next_token_probs = softmax_vec(&logits);
        let mut argmax = 0u32;
        let mut best = f32::NEG_INFINITY;
        for (i, &p) in logits.iter().enumerate() {
            if p > best {
                best = p;
                argmax = i as u32;
            }
        }

        Ok(RunOutcome {
            logits,
            next_token_probs,
            argmax,
            attention_weights,
            captured,
            head_outputs,
        })
    }

    /// Shared patch-then-capture handling for per-position stream sites.
    fn patch_and_capture_rows(
        &self,
        activ: &mut Array2<f32>,
        layer: usize,
        kind: SiteKind,
        plan: &InterventionPlan,
        capture: &CaptureSpec,
        captured: &mut BTreeMap<HookSite, Vec<f32>>,
    ) {
        for patch in &plan.patches {
            if patch.site.layer == layer && patch.site.site == kind {
                for (d, v) in patch.value.iter().enumerate() {
                    activ[[patch.site.position, d]] = *v;
                }
            }
        }
        for site in &capture.sites {
            if site.layer == layer && site.site == kind {
                captured.insert(*site, activ.row(site.position).to_vec());
            }
        }
    }
}

// ======================================================================
// Numeric helpers
// ======================================================================

fn layer_norm(x: &Array2<f32>, scale: &Array1<f32>, bias: &Array1<f32>) -> Array2<f32> {
    let d = x.ncols() as f32;
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let mean = row.sum() / d;
        let mut var = 0.0f32;
        for v in row.iter() {
            let c = v - mean;
            var += c * c;
        }
        var /= d;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        for (i, v) in row.iter_mut().enumerate() {
            *v = (*v - mean) * inv * scale[i] + bias[i];
        }
    }
    out
}

/// GELU, tanh approximation.
fn gelu(x: f32) -> f32 {
    const SQRT_2_OVER_PI: f32 = 0.797_884_56;
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + 0.044_715 * x * x * x)).tanh())
}

/// Row softmax of a `[heads × seq × seq]` score tensor. Entries at
/// [`ATTENTION_MASK_VALUE`] come out exactly zero.
pub fn softmax_scores(scores: &Array3<f32>) -> Array3<f32> {
    let (heads, rows, cols) = scores.dim();
    let mut out = Array3::<f32>::zeros((heads, rows, cols));
    for h in 0..heads {
        for r in 0..rows {
            let mut max = f32::NEG_INFINITY;
            for c in 0..cols {
                max = max.max(scores[[h, r, c]]);
            }
            let mut z = 0.0f32;
            for c in 0..cols {
                let e = (scores[[h, r, c]] - max).exp();
                out[[h, r, c]] = e;
                z += e;
            }
            for c in 0..cols {
                out[[h, r, c]] /= z;
            }
        }
    }
    out
}

fn softmax_vec(logits: &Array1<f32>) -> Array1<f32> {
    let max = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let mut out = logits.mapv(|v| (v - max).exp());
    let z = out.sum();
    out.mapv_inplace(|v| v / z);
    out
}

/// Rotary position phases applied in place to `[seq × d_head]` q or k rows.
fn apply_rotary(x: &mut Array2<f32>) {
    let d_head = x.ncols();
    let half = d_head / 2;
    for pos in 0..x.nrows() {
        for i in 0..half {
            let theta = (pos as f32) * (10_000f32).powf(-((2 * i) as f32) / d_head as f32);
            let (sin, cos) = theta.sin_cos();
            let a = x[[pos, 2 * i]];
            let b = x[[pos, 2 * i + 1]];
            x[[pos, 2 * i]] = a * cos - b * sin;
            x[[pos, 2 * i + 1]] = a * sin + b * cos;
        }
    }
}

pub(crate) fn sigma_of_table(table: &Array2<f32>) -> f32 {
    let n = (table.nrows() * table.ncols()) as f64;
    let mut sum = 0.0f64;
    let mut sum_sq = 0.0f64;
    for &v in table.iter() {
        let v = v as f64;
        sum += v;
        sum_sq += v * v;
    }
    let mean = sum / n;
    ((sum_sq / n - mean * mean).max(0.0)).sqrt() as f32
}

// ======================================================================
// Random initialization
// ======================================================================

/// Build a model with weights drawn from fixed distributions: embeddings
/// `N(0, 0.1)`, positional table `N(0, 0.02)`, projection matrices
/// `N(0, d_model^-0.5)` (`d_mlp^-0.5` for the MLP read-out), layer-norm
/// scale 1 / bias 0, zero output bias. Tensors fill row-major in declaration
/// order from one ChaCha8 stream, so a seed pins every weight.
pub fn init_random(config: ModelConfig, seed: u64) -> Result<TransformerModel> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let emb = Normal::new(0.0f32, 0.1).unwrap();
    let pos = Normal::new(0.0f32, 0.02).unwrap();
    let proj = Normal::new(0.0f32, (config.d_model as f32).powf(-0.5)).unwrap();
    let mlp_out = Normal::new(0.0f32, (config.d_mlp as f32).powf(-0.5)).unwrap();

    let fill = |shape: (usize, usize), dist: &Normal<f32>, rng: &mut ChaCha8Rng| {
        Array2::from_shape_fn(shape, |_| dist.sample(rng))
    };

    let embed_tokens = fill((config.vocab_size, config.d_model), &emb, &mut rng);
    let embed_pos = match config.positional_scheme {
        PositionalScheme::LearnedAbsolute => {
            Some(fill((config.max_seq_len, config.d_model), &pos, &mut rng))
        }
        PositionalScheme::Rotary => None,
    };
    let mut layers = Vec::with_capacity(config.n_layers);
    for _ in 0..config.n_layers {
        let mut lw = LayerWeights::zeros(&config);
        lw.w_q = fill((config.d_model, config.d_model), &proj, &mut rng);
        lw.w_k = fill((config.d_model, config.d_model), &proj, &mut rng);
        lw.w_v = fill((config.d_model, config.d_model), &proj, &mut rng);
        lw.w_o = fill((config.d_model, config.d_model), &proj, &mut rng);
        lw.w_in = fill((config.d_model, config.d_mlp), &proj, &mut rng);
        lw.w_out = fill((config.d_mlp, config.d_model), &mlp_out, &mut rng);
        layers.push(lw);
    }
    let final_ln_scale = Array1::ones(config.d_model);
    let final_ln_bias = Array1::zeros(config.d_model);
    let unembed = fill((config.d_model, config.vocab_size), &proj, &mut rng);

    TransformerModel::from_parts(
        config,
        embed_tokens,
        embed_pos,
        layers,
        final_ln_scale,
        final_ln_bias,
        unembed,
    )
}

// ======================================================================
// Tests
// ======================================================================
