// SPDX-License-Identifier: MIT OR Apache-2.0

//! Crate-wide error type.
//!
//! Every fallible operation in the crate returns [`Result`]. Variants are
//! grouped by the layer that raises them; [`Error::exit_code`] maps them onto
//! the process exit codes used by the command-line front end (`2` for
//! configuration problems, `1` for data/validation problems).

use std::path::PathBuf;

use thiserror::Error;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    // ------------------------------------------------------------------
    // Configuration / environment
    // ------------------------------------------------------------------
    /// Bad command-line flags, malformed config file, missing input files,
    /// unset environment variables: anything the user must fix before a run
    /// can even start.
    #[error("configuration error: {0}")]
    Config(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    // ------------------------------------------------------------------
    // Model core
    // ------------------------------------------------------------------
    #[error("invalid model config: {0}")]
    ModelConfig(String),

    #[error("manifest parse error at {path}:{line}: {message}")]
    Manifest {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("manifest is missing tensor `{name}`")]
    MissingTensor { name: String },

    #[error("tensor `{tensor}` has shape {actual:?}, expected {expected:?}")]
    ShapeMismatch {
        tensor: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("token id {token} out of range for vocab size {vocab_size}")]
    TokenOutOfRange { token: u32, vocab_size: usize },

    #[error("sequence length {len} exceeds model maximum {max}")]
    SequenceTooLong { len: usize, max: usize },

    // ------------------------------------------------------------------
    // Tokenizer
    // ------------------------------------------------------------------
    #[error("vocabulary parse error at line {line}: {message}")]
    VocabParse { line: usize, message: String },

    #[error("span not found: needle {needle:?} does not occur in the searched range")]
    SpanNotFound { needle: String },

    #[error(
        "ambiguous span: needle {needle:?} occurs {} times (byte offsets {offsets:?}); \
         use an occurrence policy other than require-unique or disambiguate the text",
        offsets.len()
    )]
    SpanAmbiguous { needle: String, offsets: Vec<usize> },

    #[error("token ids decode to invalid utf-8")]
    InvalidUtf8,

    // ------------------------------------------------------------------
    // Interventions
    // ------------------------------------------------------------------
    /// Noise width must be resolved against a model (or given explicitly)
    /// before it can be applied to raw embeddings.
    #[error("noise sigma is unresolved: resolve the spec against a model first")]
    SigmaUnresolved,

    #[error("noise sigma must be strictly positive, got {sigma}")]
    SigmaNotPositive { sigma: f32 },

    #[error(
        "anti-causal knockout edge at layer {layer}: source row {source_pos} cannot attend \
         to later position {target}"
    )]
    AntiCausalEdge {
        layer: usize,
        // Named `source_pos` because a field named `source` would be taken
        // for the error's cause.
        source_pos: usize,
        target: usize,
    },

    #[error(
        "knockout at layer {layer} masks every visible source for row {row}; \
         at least one attention source must survive"
    )]
    RowFullyMasked { layer: usize, row: usize },

    #[error("conflicting patches address the same site: {site}")]
    ConflictingPatch { site: String },

    #[error("intervention plan out of range: {0}")]
    PlanOutOfRange(String),

    // ------------------------------------------------------------------
    // Tracing / analysis
    // ------------------------------------------------------------------
    #[error("analysis error: {0}")]
    Analysis(String),

    // ------------------------------------------------------------------
    // Dataset
    // ------------------------------------------------------------------
    #[error("fact record {index} is missing or has a malformed `{field}` field")]
    RecordField { index: usize, field: String },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error(
        "context generation for record {known_id} failed after {attempts} attempts; \
         last failure: {last_reason}"
    )]
    GenerationFailed {
        known_id: u64,
        attempts: u32,
        last_reason: String,
    },

    #[error("chat transport error: {0}")]
    Transport(String),

    #[error("json error on {path}: {message}")]
    Json { path: PathBuf, message: String },
}

impl Error {
    /// Process exit code for the CLI front end.
    ///
    /// `2` marks configuration errors (the run never started); `1` marks
    /// data or validation errors discovered while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Io { .. } => 2,
            _ => 1,
        }
    }

    /// Shorthand for wrapping an io error with the offending path.
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
