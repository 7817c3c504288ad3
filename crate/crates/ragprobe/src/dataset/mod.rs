// SPDX-License-Identifier: MIT OR Apache-2.0

//! The controlled dataset pipeline: factual records, retrieved-context
//! records, the constraints that keep experiments interpretable, and prompt
//! assembly for both scenarios.
//!
//! A *fact record* is a (subject, relation, attribute) triple with a cloze
//! template ("{} was born in"). A *context record* pairs a fact's query with
//! five generated ~20-word segments. Three constraints make the retrieval
//! setting analyzable:
//!
//! 1. the attribute string occurs **exactly once** across the segments, so
//!    "the in-context answer" is a single well-defined span;
//! 2. the query itself never appears in the segments, so the model cannot
//!    match the prompt verbatim;
//! 3. (strict mode, default) the single occurrence sits in segment 1, so its
//!    position is comparable across prompts.
//!
//! Prompt assembly produces either the bare query (`vanilla`) or the query
//! behind its context under a fixed scaffold (`rag`), with token spans
//! resolved for the subject, the in-context attribute, and the context
//! block — everything the tracing and attention layers need.

pub mod generate;

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::{
    find_span_in, span_from_byte_range, Occurrence, SpanLabel, TokenSpan, Vocabulary,
};
use crate::trace::{AnswerPolicy, TraceRequest};

// ======================================================================
// Fact records
// ======================================================================

/// One factual query: a (subject, relation, attribute) triple plus the cloze
/// template that renders it as a prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactRecord {
    pub known_id: u64,
    pub subject: String,
    pub attribute: String,
    pub template: String,
    pub prompt: String,
    pub relation_id: String,
}

fn record_str(value: &serde_json::Value, index: usize, field: &str) -> Result<String> {
    value
        .get(field)
        .and_then(|v| v.as_str())
        .map(str::to_string)
        .ok_or_else(|| Error::RecordField {
            index,
            field: field.to_string(),
        })
}

/// Load fact records from a JSON array file. Unknown fields (e.g. stored
/// model predictions) are ignored; missing or mistyped fields fail with the
/// record index and field name.
pub fn load_known_facts(path: &Path) -> Result<Vec<FactRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let root: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let items = root
        .as_array()
        .ok_or_else(|| Error::Dataset("fact file must be a JSON array of records".into()))?;

    let mut records = Vec::with_capacity(items.len());
    let mut seen_ids = BTreeSet::new();
    for (index, item) in items.iter().enumerate() {
        let known_id = item
            .get("known_id")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::RecordField {
                index,
                field: "known_id".to_string(),
            })?;
        let record = FactRecord {
            known_id,
            subject: record_str(item, index, "subject")?,
            attribute: record_str(item, index, "attribute")?,
            template: record_str(item, index, "template")?,
            prompt: record_str(item, index, "prompt")?,
            relation_id: record_str(item, index, "relation_id")?,
        };
        if record.subject.is_empty() || record.attribute.is_empty() {
            return Err(Error::Dataset(format!(
                "record {index} (known_id {known_id}): subject and attribute must be non-empty"
            )));
        }
        if record.template.matches("{}").count() != 1 {
            return Err(Error::Dataset(format!(
                "record {index} (known_id {known_id}): template needs exactly one {{}} placeholder"
            )));
        }
        if record.prompt != record.template.replace("{}", &record.subject) {
            return Err(Error::Dataset(format!(
                "record {index} (known_id {known_id}): prompt does not equal the template \
                 with the subject substituted"
            )));
        }
        if !seen_ids.insert(known_id) {
            return Err(Error::Dataset(format!(
                "record {index}: duplicate known_id {known_id}"
            )));
        }
        records.push(record);
    }
    Ok(records)
}

// ======================================================================
// Context records
// ======================================================================

/// Five generated segments wrapped around one fact's query.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RagContext {
    /// Matches the fact record's `known_id`.
    pub index: u64,
    pub user_query: String,
    pub object: String,
    pub response: Vec<String>,
}

impl RagContext {
    pub fn validate(&self, options: &ValidationOptions) -> ContextVerdict {
        let mut verdict =
            validate_context(&self.user_query, &self.object, &self.response, options);
        verdict.index = self.index;
        verdict
    }
}

/// Load context records from a JSON array file; every record must carry
/// exactly five segments.
pub fn load_contexts(path: &Path) -> Result<Vec<RagContext>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let contexts: Vec<RagContext> =
        serde_json::from_str(&text).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
    for ctx in &contexts {
        if ctx.response.len() != 5 {
            return Err(Error::Dataset(format!(
                "context {} has {} segments, expected 5",
                ctx.index,
                ctx.response.len()
            )));
        }
    }
    Ok(contexts)
}

/// Write context records as pretty-printed JSON. The output is byte-stable:
/// saving the same records twice yields identical files.
pub fn save_contexts(path: &Path, contexts: &[RagContext]) -> Result<()> {
    let mut text = serde_json::to_string_pretty(contexts)
        .map_err(|e| Error::Dataset(format!("context serialization failed: {e}")))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

// ======================================================================
// Validation
// ======================================================================

/// Knobs for context validation.
#[derive(Debug, Clone, Copy)]
pub struct ValidationOptions {
    /// Require the attribute's single occurrence to sit in segment 1
    /// (position-comparable across prompts). Default on.
    pub strict_first_segment: bool,
    /// Count only word-boundary matches of the attribute. Default off:
    /// plain substring counting is the reference behavior, even though it
    /// can overcount (e.g. "Dublin" inside "Dubliners"); this flag exists
    /// for corpora where that matters.
    pub word_boundary: bool,
}

impl Default for ValidationOptions {
    fn default() -> Self {
        ValidationOptions {
            strict_first_segment: true,
            word_boundary: false,
        }
    }
}

/// The verdict for one context, with machine-readable failure reasons.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextVerdict {
    pub index: u64,
    pub valid: bool,
    pub reasons: Vec<String>,
    /// Mean whitespace-separated word count per segment (recorded, not
    /// enforced; the generator aims for ~20).
    pub mean_segment_words: f64,
}

/// Count non-overlapping occurrences of `needle`, optionally requiring word
/// boundaries (no alphanumeric neighbors).
pub fn count_occurrences(haystack: &str, needle: &str, word_boundary: bool) -> usize {
    if needle.is_empty() {
        return 0;
    }
    if !word_boundary {
        return haystack.matches(needle).count();
    }
    haystack
        .match_indices(needle)
        .filter(|(at, _)| {
            let before_ok = haystack[..*at]
                .chars()
                .next_back()
                .is_none_or(|c| !c.is_alphanumeric());
            let after_ok = haystack[at + needle.len()..]
                .chars()
                .next()
                .is_none_or(|c| !c.is_alphanumeric());
            before_ok && after_ok
        })
        .count()
}

/// Check the three context constraints. Segments are judged as one
/// newline-joined text for the occurrence count, mirroring how the context
/// block will appear in the final prompt.
pub fn validate_context(
    user_query: &str,
    object: &str,
    segments: &[String],
    options: &ValidationOptions,
) -> ContextVerdict {
    let mut reasons = Vec::new();
    if segments.len() != 5 {
        reasons.push(format!("segment_count={}", segments.len()));
    }
    let joined = segments.join("\n");
    let count = count_occurrences(&joined, object, options.word_boundary);
    if count != 1 {
        reasons.push(format!("object_count={count}"));
    }
    if !user_query.is_empty() && joined.contains(user_query) {
        reasons.push("query_in_response".to_string());
    }
    if options.strict_first_segment
        && count == 1
        && segments
            .first()
            .is_none_or(|s| count_occurrences(s, object, options.word_boundary) == 0)
    {
        reasons.push("object_not_in_first_segment".to_string());
    }
    let mean_segment_words = if segments.is_empty() {
        0.0
    } else {
        segments
            .iter()
            .map(|s| s.split_whitespace().count() as f64)
            .sum::<f64>()
            / segments.len() as f64
    };
    ContextVerdict {
        index: 0,
        valid: reasons.is_empty(),
        reasons,
        mean_segment_words,
    }
}

// ======================================================================
// Prompt assembly
// ======================================================================

/// Which prompt form an experiment runs on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    /// The bare query; the model must answer from its weights.
    Vanilla,
    /// The query behind its retrieved context; the answer is on the page.
    Rag,
}

impl std::fmt::Display for Scenario {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Scenario::Vanilla => "vanilla",
            Scenario::Rag => "rag",
        })
    }
}

impl std::str::FromStr for Scenario {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vanilla" => Ok(Scenario::Vanilla),
            "rag" => Ok(Scenario::Rag),
            other => Err(Error::Config(format!(
                "unknown scenario `{other}` (expected vanilla or rag)"
            ))),
        }
    }
}

/// Render the retrieval scaffold around `query`: header, divider, the five
/// segments on their own lines, a bridge sentence, a blank line, then the
/// query. Returns the text and the byte range of the segment block.
pub fn rag_prompt_text(query: &str, segments: &[String]) -> (String, std::ops::Range<usize>) {
    let mut text = String::from("Information is below:\n----------------\n");
    let context_start = text.len();
    for (i, seg) in segments.iter().enumerate() {
        if i > 0 {
            text.push('\n');
        }
        text.push_str(seg);
    }
    let context_end = text.len();
    text.push_str("\nGiven the context information and not prior knowledge, complete the following:\n\n");
    text.push_str(query);
    (text, context_start..context_end)
}

/// A fully resolved prompt: text, tokens, spans, and the token whose
/// probability experiments follow.
#[derive(Debug, Clone)]
pub struct PromptInstance {
    pub known_id: u64,
    pub scenario: Scenario,
    pub text: String,
    pub tokens: Vec<u32>,
    /// Subject span (the query's occurrence).
    pub subject_span: TokenSpan,
    /// The attribute's single in-context occurrence (rag only).
    pub attribute_span: Option<TokenSpan>,
    /// The segment block (rag only).
    pub context_span: Option<TokenSpan>,
    /// What a causal trace corrupts: the subject alone (vanilla) or the
    /// context block plus the subject (rag).
    pub corrupt_spans: Vec<TokenSpan>,
    /// First answer token: the in-context attribute token (rag) or the
    /// first token of the attribute in continuation form (vanilla).
    pub tracked_token: u32,
    /// First token of `" " + attribute` encoded standalone.
    pub continuation_token: u32,
    /// The in-context occurrence tokenized differently from the standalone
    /// continuation form — worth flagging, since "the answer token" is then
    /// scenario-dependent.
    pub tracked_divergence: bool,
}

impl PromptInstance {
    /// The trace request this prompt defines.
    pub fn trace_request(&self) -> TraceRequest {
        TraceRequest {
            tokens: self.tokens.clone(),
            subject_span: self.subject_span,
            corrupt_spans: self.corrupt_spans.clone(),
            answer: AnswerPolicy::Token(self.tracked_token),
            scenario: self.scenario.to_string(),
            known_id: Some(self.known_id),
        }
    }

    pub fn last_position(&self) -> usize {
        self.tokens.len() - 1
    }
}

fn continuation_token(vocab: &Vocabulary, attribute: &str) -> Result<u32> {
    let enc = vocab.encode(&format!(" {attribute}"), false);
    enc.ids.first().copied().ok_or_else(|| {
        Error::Dataset(format!("attribute `{attribute}` encodes to zero tokens"))
    })
}

/// Assemble a prompt for one fact (plus its context in the rag scenario),
/// resolving every span the analyses need.
pub fn build_prompt(
    vocab: &Vocabulary,
    fact: &FactRecord,
    context: Option<&RagContext>,
    scenario: Scenario,
) -> Result<PromptInstance> {
    match scenario {
        Scenario::Vanilla => {
            let text = fact.prompt.clone();
            let enc = vocab.encode(&text, true);
            let subject_span = find_span_in(
                &text,
                &enc,
                &fact.subject,
                Occurrence::Last,
                SpanLabel::Subject,
                0..text.len(),
            )?;
            let continuation = continuation_token(vocab, &fact.attribute)?;
            Ok(PromptInstance {
                known_id: fact.known_id,
                scenario,
                text,
                tokens: enc.ids,
                subject_span,
                attribute_span: None,
                context_span: None,
                corrupt_spans: vec![subject_span],
                tracked_token: continuation,
                continuation_token: continuation,
                tracked_divergence: false,
            })
        }
        Scenario::Rag => {
            let ctx = context.ok_or_else(|| {
                Error::Dataset(format!(
                    "known_id {}: rag scenario needs a context record",
                    fact.known_id
                ))
            })?;
            if ctx.index != fact.known_id {
                return Err(Error::Dataset(format!(
                    "context index {} does not match fact known_id {}",
                    ctx.index, fact.known_id
                )));
            }
            if ctx.user_query != fact.prompt {
                return Err(Error::Dataset(format!(
                    "context {}: user_query differs from the fact's prompt",
                    ctx.index
                )));
            }
            let (text, context_bytes) = rag_prompt_text(&ctx.user_query, &ctx.response);
            let enc = vocab.encode(&text, true);
            let query_bytes = text.len() - ctx.user_query.len()..text.len();
            let subject_span = find_span_in(
                &text,
                &enc,
                &fact.subject,
                Occurrence::Last,
                SpanLabel::Subject,
                query_bytes,
            )?;
            let context_span = span_from_byte_range(
                &enc,
                context_bytes.start,
                context_bytes.end,
                SpanLabel::Context,
            )?;
            let attribute_span = find_span_in(
                &text,
                &enc,
                &fact.attribute,
                Occurrence::RequireUnique,
                SpanLabel::Attribute,
                context_bytes,
            )?;
            let tracked_token = enc.ids[attribute_span.start];
            let continuation = continuation_token(vocab, &fact.attribute)?;
            Ok(PromptInstance {
                known_id: fact.known_id,
                scenario,
                text,
                tokens: enc.ids,
                subject_span,
                attribute_span: Some(attribute_span),
                context_span: Some(context_span),
                corrupt_spans: vec![context_span, subject_span],
                tracked_token,
                continuation_token: continuation,
                tracked_divergence: tracked_token != continuation,
            })
        }
    }
}

// ======================================================================
// Tests
// ======================================================================
