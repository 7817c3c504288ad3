// SPDX-License-Identifier: MIT OR Apache-2.0

//! Context generation: a chat-completion client abstraction, the fixed
//! instruction text that asks for five constrained segments, reply parsing,
//! and a retry loop that only accepts validated contexts.
//!
//! Experiments must be reproducible offline, so the client is a trait with
//! two implementations: an HTTP client for OpenAI-style endpoints and a
//! fixture client that replays canned replies from a JSON file. Everything
//! downstream of `complete` is identical for both, which is also what makes
//! the retry loop testable.

use std::collections::BTreeMap;
use std::collections::VecDeque;
use std::path::Path;

use crate::error::{Error, Result};

use super::{validate_context, FactRecord, RagContext, ValidationOptions};

// ======================================================================
// Chat clients
// ======================================================================

/// One chat-completion request: a system instruction, a user message, and a
/// tag identifying which record it serves (fixture clients key on the tag).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChatRequest {
    pub system: String,
    pub user: String,
    pub tag: String,
}

/// Anything that can answer a [`ChatRequest`] with plain text.
pub trait ChatClient {
    fn complete(&mut self, request: &ChatRequest) -> Result<String>;
}

/// Replays canned replies from a map of tag → reply queue. Each call pops
/// the next reply for the request's tag, so a queue like
/// `["garbage", "<valid array>"]` exercises the retry path deterministically.
#[derive(Debug, Default)]
pub struct FixtureChatClient {
    replies: BTreeMap<String, VecDeque<String>>,
}

impl FixtureChatClient {
    pub fn new(replies: BTreeMap<String, Vec<String>>) -> Self {
        FixtureChatClient {
            replies: replies
                .into_iter()
                .map(|(tag, list)| (tag, list.into()))
                .collect(),
        }
    }

    /// Load a `{ "tag": ["reply", ...], ... }` JSON file.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let replies: BTreeMap<String, Vec<String>> =
            serde_json::from_str(&text).map_err(|e| Error::Json {
                path: path.to_path_buf(),
                message: e.to_string(),
            })?;
        Ok(Self::new(replies))
    }
}

impl ChatClient for FixtureChatClient {
    fn complete(&mut self, request: &ChatRequest) -> Result<String> {
        self.replies
            .get_mut(&request.tag)
            .and_then(VecDeque::pop_front)
            .ok_or_else(|| {
                Error::Transport(format!("no fixture reply left for tag `{}`", request.tag))
            })
    }
}

/// Minimal OpenAI-style chat client. Configuration comes from the
/// environment so credentials never live in config files:
///
/// * `RAGPROBE_API_BASE` — endpoint base, e.g. `https://api.example.com/v1`
///   (required);
/// * `RAGPROBE_CHAT_MODEL` — model name (default `gpt-4`);
/// * `RAGPROBE_API_KEY` — bearer token (optional; omitted if unset).
pub struct HttpChatClient {
    base: String,
    model: String,
    api_key: Option<String>,
}

impl HttpChatClient {
    pub fn new(base: impl Into<String>, model: impl Into<String>, api_key: Option<String>) -> Self {
        HttpChatClient {
            base: base.into(),
            model: model.into(),
            api_key,
        }
    }

    pub fn from_env() -> Result<Self> {
        let base = std::env::var("RAGPROBE_API_BASE").map_err(|_| {
            Error::Config(
                "RAGPROBE_API_BASE is not set; point it at an OpenAI-style endpoint \
                 or use a fixture file"
                    .into(),
            )
        })?;
        let model =
            std::env::var("RAGPROBE_CHAT_MODEL").unwrap_or_else(|_| "gpt-4".to_string());
        let api_key = std::env::var("RAGPROBE_API_KEY").ok();
        Ok(Self::new(base, model, api_key))
    }
}

impl ChatClient for HttpChatClient {
    fn complete(&mut self, request: &ChatRequest) -> Result<String> {
        let url = format!("{}/chat/completions", self.base.trim_end_matches('/'));
        let body = serde_json::json!({
            "model": self.model,
            "messages": [
                {"role": "system", "content": request.system},
                {"role": "user", "content": request.user},
            ],
        });
        let mut req = ureq::post(&url);
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let reply: serde_json::Value = req
            .send_json(&body)
            .map_err(|e| Error::Transport(e.to_string()))?
            .body_mut()
            .read_json()
            .map_err(|e| Error::Transport(format!("malformed response body: {e}")))?;
        reply["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| {
                Error::Transport("response carries no choices[0].message.content".into())
            })
    }
}

// ======================================================================
// Instruction rendering and reply parsing
// ======================================================================

/// Render the generation request for one fact. The bracketed values are the
/// fact's query and attribute; the instructions pin the same constraints the
/// validator enforces, so a compliant reply passes validation.
pub fn render_generation_request(fact: &FactRecord) -> ChatRequest {
    let query = &fact.prompt;
    let object = &fact.attribute;
    let system = format!(
        "You are an expert data generation bot, specializing in generating 20 word segments.\n\
         \n\
         - You generate these 20-word segments by consolidating information/knowledge AROUND \
         a sentence that the user provides, that is: [{query}] [{object}].\n\
         \n\
         - While generating these five 20-word segments based on the sentence provided by the \
         user, here: [{query}] [{object}], make sure that only 1 of the 5 segments has the \
         [{object}] explicitly mentioned. FOLLOW THIS INSTRUCTION STRICTLY.\n\
         \n\
         - Also make sure that none of these segments contain: [{query}]. Double check to \
         make sure this instruction is strictly followed.\n\
         \n\
         - Also make sure that these segments follow the format of an array of segments, \
         i.e, [segment1, segment2, segment3, segment4, segment5]"
    );
    let user =
        format!("Generate five 20-word segments based on the following sentence: [{query}] [{object}]");
    ChatRequest {
        system,
        user,
        tag: fact.known_id.to_string(),
    }
}

/// Extract five non-empty segments from a reply. Accepts a JSON array of
/// five strings or five non-empty lines; segments are trimmed.
pub fn parse_segments(reply: &str) -> Result<Vec<String>> {
    let trimmed = reply.trim();
    let candidates: Vec<String> =
        if let Ok(array) = serde_json::from_str::<Vec<String>>(trimmed) {
            array.iter().map(|s| s.trim().to_string()).collect()
        } else {
            trimmed
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(str::to_string)
                .collect()
        };
    if candidates.len() != 5 {
        return Err(Error::Dataset(format!(
            "reply parsed into {} segments, expected 5",
            candidates.len()
        )));
    }
    if candidates.iter().any(String::is_empty) {
        return Err(Error::Dataset("reply contains an empty segment".into()));
    }
    Ok(candidates)
}

// ======================================================================
// Generation loop
// ======================================================================

/// Retry policy for [`generate_context`].
#[derive(Debug, Clone)]
pub struct GenerationOptions {
    pub max_attempts: u32,
    pub validation: ValidationOptions,
}

impl Default for GenerationOptions {
    fn default() -> Self {
        GenerationOptions {
            max_attempts: 5,
            validation: ValidationOptions::default(),
        }
    }
}

/// Ask the client for a context until one validates. Malformed replies and
/// constraint violations both consume an attempt; transport failures abort
/// immediately (annotated with the attempt number) since retrying them
/// re-sends the identical request.
pub fn generate_context(
    client: &mut dyn ChatClient,
    fact: &FactRecord,
    options: &GenerationOptions,
) -> Result<RagContext> {
    if options.max_attempts == 0 {
        return Err(Error::Config("max_attempts must be at least 1".into()));
    }
    let request = render_generation_request(fact);
    let mut last_reason = String::new();
    for attempt in 1..=options.max_attempts {
        let reply = client
            .complete(&request)
            .map_err(|e| Error::Transport(format!("attempt {attempt}: {e}")))?;
        let segments = match parse_segments(&reply) {
            Ok(segments) => segments,
            Err(e) => {
                last_reason = e.to_string();
                continue;
            }
        };
        let verdict =
            validate_context(&fact.prompt, &fact.attribute, &segments, &options.validation);
        if verdict.valid {
            return Ok(RagContext {
                index: fact.known_id,
                user_query: fact.prompt.clone(),
                object: fact.attribute.clone(),
                response: segments,
            });
        }
        last_reason = verdict.reasons.join(", ");
    }
    Err(Error::GenerationFailed {
        known_id: fact.known_id,
        attempts: options.max_attempts,
        last_reason,
    })
}

// ======================================================================
// Tests
// ======================================================================
