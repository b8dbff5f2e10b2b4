//! LLM plumbing: backend trait, prompt templates, response parsing, and the
//! three interchangeable backends (HTTP, cassette, rule oracle).
//!
//! Backends are synchronous; one completion is in flight at a time per
//! investigation, which keeps cassette recording and replay trivially ordered.

mod cassette;
mod http;
mod oracle;
mod templates;

pub use cassette::{prompt_hash, Cassette};
pub use http::{HttpBackend, HttpConfig, HttpEmbedder};
pub use oracle::RuleOracle;
pub use templates::{PromptTemplate, TemplateName};

use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::model::{canonicalize, parse_canonical_key, EntityKind};

#[derive(Debug, thiserror::Error)]
pub enum LlmError {
    #[error("transport failure (status {status}): {detail}")]
    Transport { status: u16, detail: String },
    #[error("request timed out after {0:?}")]
    Timeout(Duration),
    #[error("malformed response after {retries} retries: {detail}")]
    MalformedResponse { retries: u32, detail: String },
    #[error("no json value found in response")]
    NoJsonFound,
    #[error("response schema violation: {0}")]
    SchemaViolation(String),
    #[error("template {template} rendered without a binding for [{placeholder}]")]
    MissingPlaceholder { template: &'static str, placeholder: String },
    #[error("cassette miss for prompt hash {0}")]
    CassetteMiss(String),
    #[error("cassette file problem: {0}")]
    CassetteIo(String),
    #[error("rule oracle does not recognize this prompt shape")]
    PromptShapeUnrecognized,
}

/// Token counts for one completion, split the way provider bills do.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenUsage {
    pub prompt_tokens: u64,
    pub reasoning_tokens: u64,
    pub answer_tokens: u64,
}

impl TokenUsage {
    pub fn total(&self) -> u64 {
        self.prompt_tokens + self.reasoning_tokens + self.answer_tokens
    }
}

impl std::ops::AddAssign for TokenUsage {
    fn add_assign(&mut self, rhs: Self) {
        self.prompt_tokens += rhs.prompt_tokens;
        self.reasoning_tokens += rhs.reasoning_tokens;
        self.answer_tokens += rhs.answer_tokens;
    }
}

pub trait LlmBackend: Send + Sync {
    /// Short backend identifier for logs and reports.
    fn id(&self) -> &str;

    /// Sends one (system, user) prompt pair and returns the completion text
    /// with its token usage. Usage is reported on every successful call.
    fn complete(&self, system: &str, user: &str) -> Result<(String, TokenUsage), LlmError>;
}

/// The parsed verdict of one reasoning step. Entity names are canonical keys.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReasoningResponse {
    pub malicious_entities: Vec<String>,
    #[serde(default)]
    pub benign_entities: Vec<String>,
    #[serde(default)]
    pub behaviors: Vec<String>,
    #[serde(default)]
    pub summary: String,
}

/// Finds the first parseable JSON value (object or array) in free text.
/// Tolerates code fences and surrounding prose.
pub fn find_first_json(raw: &str) -> Option<serde_json::Value> {
    for (pos, ch) in raw.char_indices() {
        if ch != '{' && ch != '[' {
            continue;
        }
        let mut stream = serde_json::Deserializer::from_str(&raw[pos..]).into_iter::<serde_json::Value>();
        if let Some(Ok(value)) = stream.next() {
            if value.is_object() || value.is_array() {
                return Some(value);
            }
        }
    }
    None
}

/// Canonicalizes one entity reference from a model response. Accepts a bare
/// name, an already-canonical key (re-canonicalized as a fixpoint), or an
/// object `{"name": ..., "kind": ...}`; kind defaults to Other.
pub fn response_entity_key(value: &serde_json::Value) -> Result<String, LlmError> {
    let (name, kind) = match value {
        serde_json::Value::String(s) => (s.as_str(), None),
        serde_json::Value::Object(map) => {
            let name = map
                .get("name")
                .and_then(|v| v.as_str())
                .ok_or_else(|| LlmError::SchemaViolation("entity object without a name".into()))?;
            (name, map.get("kind").and_then(|v| v.as_str()))
        }
        other => return Err(LlmError::SchemaViolation(format!("entity must be string or object, got {other}"))),
    };
    if let Some((k, n, pid)) = parse_canonical_key(name) {
        return canonicalize(k, n, pid).map_err(|e| LlmError::SchemaViolation(e.to_string()));
    }
    let kind = kind.map(EntityKind::parse_loose).unwrap_or(EntityKind::Other);
    canonicalize(kind, name, None).map_err(|e| LlmError::SchemaViolation(e.to_string()))
}

fn entity_list(value: Option<&serde_json::Value>, field: &str) -> Result<Vec<String>, LlmError> {
    let Some(value) = value else { return Ok(Vec::new()) };
    let arr = value
        .as_array()
        .ok_or_else(|| LlmError::SchemaViolation(format!("{field} must be an array")))?;
    let mut out = Vec::new();
    for item in arr {
        let key = response_entity_key(item)?;
        if !out.contains(&key) {
            out.push(key);
        }
    }
    Ok(out)
}

/// Extracts a `ReasoningResponse` from raw completion text. The first JSON
/// value is taken (fences and prose are fine); `malicious_entities` is
/// required, the other fields default. An entity listed on both sides counts
/// as malicious only; the conflict is logged.
pub fn parse_reasoning(raw: &str) -> Result<ReasoningResponse, LlmError> {
    let value = find_first_json(raw).ok_or(LlmError::NoJsonFound)?;
    let obj = match &value {
        serde_json::Value::Object(map) => map,
        serde_json::Value::Array(items) => match items.as_slice() {
            [serde_json::Value::Object(map)] => map,
            _ => return Err(LlmError::SchemaViolation("expected a single reasoning object".into())),
        },
        _ => return Err(LlmError::SchemaViolation("expected a reasoning object".into())),
    };
    if !obj.contains_key("malicious_entities") {
        return Err(LlmError::SchemaViolation("missing malicious_entities".into()));
    }
    let malicious_entities = entity_list(obj.get("malicious_entities"), "malicious_entities")?;
    let mut benign_entities = entity_list(obj.get("benign_entities"), "benign_entities")?;
    benign_entities.retain(|k| {
        let clash = malicious_entities.contains(k);
        if clash {
            log::warn!("entity {k} listed as both malicious and benign; keeping malicious");
        }
        !clash
    });
    let behaviors = match obj.get("behaviors") {
        None => Vec::new(),
        Some(v) => v
            .as_array()
            .ok_or_else(|| LlmError::SchemaViolation("behaviors must be an array".into()))?
            .iter()
            .map(|b| match b {
                serde_json::Value::String(s) => Ok(s.clone()),
                other => Ok(other.to_string()),
            })
            .collect::<Result<_, LlmError>>()?,
    };
    let summary = obj.get("summary").and_then(|v| v.as_str()).unwrap_or_default().to_string();
    Ok(ReasoningResponse { malicious_entities, benign_entities, behaviors, summary })
}

/// Whitespace token count, the fixed tokenizer deterministic backends use for
/// usage accounting.
pub fn whitespace_tokens(text: &str) -> u64 {
    text.split_whitespace().count() as u64
}
