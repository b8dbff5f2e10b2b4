//! OpenAI-compatible HTTP backend (chat completions) and embedder.
//!
//! Requests are pinned to temperature 0. Rate limits (429) and server errors
//! (5xx) are retried with bounded exponential backoff; everything else
//! surfaces immediately.

use std::time::Duration;

use serde::Deserialize;
use serde_json::json;
use ureq::Agent;

use super::{LlmBackend, LlmError, TokenUsage};
use crate::vindex::{Embedder, EmbeddingVector, VindexError};

#[derive(Debug, Clone)]
pub struct HttpConfig {
    /// Base URL up to and including the API root, e.g. `http://host:8080/v1`.
    pub base_url: String,
    pub model: String,
    pub api_key: Option<String>,
    pub timeout: Duration,
    pub max_retries: u32,
    pub backoff_base: Duration,
}

impl HttpConfig {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>) -> Self {
        HttpConfig {
            base_url: base_url.into(),
            model: model.into(),
            api_key: None,
            timeout: Duration::from_secs(120),
            max_retries: 3,
            backoff_base: Duration::from_millis(500),
        }
    }
}

pub struct HttpBackend {
    cfg: HttpConfig,
    agent: Agent,
}

#[derive(Deserialize)]
struct ChatResponse {
    #[serde(default)]
    choices: Vec<Choice>,
    #[serde(default)]
    usage: Option<WireUsage>,
}

#[derive(Deserialize)]
struct Choice {
    message: ChoiceMessage,
}

#[derive(Deserialize)]
struct ChoiceMessage {
    content: Option<String>,
}

#[derive(Deserialize)]
struct WireUsage {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
    #[serde(default)]
    completion_tokens_details: Option<CompletionDetails>,
}

#[derive(Deserialize)]
struct CompletionDetails {
    #[serde(default)]
    reasoning_tokens: u64,
}

fn build_agent(timeout: Duration) -> Agent {
    let config = Agent::config_builder()
        .timeout_global(Some(timeout))
        .http_status_as_error(false)
        .build();
    Agent::new_with_config(config)
}

fn is_retryable(status: u16) -> bool {
    status == 429 || (500..600).contains(&status)
}

impl HttpBackend {
    pub fn new(cfg: HttpConfig) -> Self {
        let agent = build_agent(cfg.timeout);
        HttpBackend { cfg, agent }
    }

    fn endpoint(&self) -> String {
        format!("{}/chat/completions", self.cfg.base_url.trim_end_matches('/'))
    }

    fn post_once(&self, body: &serde_json::Value) -> Result<(u16, String), LlmError> {
        let mut req = self.agent.post(self.endpoint()).header("content-type", "application/json");
        if let Some(key) = &self.cfg.api_key {
            req = req.header("authorization", format!("Bearer {key}"));
        }
        match req.send_json(body) {
            Ok(mut resp) => {
                let status = resp.status().as_u16();
                let text = resp
                    .body_mut()
                    .read_to_string()
                    .map_err(|e| LlmError::Transport { status, detail: format!("reading body: {e}") })?;
                Ok((status, text))
            }
            Err(ureq::Error::Timeout(_)) => Err(LlmError::Timeout(self.cfg.timeout)),
            Err(e) => Err(LlmError::Transport { status: 0, detail: e.to_string() }),
        }
    }
}

impl LlmBackend for HttpBackend {
    fn id(&self) -> &str {
        "http-openai-compatible"
    }

    fn complete(&self, system: &str, user: &str) -> Result<(String, TokenUsage), LlmError> {
        let body = json!({
            "model": self.cfg.model,
            "messages": [
                {"role": "system", "content": system},
                {"role": "user", "content": user},
            ],
            "temperature": 0.0,
        });
        let mut last_status = 0u16;
        let mut last_detail = String::new();
        for attempt in 0..=self.cfg.max_retries {
            if attempt > 0 {
                std::thread::sleep(self.cfg.backoff_base * 2u32.pow(attempt - 1));
            }
            let (status, text) = self.post_once(&body)?;
            if is_retryable(status) {
                last_status = status;
                last_detail = excerpt(&text);
                continue;
            }
            if status != 200 {
                return Err(LlmError::Transport { status, detail: excerpt(&text) });
            }
            let parsed: ChatResponse = serde_json::from_str(&text)
                .map_err(|e| LlmError::Transport { status, detail: format!("bad completion json: {e}") })?;
            let content = parsed
                .choices
                .first()
                .and_then(|c| c.message.content.clone())
                .ok_or_else(|| LlmError::Transport { status, detail: "completion without content".into() })?;
            let usage = match parsed.usage {
                Some(u) => {
                    let reasoning = u.completion_tokens_details.map(|d| d.reasoning_tokens).unwrap_or(0);
                    TokenUsage {
                        prompt_tokens: u.prompt_tokens,
                        reasoning_tokens: reasoning,
                        answer_tokens: u.completion_tokens.saturating_sub(reasoning),
                    }
                }
                None => TokenUsage::default(),
            };
            return Ok((content, usage));
        }
        Err(LlmError::Transport { status: last_status, detail: last_detail })
    }
}

fn excerpt(text: &str) -> String {
    const LIMIT: usize = 200;
    if text.len() <= LIMIT {
        text.to_string()
    } else {
        let cut = text.char_indices().take_while(|(i, _)| *i < LIMIT).last().map(|(i, c)| i + c.len_utf8()).unwrap_or(0);
        format!("{}...", &text[..cut])
    }
}

/// Remote embedding client against an OpenAI-compatible `/embeddings` route.
/// Optional; offline runs use the local hash embedder instead.
pub struct HttpEmbedder {
    cfg: HttpConfig,
    agent: Agent,
    id: String,
    dim: usize,
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingRow>,
}

#[derive(Deserialize)]
struct EmbeddingRow {
    embedding: Vec<f32>,
}

impl HttpEmbedder {
    pub fn new(cfg: HttpConfig, dim: usize) -> Self {
        let agent = build_agent(cfg.timeout);
        let id = format!("http-{}-{dim}", cfg.model);
        HttpEmbedder { cfg, agent, id, dim }
    }
}

impl Embedder for HttpEmbedder {
    fn id(&self) -> &str {
        &self.id
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector, VindexError> {
        let url = format!("{}/embeddings", self.cfg.base_url.trim_end_matches('/'));
        let mut req = self.agent.post(url).header("content-type", "application/json");
        if let Some(key) = &self.cfg.api_key {
            req = req.header("authorization", format!("Bearer {key}"));
        }
        let body = json!({"model": self.cfg.model, "input": [text]});
        let mut resp = req.send_json(&body).map_err(|e| VindexError::Backend(e.to_string()))?;
        let status = resp.status().as_u16();
        if status != 200 {
            let detail = resp.body_mut().read_to_string().unwrap_or_default();
            return Err(VindexError::Backend(format!("status {status}: {}", excerpt(&detail))));
        }
        let parsed: EmbeddingResponse =
            resp.body_mut().read_json().map_err(|e| VindexError::Backend(format!("bad embedding json: {e}")))?;
        let row = parsed.data.into_iter().next().ok_or_else(|| VindexError::Backend("empty embedding data".into()))?;
        if row.embedding.len() != self.dim {
            return Err(VindexError::DimensionMismatch { expected: self.dim, found: row.embedding.len() });
        }
        EmbeddingVector::new(row.embedding)
    }
}
