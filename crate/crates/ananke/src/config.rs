//! Layered runtime configuration. Precedence, lowest to highest: built-in
//! defaults, TOML config file, `ANANKE_*` environment variables, CLI flags.
//! Unknown TOML keys are rejected so typos fail loudly.

use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::investigator::{EntityMatch, InvestigationConfig};
use crate::llm::HttpConfig;
use crate::provenance::InducedEdges;
use crate::report::NarrativeInput;

pub const ENV_LLM_URL: &str = "ANANKE_LLM_URL";
pub const ENV_LLM_MODEL: &str = "ANANKE_LLM_MODEL";
pub const ENV_LLM_KEY: &str = "ANANKE_LLM_KEY";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot access {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse {path}: {detail}")]
    Parse { path: String, detail: String },
    #[error("invalid config value: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConfigFile {
    pub llm: LlmSection,
    pub investigation: InvestigationSection,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LlmSection {
    pub url: Option<String>,
    pub model: Option<String>,
    pub api_key: Option<String>,
    pub timeout_secs: Option<u64>,
    pub max_retries: Option<u32>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InvestigationSection {
    pub n_max: Option<usize>,
    pub metric: Option<String>,
    pub max_iterations: Option<usize>,
    pub induced_edges: Option<String>,
    pub entity_match: Option<String>,
    pub retrieval_k: Option<usize>,
    pub narrative_input: Option<String>,
}

pub fn load_config(path: Option<&Path>) -> Result<ConfigFile, ConfigError> {
    let Some(path) = path else {
        return Ok(ConfigFile::default());
    };
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io { path: path.display().to_string(), source: e })?;
    toml::from_str(&text).map_err(|e| ConfigError::Parse { path: path.display().to_string(), detail: e.to_string() })
}

/// Environment overrides for the LLM endpoint; values beat the config file.
pub fn apply_env(cfg: &mut ConfigFile) {
    if let Ok(v) = std::env::var(ENV_LLM_URL) {
        cfg.llm.url = Some(v);
    }
    if let Ok(v) = std::env::var(ENV_LLM_MODEL) {
        cfg.llm.model = Some(v);
    }
    if let Ok(v) = std::env::var(ENV_LLM_KEY) {
        cfg.llm.api_key = Some(v);
    }
}

pub fn parse_induced_edges(s: &str) -> Result<InducedEdges, String> {
    match s.trim().to_ascii_lowercase().as_str() {
        "full" => Ok(InducedEdges::Full),
        "star" => Ok(InducedEdges::Star),
        other => Err(format!("unknown induced_edges {other:?} (expected full or star)")),
    }
}

pub fn parse_entity_match(s: &str) -> Result<EntityMatch, String> {
    match s.trim().to_ascii_lowercase().as_str() {
        "exact" => Ok(EntityMatch::Exact),
        "substring_fallback" | "substring" => Ok(EntityMatch::SubstringFallback),
        other => Err(format!("unknown entity_match {other:?} (expected exact or substring_fallback)")),
    }
}

pub fn parse_narrative_input(s: &str) -> Result<NarrativeInput, String> {
    match s.trim().to_ascii_lowercase().as_str() {
        "timeline" => Ok(NarrativeInput::Timeline),
        "full_cache" | "full-cache" => Ok(NarrativeInput::FullCache),
        other => Err(format!("unknown narrative_input {other:?} (expected timeline or full_cache)")),
    }
}

impl InvestigationSection {
    /// Folds this section into an `InvestigationConfig`, leaving unset fields
    /// at their current values.
    pub fn apply(&self, cfg: &mut InvestigationConfig) -> Result<(), ConfigError> {
        if let Some(n) = self.n_max {
            cfg.n_max = n;
        }
        if let Some(m) = &self.metric {
            cfg.metric = m.parse().map_err(ConfigError::Invalid)?;
        }
        if let Some(n) = self.max_iterations {
            cfg.max_iterations = n;
        }
        if let Some(s) = &self.induced_edges {
            cfg.induced_edges = parse_induced_edges(s).map_err(ConfigError::Invalid)?;
        }
        if let Some(s) = &self.entity_match {
            cfg.entity_match = parse_entity_match(s).map_err(ConfigError::Invalid)?;
        }
        if let Some(k) = self.retrieval_k {
            cfg.retrieval_k = k;
        }
        Ok(())
    }

    pub fn narrative_input(&self) -> Result<Option<NarrativeInput>, ConfigError> {
        self.narrative_input
            .as_deref()
            .map(|s| parse_narrative_input(s).map_err(ConfigError::Invalid))
            .transpose()
    }
}

impl LlmSection {
    /// Builds an HTTP backend config when both endpoint and model are set.
    pub fn http_config(&self) -> Option<HttpConfig> {
        let (url, model) = (self.url.as_ref()?, self.model.as_ref()?);
        let mut cfg = HttpConfig::new(url, model);
        cfg.api_key = self.api_key.clone();
        if let Some(secs) = self.timeout_secs {
            cfg.timeout = Duration::from_secs(secs);
        }
        if let Some(r) = self.max_retries {
            cfg.max_retries = r;
        }
        Some(cfg)
    }
}
