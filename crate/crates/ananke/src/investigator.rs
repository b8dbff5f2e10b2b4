//! The iterative investigation loop: expand suspicious entities into context
//! sequences, reason over each sequence with retrieved attack knowledge, and
//! feed newly implicated entities back into the frontier.
//!
//! Two FIFO queues drive the loop. `q_sus` holds entities awaiting expansion,
//! `q_ctx` holds sequences awaiting reasoning; `q_ctx` drains fully before the
//! next entity is expanded. Entities the model names are only accepted when
//! they resolve to an endpoint of the sequence under review, which keeps every
//! detection reachable from the alert.

use std::collections::{BTreeSet, HashMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::kb::{KnowledgeBase, KnowledgeUnit};
use crate::llm::{parse_reasoning, LlmBackend, LlmError, PromptTemplate, ReasoningResponse, TemplateName, TokenUsage};
use crate::model::{canonicalize, parse_canonical_key, recanonicalize, EntityKind, KillChainPhase};
use crate::provenance::{order_and_partition, ContextSequence, GraphError, InducedEdges, ProvenanceGraph};
use crate::vindex::{serialize_sequence, serialize_sequence_tabbed, threat_retrieve_k, Embedder, Metric, VectorIndex, VindexError};

/// Prior-summary length cap, in chars. The tail is kept: recent findings
/// matter more than the opening moves.
pub const SUMMARY_CHAR_CAP: usize = 4000;
/// Re-ask attempts when a reasoning response fails to parse.
pub const REASONING_RETRIES: u32 = 2;

#[derive(Debug, thiserror::Error)]
pub enum InvestigateError {
    #[error("no alert entity matches a node in the provenance graph: {0:?}")]
    AlertUnresolved(Vec<String>),
    #[error("invalid investigation config: {0}")]
    ConfigInvalid(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Vindex(#[from] VindexError),
    #[error(transparent)]
    Llm(#[from] LlmError),
}

/// The triggering alert: entity names (raw or canonical keys) plus free text.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AlertSpec {
    pub entities: Vec<String>,
    #[serde(default)]
    pub description: String,
}

/// How loosely alert names and model-named entities bind to graph nodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntityMatch {
    /// Canonical-key equality only.
    Exact,
    /// Equality first, then a case-insensitive substring match that must be
    /// unique among candidates.
    SubstringFallback,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InvestigationConfig {
    /// Max events per context sequence.
    pub n_max: usize,
    pub metric: Metric,
    /// Reasoning-step budget; hitting it is a warning, not an error.
    pub max_iterations: usize,
    pub induced_edges: InducedEdges,
    pub entity_match: EntityMatch,
    /// Knowledge units retrieved per reasoning step.
    pub retrieval_k: usize,
}

impl Default for InvestigationConfig {
    fn default() -> Self {
        InvestigationConfig {
            n_max: 20,
            metric: Metric::Cosine,
            max_iterations: 500,
            induced_edges: InducedEdges::Full,
            entity_match: EntityMatch::SubstringFallback,
            retrieval_k: 1,
        }
    }
}

impl InvestigationConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.n_max < 1 {
            return Err("n_max must be at least 1".into());
        }
        if self.max_iterations < 1 {
            return Err("max_iterations must be at least 1".into());
        }
        if self.retrieval_k < 1 {
            return Err("retrieval_k must be at least 1".into());
        }
        Ok(())
    }
}

/// Which knowledge unit a reasoning step consulted, and how well it matched.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievedRef {
    pub unit_id: String,
    pub score: f32,
    pub phase: KillChainPhase,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceRef {
    pub origin_node: String,
    pub chunk_index: usize,
}

/// One reasoning step: the sequence reviewed, the knowledge consulted, the
/// parsed verdict, and what the step cost.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CacheEntry {
    /// 1-based reasoning step number.
    pub iteration: usize,
    pub sequence: SequenceRef,
    pub retrieved: Vec<RetrievedRef>,
    pub response: ReasoningResponse,
    /// Accused entities that passed endpoint gating and were new this step.
    #[serde(default)]
    pub accepted: Vec<String>,
    pub usage: TokenUsage,
}

/// The graph the investigation ran over, frozen into the result so scoring
/// needs no other input. Edges are (subject, object) indices into `nodes`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UniverseSnapshot {
    pub nodes: Vec<String>,
    pub edges: Vec<(u32, u32)>,
}

impl UniverseSnapshot {
    pub fn from_graph(graph: &ProvenanceGraph) -> Self {
        let nodes: Vec<String> = graph.node_keys().map(str::to_string).collect();
        let pos: HashMap<&str, u32> = nodes.iter().enumerate().map(|(i, k)| (k.as_str(), i as u32)).collect();
        let edges = graph
            .edges()
            .iter()
            .map(|ev| (pos[ev.subject.canonical_key.as_str()], pos[ev.object.canonical_key.as_str()]))
            .collect();
        UniverseSnapshot { nodes, edges }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InvestigationResult {
    #[serde(default)]
    pub scenario_id: Option<String>,
    pub config: InvestigationConfig,
    pub alert: AlertSpec,
    pub cache: Vec<CacheEntry>,
    pub detected: BTreeSet<String>,
    pub final_summary: String,
    pub usage_total: TokenUsage,
    /// Alert entities that resolved to no graph node.
    pub unmatched_alert_entities: Vec<String>,
    pub warnings: Vec<String>,
    pub universe: UniverseSnapshot,
}

/// Binds a raw name (or canonical key) to a graph node. Tries the key itself,
/// then canonicalization under each kind in resolution priority order, then
/// (if allowed) a unique case-insensitive substring match over all node keys.
pub fn resolve_entity(graph: &ProvenanceGraph, raw: &str, mode: EntityMatch) -> Option<String> {
    if parse_canonical_key(raw).is_some() {
        if let Ok(key) = recanonicalize(raw) {
            if graph.contains_node(&key) {
                return Some(key);
            }
        }
    }
    for kind in EntityKind::RESOLUTION_ORDER {
        if let Ok(key) = canonicalize(kind, raw, None) {
            if graph.contains_node(&key) {
                return Some(key);
            }
        }
    }
    if mode == EntityMatch::SubstringFallback {
        let needle = raw.trim().to_lowercase();
        if !needle.is_empty() {
            let mut hits = graph.node_keys().filter(|k| k.to_lowercase().contains(&needle));
            if let (Some(only), None) = (hits.next(), hits.next()) {
                return Some(only.to_string());
            }
        }
    }
    None
}

/// Accepts a model-named entity only if it binds to an endpoint of the
/// sequence under review. The name arrives as a canonical-ish key; untagged
/// names were keyed under `other:` upstream, so matching falls back to the
/// bare name re-keyed under each kind, then to unique substring.
fn gate_to_endpoint(key: &str, endpoints: &BTreeSet<&str>, mode: EntityMatch) -> Option<String> {
    if endpoints.contains(key) {
        return Some(key.to_string());
    }
    let (_, name, pid) = parse_canonical_key(key)?;
    for kind in EntityKind::RESOLUTION_ORDER {
        if let Ok(candidate) = canonicalize(kind, name, pid) {
            if endpoints.contains(candidate.as_str()) {
                return Some(candidate);
            }
        }
    }
    if mode == EntityMatch::SubstringFallback {
        let needle = name.trim().to_lowercase();
        if !needle.is_empty() {
            let mut hits = endpoints.iter().filter(|k| k.to_lowercase().contains(&needle));
            if let (Some(only), None) = (hits.next(), hits.next()) {
                return Some((*only).to_string());
            }
        }
    }
    None
}

pub(crate) fn truncate_tail(s: &str, cap_chars: usize) -> String {
    let n = s.chars().count();
    if n <= cap_chars {
        return s.to_string();
    }
    s.chars().skip(n - cap_chars).collect()
}

fn render_payload(alert: &AlertSpec) -> String {
    let desc = if alert.description.trim().is_empty() { "suspicious activity alert" } else { alert.description.trim() };
    format!("{desc}; alert entities: {}", alert.entities.join(", "))
}

fn render_detected(detected: &BTreeSet<String>) -> String {
    if detected.is_empty() {
        "(none)".to_string()
    } else {
        detected.iter().cloned().collect::<Vec<_>>().join(", ")
    }
}

/// Retrieved units rendered for the prompt. Pattern events are shown without
/// timestamps (space-separated), distinct from the tabbed live sequence.
fn render_augmentation(units: &[(&KnowledgeUnit, f32)]) -> String {
    if units.is_empty() {
        return "(none)".to_string();
    }
    units
        .iter()
        .map(|(u, score)| {
            format!(
                "phase: {}\nbehavior: {}\nsimilarity: {score:.4}\npattern:\n{}",
                u.meta.phase,
                u.meta.behavior,
                serialize_sequence(&u.events)
            )
        })
        .collect::<Vec<_>>()
        .join("\n\n")
}

pub fn investigate(
    graph: &ProvenanceGraph,
    alert: &AlertSpec,
    kb: &KnowledgeBase,
    index: &VectorIndex,
    embedder: &dyn Embedder,
    backend: &dyn LlmBackend,
    cfg: &InvestigationConfig,
) -> Result<InvestigationResult, InvestigateError> {
    cfg.validate().map_err(InvestigateError::ConfigInvalid)?;

    let mut detected: BTreeSet<String> = BTreeSet::new();
    let mut unmatched: Vec<String> = Vec::new();
    let mut q_sus: VecDeque<String> = VecDeque::new();
    for raw in &alert.entities {
        match resolve_entity(graph, raw, cfg.entity_match) {
            Some(key) => {
                if detected.insert(key.clone()) {
                    q_sus.push_back(key);
                }
            }
            None => unmatched.push(raw.clone()),
        }
    }
    if detected.is_empty() {
        return Err(InvestigateError::AlertUnresolved(alert.entities.clone()));
    }

    let template = PromptTemplate::get(TemplateName::PReasoning);
    let payload = render_payload(alert);
    let mut visited: BTreeSet<String> = BTreeSet::new();
    let mut emitted: BTreeSet<(String, usize)> = BTreeSet::new();
    let mut q_ctx: VecDeque<ContextSequence> = VecDeque::new();
    let mut cache: Vec<CacheEntry> = Vec::new();
    let mut warnings: Vec<String> = Vec::new();
    let mut usage_total = TokenUsage::default();
    let mut summary = String::new();

    loop {
        if q_ctx.is_empty() && q_sus.is_empty() {
            break;
        }
        if cache.len() >= cfg.max_iterations {
            warnings.push(format!(
                "iteration_cap_reached: {} sequences and {} entities still queued",
                q_ctx.len(),
                q_sus.len()
            ));
            break;
        }

        if let Some(seq) = q_ctx.pop_front() {
            let iteration = cache.len() + 1;
            let retrieved_units = match threat_retrieve_k(index, kb, &seq.events, embedder, cfg.retrieval_k) {
                Ok(hits) => hits,
                Err(VindexError::EmptyIndex) => Vec::new(),
                Err(e) => return Err(e.into()),
            };
            let augmentation = render_augmentation(&retrieved_units);
            let detected_line = render_detected(&detected);
            let summary_line = if summary.is_empty() { "(none)".to_string() } else { summary.clone() };
            let sequence_text = serialize_sequence_tabbed(&seq.events);
            let user = template.render(&[
                ("payload", payload.as_str()),
                ("detected", detected_line.as_str()),
                ("summary", summary_line.as_str()),
                ("sequence", sequence_text.as_str()),
                ("augmentation knowledge", augmentation.as_str()),
            ])?;

            let mut step_usage = TokenUsage::default();
            let mut response: Option<ReasoningResponse> = None;
            let mut last_err = String::new();
            for _ in 0..=REASONING_RETRIES {
                let (raw, attempt_usage) = backend.complete(template.system, &user)?;
                step_usage += attempt_usage;
                match parse_reasoning(&raw) {
                    Ok(r) => {
                        response = Some(r);
                        break;
                    }
                    Err(e) => last_err = e.to_string(),
                }
            }
            usage_total += step_usage;
            let response =
                response.ok_or(LlmError::MalformedResponse { retries: REASONING_RETRIES, detail: last_err })?;

            let endpoints: BTreeSet<&str> = seq
                .events
                .iter()
                .flat_map(|e| [e.subject.canonical_key.as_str(), e.object.canonical_key.as_str()])
                .collect();
            let mut accepted = Vec::new();
            for key in &response.malicious_entities {
                match gate_to_endpoint(key, &endpoints, cfg.entity_match) {
                    Some(bound) => {
                        if detected.insert(bound.clone()) {
                            if !visited.contains(&bound) {
                                q_sus.push_back(bound.clone());
                            }
                            accepted.push(bound);
                        }
                    }
                    None => log::debug!("discarding accused entity {key:?}: not an endpoint of the current sequence"),
                }
            }
            if !response.summary.is_empty() {
                summary = truncate_tail(&response.summary, SUMMARY_CHAR_CAP);
            }

            cache.push(CacheEntry {
                iteration,
                sequence: SequenceRef { origin_node: seq.origin_node.clone(), chunk_index: seq.chunk_index },
                retrieved: retrieved_units
                    .iter()
                    .map(|(u, score)| RetrievedRef { unit_id: u.unit_id.clone(), score: *score, phase: u.meta.phase })
                    .collect(),
                response,
                accepted,
                usage: step_usage,
            });
        } else if let Some(entity) = q_sus.pop_front() {
            if !visited.insert(entity.clone()) {
                continue;
            }
            let sub = graph.adjacency_subgraph(&entity, cfg.induced_edges)?;
            for seq in order_and_partition(&sub, graph, cfg.n_max) {
                let mark = (seq.origin_node.clone(), seq.chunk_index);
                if emitted.insert(mark) {
                    q_ctx.push_back(seq);
                }
            }
        }
    }

    Ok(InvestigationResult {
        scenario_id: None,
        config: cfg.clone(),
        alert: alert.clone(),
        cache,
        detected,
        final_summary: summary,
        usage_total,
        unmatched_alert_entities: unmatched,
        warnings,
        universe: UniverseSnapshot::from_graph(graph),
    })
}
