//! Kill-chain knowledge base: extract attack traces from labeled logs,
//! annotate them into phase segments, chunk and embed the segments, persist.
//!
//! On-disk layout is a directory with `manifest.json` and `units.jsonl`;
//! vectors are base64 little-endian f32, so a save/load round trip is
//! bit-exact.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ingest::LogSet;
use crate::llm::{find_first_json, response_entity_key, LlmBackend, LlmError, PromptTemplate, TemplateName, TokenUsage};
use crate::model::{Event, KillChainPhase, MaliciousEntitySet, Platform};
use crate::vindex::{embed_batch, serialize_sequence, serialize_sequence_tabbed, Embedder, EmbeddingVector, VindexError};

pub const KB_FORMAT_VERSION: &str = "kb-v1";
/// Max trace events per annotation prompt; longer traces are windowed.
pub const ANNOTATION_WINDOW: usize = 400;
/// Re-ask attempts when an annotation response fails to parse.
pub const ANNOTATION_RETRIES: u32 = 2;
/// Default chunk size for knowledge units.
pub const DEFAULT_N_MAX: usize = 20;

#[derive(Debug, thiserror::Error)]
pub enum KbError {
    #[error("scenario {0:?} is already in the knowledge base")]
    DuplicateScenario(String),
    #[error("knowledge base format {found:?} is not supported (expected {expected:?})")]
    FormatVersionMismatch { found: String, expected: String },
    #[error("knowledge base was built with embedder {manifest:?}, got {embedder:?}")]
    EmbedderMismatch { manifest: String, embedder: String },
    #[error("duplicate unit id {0}")]
    DuplicateUnit(String),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Vindex(#[from] VindexError),
    #[error("cannot access {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse {path}: {detail}")]
    Parse { path: String, detail: String },
}

fn io_err(path: &Path, source: std::io::Error) -> KbError {
    KbError::Io { path: path.display().to_string(), source }
}

/// Phase metadata shared by a segment and every unit chunked out of it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseMeta {
    pub phase: KillChainPhase,
    pub behavior: String,
    pub entities: Vec<String>,
    pub neighbors: NeighborSummary,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct NeighborSummary {
    pub prev: String,
    pub next: String,
}

/// One annotated phase segment of an attack trace, in temporal order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnnotatedSequence {
    pub meta: PhaseMeta,
    pub events: Vec<Event>,
    pub scenario_id: String,
}

/// A retrievable unit: one chunk of an annotated segment plus its embedding.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KnowledgeUnit {
    pub unit_id: String,
    pub meta: PhaseMeta,
    pub events: Vec<Event>,
    pub vector: EmbeddingVector,
    pub scenario_id: String,
    pub platform: Platform,
}

/// How completely the annotator covered the trace, and what had to be fixed.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct CoverageReport {
    pub windows: usize,
    pub claimed: usize,
    /// Events the annotator omitted; re-attached to the nearest preceding segment.
    pub repaired: usize,
    /// True when segments or events came back out of temporal order.
    pub reordered: bool,
    pub retries_used: u32,
}

#[derive(Debug)]
pub struct AnnotationResult {
    pub segments: Vec<AnnotatedSequence>,
    pub coverage: CoverageReport,
    pub usage: TokenUsage,
}

/// Events with the labeled set as subject or object, original order preserved.
/// This is direct incidence only; unlabeled bystander events stay out.
pub fn extract_trace(log_set: &LogSet, e_mal: &MaliciousEntitySet) -> Vec<Event> {
    log_set
        .events
        .iter()
        .filter(|ev| e_mal.contains(&ev.subject.canonical_key) || e_mal.contains(&ev.object.canonical_key))
        .cloned()
        .collect()
}

struct ParsedSegment {
    meta: PhaseMeta,
    // indices into the window's event slice
    claimed: Vec<usize>,
}

/// Parses one annotation response against the window it described. Every
/// claimed event must map back to a window event by (ts, subject, action,
/// object); inventing events or unparseable phases fails the attempt.
fn parse_annotation(raw: &str, window: &[Event]) -> Result<Vec<ParsedSegment>, LlmError> {
    let value = find_first_json(raw).ok_or(LlmError::NoJsonFound)?;
    let segments = value
        .as_array()
        .ok_or_else(|| LlmError::SchemaViolation("annotation must be a json array".into()))?;
    if segments.is_empty() {
        return Err(LlmError::SchemaViolation("annotation has no segments".into()));
    }

    // (ts, subject-key, action, object-key) -> unclaimed window indices, in order
    let mut lookup: HashMap<(u64, &str, &str, &str), Vec<usize>> = HashMap::new();
    for (i, ev) in window.iter().enumerate() {
        lookup
            .entry((ev.timestamp, &ev.subject.canonical_key, &ev.action, &ev.object.canonical_key))
            .or_default()
            .push(i);
    }
    let mut cursor: HashMap<(u64, &str, &str, &str), usize> = HashMap::new();

    let mut parsed = Vec::with_capacity(segments.len());
    for seg in segments {
        let phase: KillChainPhase = seg
            .get("phase")
            .and_then(|p| p.as_str())
            .ok_or_else(|| LlmError::SchemaViolation("segment without phase".into()))?
            .parse()
            .map_err(|e| LlmError::SchemaViolation(format!("{e}")))?;
        let behavior = seg.get("behavior").and_then(|b| b.as_str()).unwrap_or_default().to_string();
        let entities = match seg.get("entities") {
            None => Vec::new(),
            Some(v) => v
                .as_array()
                .ok_or_else(|| LlmError::SchemaViolation("entities must be an array".into()))?
                .iter()
                .map(response_entity_key)
                .collect::<Result<_, _>>()?,
        };
        let neighbors = NeighborSummary {
            prev: seg.pointer("/neighbors/prev").and_then(|v| v.as_str()).unwrap_or_default().to_string(),
            next: seg.pointer("/neighbors/next").and_then(|v| v.as_str()).unwrap_or_default().to_string(),
        };
        let mut claimed = Vec::new();
        let claims = seg
            .get("events")
            .and_then(|e| e.as_array())
            .ok_or_else(|| LlmError::SchemaViolation("segment without events".into()))?;
        for claim in claims {
            let ts = claim
                .get("ts")
                .and_then(|t| t.as_u64())
                .ok_or_else(|| LlmError::SchemaViolation("claimed event without ts".into()))?;
            let s = claim.get("s").and_then(|v| v.as_str()).unwrap_or_default();
            let a = claim.get("a").and_then(|v| v.as_str()).unwrap_or_default();
            let o = claim.get("o").and_then(|v| v.as_str()).unwrap_or_default();
            let key = (ts, s, a, o);
            let Some(candidates) = lookup.get(&key) else {
                return Err(LlmError::SchemaViolation(format!("claimed event not in trace: {ts} {s} {a} {o}")));
            };
            let pos = cursor.entry(key).or_insert(0);
            if *pos >= candidates.len() {
                return Err(LlmError::SchemaViolation(format!("event claimed more often than it occurs: {ts} {s} {a} {o}")));
            }
            claimed.push(candidates[*pos]);
            *pos += 1;
        }
        parsed.push(ParsedSegment { meta: PhaseMeta { phase, behavior, entities, neighbors }, claimed });
    }
    Ok(parsed)
}

/// Annotates a trace into phase segments via the backend's P_kill prompt.
/// Traces longer than `ANNOTATION_WINDOW` are processed in windows with the
/// previous window's closing segment summarized into the next prompt. Omitted
/// events are re-attached rather than dropped; malformed responses are retried
/// up to `retries` times per window.
pub fn annotate_phases(
    trace: &[Event],
    e_mal: &MaliciousEntitySet,
    backend: &dyn LlmBackend,
) -> Result<AnnotationResult, KbError> {
    annotate_phases_with_retries(trace, e_mal, backend, ANNOTATION_RETRIES)
}

pub fn annotate_phases_with_retries(
    trace: &[Event],
    e_mal: &MaliciousEntitySet,
    backend: &dyn LlmBackend,
    retries: u32,
) -> Result<AnnotationResult, KbError> {
    let mut segments: Vec<AnnotatedSequence> = Vec::new();
    let mut coverage = CoverageReport::default();
    let mut usage = TokenUsage::default();
    if trace.is_empty() {
        return Ok(AnnotationResult { segments, coverage, usage });
    }

    let template = PromptTemplate::get(TemplateName::PKill);
    let lexicon_line = e_mal.keys().collect::<Vec<_>>().join(", ");
    let mut prior_summary = "(none)".to_string();

    for window in trace.chunks(ANNOTATION_WINDOW) {
        coverage.windows += 1;
        let sequences = serialize_sequence_tabbed(window);
        let user = template.render(&[
            ("malicious_entities", lexicon_line.as_str()),
            ("prior_summary", prior_summary.as_str()),
            ("sequences", sequences.as_str()),
        ])?;

        let mut parsed: Option<Vec<ParsedSegment>> = None;
        let mut last_err = String::new();
        for attempt in 0..=retries {
            let (raw, step_usage) = backend.complete(template.system, &user)?;
            usage += step_usage;
            match parse_annotation(&raw, window) {
                Ok(p) => {
                    if attempt > 0 {
                        coverage.retries_used += attempt;
                    }
                    parsed = Some(p);
                    break;
                }
                Err(e) => last_err = e.to_string(),
            }
        }
        let mut parsed = parsed.ok_or(LlmError::MalformedResponse { retries, detail: last_err })?;

        // coverage repair: unclaimed events go to the nearest preceding segment
        coverage.claimed += parsed.iter().map(|s| s.claimed.len()).sum::<usize>();
        let mut claimed_flags = vec![false; window.len()];
        for seg in &parsed {
            for &i in &seg.claimed {
                claimed_flags[i] = true;
            }
        }
        for (idx, flag) in claimed_flags.iter().enumerate() {
            if *flag {
                continue;
            }
            // nearest preceding segment, else fall forward to the first
            let target = parsed.iter().rposition(|seg| seg.claimed.iter().any(|&c| c < idx)).unwrap_or(0);
            parsed[target].claimed.push(idx);
            coverage.repaired += 1;
        }

        // segments left empty after repair carry no events to chunk
        parsed.retain(|seg| !seg.claimed.is_empty());

        // temporal order: sort events within segments, then segments by first event
        for seg in &mut parsed {
            let before = seg.claimed.clone();
            seg.claimed.sort_unstable();
            if seg.claimed != before {
                coverage.reordered = true;
            }
        }
        let firsts: Vec<usize> = parsed.iter().map(|s| s.claimed[0]).collect();
        if firsts.windows(2).any(|w| w[0] > w[1]) {
            coverage.reordered = true;
            parsed.sort_by_key(|s| s.claimed[0]);
        }

        for seg in parsed {
            segments.push(AnnotatedSequence {
                meta: seg.meta,
                events: seg.claimed.iter().map(|&i| window[i].clone()).collect(),
                scenario_id: e_mal.scenario_id.clone(),
            });
        }
        if let Some(last) = segments.last() {
            prior_summary = format!("{}: {}", last.meta.phase, last.meta.behavior);
        }
    }
    Ok(AnnotationResult { segments, coverage, usage })
}

fn unit_id(scenario_id: &str, serialized_chunk: &str) -> String {
    let mut hasher = Sha256::new();
    hasher.update(scenario_id.as_bytes());
    hasher.update([0u8]);
    hasher.update(serialized_chunk.as_bytes());
    hex::encode(&hasher.finalize()[..16])
}

/// Splits each segment into chunks of at most `n_max` events and embeds each
/// chunk's serialization. Chunks inherit the segment's phase metadata.
/// unit_id hashes (scenario_id, timestamped chunk text): re-adding identical
/// data dedups, while repeated behavior at different times stays distinct.
/// Embeddings drop timestamps so those repeats still share a vector.
pub fn chunk_and_embed(
    annotated: &[AnnotatedSequence],
    embedder: &dyn Embedder,
    n_max: usize,
    platform: Platform,
) -> Result<Vec<KnowledgeUnit>, KbError> {
    assert!(n_max >= 1, "n_max must be at least 1");
    let mut skeletons = Vec::new();
    let mut texts = Vec::new();
    for seg in annotated {
        for chunk in seg.events.chunks(n_max) {
            let id = unit_id(&seg.scenario_id, &serialize_sequence_tabbed(chunk));
            skeletons.push((seg, chunk, id));
            texts.push(serialize_sequence(chunk));
        }
    }
    let vectors = embed_batch(embedder, texts)?;
    Ok(skeletons
        .into_iter()
        .zip(vectors)
        .map(|((seg, chunk, unit_id), vector)| KnowledgeUnit {
            unit_id,
            meta: seg.meta.clone(),
            events: chunk.to_vec(),
            vector,
            scenario_id: seg.scenario_id.clone(),
            platform,
        })
        .collect())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KbManifest {
    pub format_version: String,
    pub embedder_id: String,
    pub dim: usize,
    pub n_max: usize,
    pub scenarios: Vec<String>,
}

/// What one `add_scenario` did.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AddReport {
    pub scenario_id: String,
    pub units_added: usize,
    /// Exact-duplicate chunks skipped (same scenario, same serialization).
    pub units_deduped: usize,
    pub coverage: CoverageReport,
    pub usage: TokenUsage,
}

/// Append-only store of knowledge units. Adding a scenario never mutates the
/// units already present.
#[derive(Debug)]
pub struct KnowledgeBase {
    pub manifest: KbManifest,
    units: Vec<KnowledgeUnit>,
    by_id: HashMap<String, usize>,
}

impl KnowledgeBase {
    pub fn new(embedder: &dyn Embedder, n_max: usize) -> Self {
        KnowledgeBase {
            manifest: KbManifest {
                format_version: KB_FORMAT_VERSION.to_string(),
                embedder_id: embedder.id().to_string(),
                dim: embedder.dim(),
                n_max,
                scenarios: Vec::new(),
            },
            units: Vec::new(),
            by_id: HashMap::new(),
        }
    }

    pub fn units(&self) -> &[KnowledgeUnit] {
        &self.units
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    pub fn get(&self, unit_id: &str) -> Option<&KnowledgeUnit> {
        self.by_id.get(unit_id).map(|&i| &self.units[i])
    }

    pub fn scenarios(&self) -> &[String] {
        &self.manifest.scenarios
    }

    /// Inserts one unit; colliding unit ids are an error.
    pub fn insert_unit(&mut self, unit: KnowledgeUnit) -> Result<(), KbError> {
        if unit.vector.dim() != self.manifest.dim {
            return Err(VindexError::DimensionMismatch { expected: self.manifest.dim, found: unit.vector.dim() }.into());
        }
        if self.by_id.contains_key(&unit.unit_id) {
            return Err(KbError::DuplicateUnit(unit.unit_id));
        }
        if !self.manifest.scenarios.contains(&unit.scenario_id) {
            self.manifest.scenarios.push(unit.scenario_id.clone());
        }
        self.by_id.insert(unit.unit_id.clone(), self.units.len());
        self.units.push(unit);
        Ok(())
    }

    /// Runs the full pipeline for one labeled scenario and appends the
    /// resulting units. Re-adding a scenario id is an error.
    pub fn add_scenario(
        &mut self,
        log_set: &LogSet,
        e_mal: &MaliciousEntitySet,
        backend: &dyn LlmBackend,
        embedder: &dyn Embedder,
    ) -> Result<AddReport, KbError> {
        if self.manifest.scenarios.contains(&e_mal.scenario_id) {
            return Err(KbError::DuplicateScenario(e_mal.scenario_id.clone()));
        }
        if embedder.id() != self.manifest.embedder_id {
            return Err(KbError::EmbedderMismatch {
                manifest: self.manifest.embedder_id.clone(),
                embedder: embedder.id().to_string(),
            });
        }
        let trace = extract_trace(log_set, e_mal);
        let annotated = annotate_phases(&trace, e_mal, backend)?;
        let units = chunk_and_embed(&annotated.segments, embedder, self.manifest.n_max, log_set.platform())?;
        let mut added = 0;
        let mut deduped = 0;
        for unit in units {
            match self.insert_unit(unit) {
                Ok(()) => added += 1,
                Err(KbError::DuplicateUnit(_)) => deduped += 1,
                Err(e) => return Err(e),
            }
        }
        if !self.manifest.scenarios.contains(&e_mal.scenario_id) {
            self.manifest.scenarios.push(e_mal.scenario_id.clone());
        }
        Ok(AddReport {
            scenario_id: e_mal.scenario_id.clone(),
            units_added: added,
            units_deduped: deduped,
            coverage: annotated.coverage,
            usage: annotated.usage,
        })
    }

    pub fn save(&self, dir: &Path) -> Result<(), KbError> {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        let manifest_path = dir.join("manifest.json");
        let manifest = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        fs::write(&manifest_path, manifest).map_err(|e| io_err(&manifest_path, e))?;

        let units_path = dir.join("units.jsonl");
        let mut out = String::new();
        for unit in &self.units {
            let record = UnitRecord::from_unit(unit);
            out.push_str(&serde_json::to_string(&record).expect("unit serializes"));
            out.push('\n');
        }
        fs::write(&units_path, out).map_err(|e| io_err(&units_path, e))
    }

    pub fn load(dir: &Path) -> Result<Self, KbError> {
        let manifest_path = dir.join("manifest.json");
        let manifest_text = fs::read_to_string(&manifest_path).map_err(|e| io_err(&manifest_path, e))?;
        let manifest: KbManifest = serde_json::from_str(&manifest_text)
            .map_err(|e| KbError::Parse { path: manifest_path.display().to_string(), detail: e.to_string() })?;
        if manifest.format_version != KB_FORMAT_VERSION {
            return Err(KbError::FormatVersionMismatch {
                found: manifest.format_version,
                expected: KB_FORMAT_VERSION.to_string(),
            });
        }
        let units_path = dir.join("units.jsonl");
        let units_text = fs::read_to_string(&units_path).map_err(|e| io_err(&units_path, e))?;
        let mut kb = KnowledgeBase { manifest, units: Vec::new(), by_id: HashMap::new() };
        let scenarios = std::mem::take(&mut kb.manifest.scenarios);
        for (i, line) in units_text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let record: UnitRecord = serde_json::from_str(line)
                .map_err(|e| KbError::Parse { path: units_path.display().to_string(), detail: format!("line {}: {e}", i + 1) })?;
            let unit = record
                .into_unit()
                .map_err(|e| KbError::Parse { path: units_path.display().to_string(), detail: format!("line {}: {e}", i + 1) })?;
            kb.insert_unit(unit)?;
        }
        // the manifest's scenario list is authoritative (covers empty scenarios)
        kb.manifest.scenarios = scenarios;
        Ok(kb)
    }
}

#[derive(Serialize, Deserialize)]
struct UnitRecord {
    unit_id: String,
    scenario_id: String,
    platform: Platform,
    meta: PhaseMeta,
    events: Vec<Event>,
    vector_b64: String,
}

impl UnitRecord {
    fn from_unit(unit: &KnowledgeUnit) -> Self {
        let mut bytes = Vec::with_capacity(unit.vector.dim() * 4);
        for v in unit.vector.values() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        UnitRecord {
            unit_id: unit.unit_id.clone(),
            scenario_id: unit.scenario_id.clone(),
            platform: unit.platform,
            meta: unit.meta.clone(),
            events: unit.events.clone(),
            vector_b64: B64.encode(bytes),
        }
    }

    fn into_unit(self) -> Result<KnowledgeUnit, String> {
        let bytes = B64.decode(self.vector_b64.as_bytes()).map_err(|e| format!("bad vector base64: {e}"))?;
        if bytes.len() % 4 != 0 {
            return Err(format!("vector byte length {} is not a multiple of 4", bytes.len()));
        }
        let values: Vec<f32> = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        let vector = EmbeddingVector::new(values).map_err(|e| e.to_string())?;
        Ok(KnowledgeUnit {
            unit_id: self.unit_id,
            meta: self.meta,
            events: self.events,
            vector,
            scenario_id: self.scenario_id,
            platform: self.platform,
        })
    }
}
