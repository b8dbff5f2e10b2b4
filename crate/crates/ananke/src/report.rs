//! Turns an investigation result into analyst-facing output: a structured
//! timeline with per-entity roles, optionally topped with a prose narrative
//! consolidated by the language model. The structured report is pure data
//! derived from the cache; the narrative is best-effort and its absence is a
//! warning, never a failure.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::investigator::InvestigationResult;
use crate::llm::{LlmBackend, PromptTemplate, TemplateName, TokenUsage};
use crate::model::KillChainPhase;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimelineRow {
    pub iteration: usize,
    /// Phase of the best-matching knowledge unit, when one was retrieved.
    pub phase: Option<KillChainPhase>,
    pub behavior: String,
    pub entities: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Malicious,
    /// Touched the attack path but was judged benign.
    BenignParticipant,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EntityRole {
    pub verdict: Verdict,
    /// Reasoning step that first placed the entity; 0 means it arrived with
    /// the alert.
    pub first_seen_iteration: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Report {
    pub scenario_id: Option<String>,
    pub narrative: Option<String>,
    pub timeline: Vec<TimelineRow>,
    pub entity_roles: BTreeMap<String, EntityRole>,
    pub detected: Vec<String>,
    pub warnings: Vec<String>,
}

/// What the narrative prompt gets to see.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NarrativeInput {
    /// The condensed timeline rows.
    Timeline,
    /// Every cache entry verbatim. Costs more tokens, loses nothing.
    FullCache,
}

pub fn build_structured_report(result: &InvestigationResult) -> Report {
    let timeline: Vec<TimelineRow> = result
        .cache
        .iter()
        .map(|entry| TimelineRow {
            iteration: entry.iteration,
            phase: entry.retrieved.first().map(|r| r.phase),
            behavior: entry.response.behaviors.join("; "),
            entities: entry.response.malicious_entities.clone(),
        })
        .collect();

    let mut entity_roles: BTreeMap<String, EntityRole> = BTreeMap::new();
    // detections named by a step get that step; the rest came with the alert
    for key in &result.detected {
        entity_roles.insert(key.clone(), EntityRole { verdict: Verdict::Malicious, first_seen_iteration: 0 });
    }
    for entry in &result.cache {
        for key in &entry.accepted {
            if let Some(role) = entity_roles.get_mut(key) {
                if role.first_seen_iteration == 0 {
                    role.first_seen_iteration = entry.iteration;
                }
            }
        }
        // benign participants only count when they name a real graph node and
        // never get overturned below
        for key in &entry.response.benign_entities {
            if result.universe.nodes.binary_search(key).is_ok() {
                entity_roles
                    .entry(key.clone())
                    .or_insert(EntityRole { verdict: Verdict::BenignParticipant, first_seen_iteration: entry.iteration });
            }
        }
    }
    // a malicious verdict always wins over an earlier benign mention
    for key in &result.detected {
        if let Some(role) = entity_roles.get_mut(key) {
            role.verdict = Verdict::Malicious;
        }
    }

    Report {
        scenario_id: result.scenario_id.clone(),
        narrative: None,
        timeline,
        entity_roles,
        detected: result.detected.iter().cloned().collect(),
        warnings: result.warnings.clone(),
    }
}

/// Asks the backend to consolidate the report into prose and attaches it.
/// On failure the report survives unchanged except for a warning; returns the
/// tokens spent either way.
pub fn attach_narrative(
    report: &mut Report,
    result: &InvestigationResult,
    backend: &dyn LlmBackend,
    input: NarrativeInput,
) -> TokenUsage {
    let cache_json = match input {
        NarrativeInput::Timeline => serde_json::json!({
            "timeline": report.timeline,
            "final_summary": result.final_summary,
        }),
        NarrativeInput::FullCache => serde_json::json!({
            "timeline": result.cache,
            "final_summary": result.final_summary,
        }),
    };
    let cache_text = serde_json::to_string_pretty(&cache_json).expect("cache serializes");
    let detected_line = if report.detected.is_empty() { "(none)".to_string() } else { report.detected.join(", ") };

    let template = PromptTemplate::get(TemplateName::PGen);
    let user = match template.render(&[("reasoning_cache", cache_text.as_str()), ("detected", detected_line.as_str())]) {
        Ok(u) => u,
        Err(e) => {
            report.warnings.push(format!("narrative_unavailable: {e}"));
            return TokenUsage::default();
        }
    };
    match backend.complete(template.system, &user) {
        Ok((text, usage)) => {
            report.narrative = Some(text);
            usage
        }
        Err(e) => {
            report.warnings.push(format!("narrative_unavailable: {e}"));
            TokenUsage::default()
        }
    }
}

/// Plain markdown rendering for terminals and ticket systems.
pub fn render_markdown(report: &Report) -> String {
    let mut out = String::new();
    out.push_str("# Investigation report");
    if let Some(id) = &report.scenario_id {
        out.push_str(&format!(": {id}"));
    }
    out.push_str("\n\n");

    if let Some(narrative) = &report.narrative {
        out.push_str("## Narrative\n\n");
        out.push_str(narrative);
        out.push_str("\n\n");
    }

    out.push_str("## Detected malicious entities\n\n");
    if report.detected.is_empty() {
        out.push_str("(none)\n");
    } else {
        for key in &report.detected {
            out.push_str(&format!("- `{key}`\n"));
        }
    }
    out.push('\n');

    out.push_str("## Timeline\n\n");
    if report.timeline.is_empty() {
        out.push_str("(no reasoning steps)\n");
    } else {
        out.push_str("| step | phase | behavior | entities |\n|---|---|---|---|\n");
        for row in &report.timeline {
            let phase = row.phase.map(|p| p.to_string()).unwrap_or_else(|| "-".into());
            out.push_str(&format!(
                "| {} | {} | {} | {} |\n",
                row.iteration,
                phase,
                row.behavior.replace('|', "\\|"),
                row.entities.join(", ").replace('|', "\\|")
            ));
        }
    }
    out.push('\n');

    out.push_str("## Entity roles\n\n");
    for (key, role) in &report.entity_roles {
        let verdict = match role.verdict {
            Verdict::Malicious => "malicious",
            Verdict::BenignParticipant => "benign participant",
        };
        let origin = if role.first_seen_iteration == 0 {
            "alert".to_string()
        } else {
            format!("step {}", role.first_seen_iteration)
        };
        out.push_str(&format!("- `{key}`: {verdict} (first seen: {origin})\n"));
    }

    if !report.warnings.is_empty() {
        out.push_str("\n## Warnings\n\n");
        for w in &report.warnings {
            out.push_str(&format!("- {w}\n"));
        }
    }
    out
}
