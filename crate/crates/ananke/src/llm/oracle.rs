//! Deterministic rule-based backend. It answers the three prompt shapes from
//! a labeled lexicon instead of a model: entities in the lexicon are
//! malicious, everything else is benign, and phase hints drive annotation
//! segmentation. Pure function of the prompt, so runs are replayable without
//! a cassette.

use std::collections::BTreeMap;

use serde_json::json;

use super::{whitespace_tokens, LlmBackend, LlmError, TokenUsage};
use crate::model::{KillChainPhase, MaliciousEntitySet};

/// Markers the oracle keys on; they come verbatim from the template bodies.
const MARKER_REASONING: &str = "Current log sequence:";
const MARKER_KILL: &str = "classify the following host log triples";
const MARKER_GEN: &str = "Reasoning timeline (JSON):";
const MARKER_DETECTED: &str = "Confirmed malicious entities:";

pub struct RuleOracle {
    lexicon: MaliciousEntitySet,
    phase_hints: BTreeMap<String, KillChainPhase>,
}

struct PromptEvent<'a> {
    ts: u64,
    subject: &'a str,
    action: &'a str,
    object: &'a str,
}

impl RuleOracle {
    pub fn new(lexicon: MaliciousEntitySet, phase_hints: BTreeMap<String, KillChainPhase>) -> Self {
        RuleOracle { lexicon, phase_hints }
    }

    /// Event lines in prompts are `<ts>\t<subject>\t<action>\t<object>`.
    fn prompt_events<'a>(user: &'a str) -> Vec<PromptEvent<'a>> {
        user.lines()
            .filter_map(|line| {
                let mut fields = line.split('\t');
                let ts = fields.next()?.trim().parse().ok()?;
                let subject = fields.next()?;
                let action = fields.next()?;
                let object = fields.next()?;
                if fields.next().is_some() {
                    return None;
                }
                Some(PromptEvent { ts, subject, action, object })
            })
            .collect()
    }

    fn usage_for(system: &str, user: &str, response: &str) -> TokenUsage {
        TokenUsage {
            prompt_tokens: whitespace_tokens(system) + whitespace_tokens(user),
            reasoning_tokens: 0,
            answer_tokens: whitespace_tokens(response),
        }
    }

    fn answer_reasoning(&self, user: &str) -> Result<String, LlmError> {
        let events = Self::prompt_events(user);
        let mut malicious: Vec<&str> = Vec::new();
        let mut benign: Vec<&str> = Vec::new();
        for ev in &events {
            for key in [ev.subject, ev.object] {
                if malicious.contains(&key) || benign.contains(&key) {
                    continue;
                }
                if self.lexicon.contains(key) {
                    malicious.push(key);
                } else {
                    benign.push(key);
                }
            }
        }
        let behaviors: Vec<String> =
            malicious.iter().map(|k| format!("{k} matched a known attack indicator")).collect();
        let span = match (events.first(), events.last()) {
            (Some(a), Some(b)) => format!("{}..{}", a.ts, b.ts),
            _ => "empty".to_string(),
        };
        let summary = format!(
            "events {span}: flagged [{}]; cleared {} benign",
            malicious.join(", "),
            benign.len()
        );
        Ok(json!({
            "malicious_entities": malicious,
            "benign_entities": benign,
            "behaviors": behaviors,
            "summary": summary,
        })
        .to_string())
    }

    fn answer_kill(&self, user: &str) -> Result<String, LlmError> {
        let events = Self::prompt_events(user);
        if events.is_empty() {
            return Err(LlmError::PromptShapeUnrecognized);
        }
        // segment maximal runs of equal phase; an event's phase is the latest
        // hinted phase among its endpoints (the chain only moves forward),
        // else the previous event's
        let mut runs: Vec<(KillChainPhase, Vec<&PromptEvent>)> = Vec::new();
        let mut current: Option<KillChainPhase> = None;
        for ev in &events {
            let hinted = match (self.phase_hints.get(ev.subject), self.phase_hints.get(ev.object)) {
                (Some(&a), Some(&b)) => Some(a.max(b)),
                (a, b) => a.or(b).copied(),
            };
            let phase = hinted.or(current).unwrap_or(KillChainPhase::Delivery);
            match runs.last_mut() {
                Some((p, run)) if *p == phase => run.push(ev),
                _ => runs.push((phase, vec![ev])),
            }
            current = Some(phase);
        }
        let segments: Vec<serde_json::Value> = runs
            .iter()
            .enumerate()
            .map(|(i, (phase, run))| {
                let mut entities: Vec<&str> = Vec::new();
                for ev in run {
                    for key in [ev.subject, ev.object] {
                        if self.lexicon.contains(key) && !entities.contains(&key) {
                            entities.push(key);
                        }
                    }
                }
                let prev = if i == 0 { "start of chain".to_string() } else { runs[i - 1].0.to_string() };
                let next = runs.get(i + 1).map(|(p, _)| p.to_string()).unwrap_or_else(|| "end of chain".to_string());
                json!({
                    "phase": phase.to_string(),
                    "behavior": format!("{phase} activity involving {}", entities.join(", ")),
                    "entities": entities,
                    "neighbors": {"prev": prev, "next": next},
                    "events": run.iter().map(|ev| json!({
                        "ts": ev.ts, "s": ev.subject, "a": ev.action, "o": ev.object,
                    })).collect::<Vec<_>>(),
                })
            })
            .collect();
        Ok(serde_json::Value::Array(segments).to_string())
    }

    fn answer_gen(&self, user: &str) -> Result<String, LlmError> {
        let value = super::find_first_json(user).ok_or(LlmError::PromptShapeUnrecognized)?;
        let timeline = value
            .get("timeline")
            .and_then(|t| t.as_array())
            .cloned()
            .or_else(|| value.as_array().cloned())
            .unwrap_or_default();
        let mut phases: Vec<String> = Vec::new();
        for row in &timeline {
            if let Some(p) = row.get("phase").and_then(|p| p.as_str()) {
                if phases.last().map(String::as_str) != Some(p) {
                    phases.push(p.to_string());
                }
            }
        }
        let detected = user
            .lines()
            .find_map(|l| l.strip_prefix(MARKER_DETECTED))
            .map(str::trim)
            .unwrap_or("");
        Ok(format!(
            "Attack reconstruction digest.\nPhases in order: {}.\nConfirmed malicious entities: {}.\nTimeline steps: {}.",
            if phases.is_empty() { "(none)".to_string() } else { phases.join(" -> ") },
            if detected.is_empty() { "(none)" } else { detected },
            timeline.len()
        ))
    }
}

impl LlmBackend for RuleOracle {
    fn id(&self) -> &str {
        "rule-oracle"
    }

    fn complete(&self, system: &str, user: &str) -> Result<(String, TokenUsage), LlmError> {
        let response = if user.contains(MARKER_REASONING) {
            self.answer_reasoning(user)?
        } else if user.contains(MARKER_KILL) {
            self.answer_kill(user)?
        } else if user.contains(MARKER_GEN) {
            self.answer_gen(user)?
        } else {
            return Err(LlmError::PromptShapeUnrecognized);
        };
        let usage = Self::usage_for(system, user, &response);
        Ok((response, usage))
    }
}
