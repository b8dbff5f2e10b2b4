//! Prompt templates. Bodies live in `templates/` as plain text with
//! `[bracketed]` slots; rendering substitutes every slot in a single pass and
//! fails on any slot left unbound, so a prompt can never silently ship with an
//! empty section.

use super::LlmError;

const P_KILL_BODY: &str = include_str!("../../templates/p_kill.txt");
const P_REASONING_BODY: &str = include_str!("../../templates/p_reasoning.txt");
const P_GEN_BODY: &str = include_str!("../../templates/p_gen.txt");

const P_KILL_SYSTEM: &str = "You are an expert in Cyber Kill Chain analysis annotating host audit logs for a forensic knowledge base.";
const P_REASONING_SYSTEM: &str =
    "You are a cyber forensic analyst investigating potential attacks in preprocessed system logs.";
const P_GEN_SYSTEM: &str =
    "You are a cyber forensic analyst responsible for consolidating reasoning results into an incident report.";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TemplateName {
    PKill,
    PReasoning,
    PGen,
}

impl TemplateName {
    pub fn as_str(self) -> &'static str {
        match self {
            TemplateName::PKill => "p_kill",
            TemplateName::PReasoning => "p_reasoning",
            TemplateName::PGen => "p_gen",
        }
    }
}

#[derive(Debug, Clone)]
pub struct PromptTemplate {
    pub name: TemplateName,
    pub system: &'static str,
    pub body: &'static str,
    slots: &'static [&'static str],
}

impl PromptTemplate {
    pub fn get(name: TemplateName) -> Self {
        match name {
            TemplateName::PKill => PromptTemplate {
                name,
                system: P_KILL_SYSTEM,
                body: P_KILL_BODY,
                slots: &["malicious_entities", "prior_summary", "sequences"],
            },
            TemplateName::PReasoning => PromptTemplate {
                name,
                system: P_REASONING_SYSTEM,
                body: P_REASONING_BODY,
                slots: &["payload", "detected", "summary", "sequence", "augmentation knowledge"],
            },
            TemplateName::PGen => PromptTemplate {
                name,
                system: P_GEN_SYSTEM,
                body: P_GEN_BODY,
                slots: &["reasoning_cache", "detected"],
            },
        }
    }

    pub fn placeholders(&self) -> &'static [&'static str] {
        self.slots
    }

    /// Substitutes bindings into the body. Single pass: substituted values are
    /// never re-scanned, so binding text containing `[slot]` stays literal.
    /// Unknown bracketed text that is not a declared slot passes through.
    pub fn render(&self, bindings: &[(&str, &str)]) -> Result<String, LlmError> {
        let mut out = String::with_capacity(self.body.len());
        let mut rest = self.body;
        'outer: while let Some(open) = rest.find('[') {
            out.push_str(&rest[..open]);
            let after = &rest[open + 1..];
            for slot in self.slots {
                if let Some(tail) = after.strip_prefix(slot) {
                    if let Some(tail) = tail.strip_prefix(']') {
                        let value = bindings
                            .iter()
                            .find(|(k, _)| k == slot)
                            .map(|(_, v)| *v)
                            .ok_or_else(|| LlmError::MissingPlaceholder {
                                template: self.name.as_str(),
                                placeholder: slot.to_string(),
                            })?;
                        out.push_str(value);
                        rest = tail;
                        continue 'outer;
                    }
                }
            }
            out.push('[');
            rest = after;
        }
        out.push_str(rest);
        Ok(out)
    }
}
