//! Core domain types: entities, events, kill-chain phases, malicious entity sets.
//!
//! Everything downstream keys on `Entity::canonical_key`. Canonicalization is
//! deterministic and idempotent; two raw spellings that normalize to the same
//! key are the same node by design.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid entity name {0:?}")]
    InvalidEntity(String),
    #[error("unknown kill chain phase {0:?}")]
    UnknownPhase(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EntityKind {
    Process,
    File,
    Socket,
    Domain,
    IpAddress,
    Registry,
    Other,
}

impl EntityKind {
    /// Prefix used in canonical keys, e.g. `process:` or `ip:`.
    pub fn tag(self) -> &'static str {
        match self {
            EntityKind::Process => "process",
            EntityKind::File => "file",
            EntityKind::Socket => "socket",
            EntityKind::Domain => "domain",
            EntityKind::IpAddress => "ip",
            EntityKind::Registry => "registry",
            EntityKind::Other => "other",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        Some(match tag {
            "process" => EntityKind::Process,
            "file" => EntityKind::File,
            "socket" => EntityKind::Socket,
            "domain" => EntityKind::Domain,
            "ip" => EntityKind::IpAddress,
            "registry" => EntityKind::Registry,
            "other" => EntityKind::Other,
            _ => return None,
        })
    }

    /// Lenient parse for wire inputs. Unknown kinds map to `Other`, never an error.
    pub fn parse_loose(s: &str) -> Self {
        match s.trim().to_ascii_lowercase().as_str() {
            "process" | "proc" => EntityKind::Process,
            "file" | "path" => EntityKind::File,
            "socket" | "sock" => EntityKind::Socket,
            "domain" | "dns" | "hostname" => EntityKind::Domain,
            "ip" | "ipaddress" | "ip_address" | "ipaddr" => EntityKind::IpAddress,
            "registry" | "regkey" | "reg" => EntityKind::Registry,
            _ => EntityKind::Other,
        }
    }

    /// Resolution priority when a bare name could be any kind.
    pub const RESOLUTION_ORDER: [EntityKind; 7] = [
        EntityKind::Process,
        EntityKind::File,
        EntityKind::IpAddress,
        EntityKind::Domain,
        EntityKind::Socket,
        EntityKind::Registry,
        EntityKind::Other,
    ];
}

/// Builds the canonical key for an entity. Rules per kind:
/// process -> basename, lowercased, `#pid` appended when pid is known;
/// file -> separators normalized to `/`, lowercased only for drive-letter paths;
/// ip -> leading zeros stripped per octet; domain -> lowercased, trailing dot
/// dropped; registry -> lowercased; socket/other -> trimmed as-is.
pub fn canonicalize(kind: EntityKind, raw_name: &str, pid: Option<u32>) -> Result<String, ModelError> {
    let trimmed = raw_name.trim();
    if trimmed.is_empty() {
        return Err(ModelError::InvalidEntity(raw_name.to_string()));
    }
    let name = match kind {
        EntityKind::Process => {
            let path = trimmed.replace('\\', "/");
            let base = path.rsplit('/').next().unwrap_or("");
            if base.is_empty() {
                return Err(ModelError::InvalidEntity(raw_name.to_string()));
            }
            base.to_lowercase()
        }
        EntityKind::File => {
            let path = trimmed.replace('\\', "/");
            if is_drive_prefixed(&path) {
                path.to_lowercase()
            } else {
                path
            }
        }
        EntityKind::IpAddress => strip_octet_zeros(trimmed),
        EntityKind::Domain => trimmed.to_lowercase().trim_end_matches('.').to_string(),
        EntityKind::Registry => trimmed.to_lowercase(),
        EntityKind::Socket | EntityKind::Other => trimmed.to_string(),
    };
    if name.is_empty() {
        return Err(ModelError::InvalidEntity(raw_name.to_string()));
    }
    let mut key = format!("{}:{}", kind.tag(), name);
    if kind == EntityKind::Process {
        if let Some(p) = pid {
            key.push('#');
            key.push_str(&p.to_string());
        }
    }
    Ok(key)
}

fn is_drive_prefixed(path: &str) -> bool {
    let b = path.as_bytes();
    b.len() >= 2 && b[0].is_ascii_alphabetic() && b[1] == b':'
}

fn strip_octet_zeros(addr: &str) -> String {
    addr.split('.')
        .map(|seg| {
            if !seg.is_empty() && seg.bytes().all(|b| b.is_ascii_digit()) {
                let stripped = seg.trim_start_matches('0');
                if stripped.is_empty() {
                    "0"
                } else {
                    stripped
                }
            } else {
                seg
            }
        })
        .collect::<Vec<_>>()
        .join(".")
}

/// Splits a canonical key back into (kind, name, pid). Returns None when the
/// text does not start with a known kind tag.
pub fn parse_canonical_key(key: &str) -> Option<(EntityKind, &str, Option<u32>)> {
    let (tag, rest) = key.split_once(':')?;
    let kind = EntityKind::from_tag(tag)?;
    if kind == EntityKind::Process {
        if let Some((name, pid)) = rest.rsplit_once('#') {
            if !pid.is_empty() && pid.bytes().all(|b| b.is_ascii_digit()) {
                if let Ok(p) = pid.parse() {
                    return Some((kind, name, Some(p)));
                }
            }
        }
    }
    Some((kind, rest, None))
}

/// Re-runs canonicalization on a key. Keys produced by `canonicalize` are a
/// fixpoint of this; untagged text is treated as an `Other` name.
pub fn recanonicalize(key: &str) -> Result<String, ModelError> {
    match parse_canonical_key(key) {
        Some((kind, name, pid)) => canonicalize(kind, name, pid),
        None => canonicalize(EntityKind::Other, key, None),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Entity {
    pub kind: EntityKind,
    pub raw_name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pid: Option<u32>,
    pub canonical_key: String,
}

impl Entity {
    pub fn new(kind: EntityKind, raw_name: impl Into<String>, pid: Option<u32>) -> Result<Self, ModelError> {
        let raw_name = raw_name.into();
        let canonical_key = canonicalize(kind, &raw_name, pid)?;
        Ok(Entity { kind, raw_name, pid, canonical_key })
    }
}

/// One log record: a timestamped subject-action-object triple.
///
/// `raw_ref` is a source locator (`file:line`) kept for traceability only; it
/// is deliberately excluded from equality so round-tripped sets compare equal.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Event {
    pub timestamp: u64,
    pub host_id: String,
    pub subject: Entity,
    pub action: String,
    pub object: Entity,
    pub seq_no: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_ref: Option<String>,
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        self.timestamp == other.timestamp
            && self.host_id == other.host_id
            && self.subject == other.subject
            && self.action == other.action
            && self.object == other.object
            && self.seq_no == other.seq_no
    }
}

impl Eq for Event {}

impl Event {
    pub fn order_key(&self) -> (u64, u64) {
        (self.timestamp, self.seq_no)
    }
}

/// The seven Cyber Kill Chain phases, in chain order. `Ord` follows the chain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum KillChainPhase {
    Reconnaissance,
    Weaponization,
    Delivery,
    Exploitation,
    Installation,
    CommandAndControl,
    ActionsOnObjectives,
}

impl KillChainPhase {
    pub const ALL: [KillChainPhase; 7] = [
        KillChainPhase::Reconnaissance,
        KillChainPhase::Weaponization,
        KillChainPhase::Delivery,
        KillChainPhase::Exploitation,
        KillChainPhase::Installation,
        KillChainPhase::CommandAndControl,
        KillChainPhase::ActionsOnObjectives,
    ];

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|p| *p == self).unwrap()
    }

    pub fn name(self) -> &'static str {
        match self {
            KillChainPhase::Reconnaissance => "Reconnaissance",
            KillChainPhase::Weaponization => "Weaponization",
            KillChainPhase::Delivery => "Delivery",
            KillChainPhase::Exploitation => "Exploitation",
            KillChainPhase::Installation => "Installation",
            KillChainPhase::CommandAndControl => "CommandAndControl",
            KillChainPhase::ActionsOnObjectives => "ActionsOnObjectives",
        }
    }
}

impl fmt::Display for KillChainPhase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for KillChainPhase {
    type Err = ModelError;

    /// Case- and separator-insensitive: "command and control", "Command & Control"
    /// and "CommandAndControl" all parse. Unknown names are an error, not a default.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm: String = s.chars().filter(|c| c.is_ascii_alphanumeric()).collect::<String>().to_ascii_lowercase();
        Ok(match norm.as_str() {
            "reconnaissance" | "recon" => KillChainPhase::Reconnaissance,
            "weaponization" | "weaponisation" => KillChainPhase::Weaponization,
            "delivery" => KillChainPhase::Delivery,
            "exploitation" => KillChainPhase::Exploitation,
            "installation" => KillChainPhase::Installation,
            "commandandcontrol" | "commandcontrol" | "c2" | "candc" | "cnc" => KillChainPhase::CommandAndControl,
            "actionsonobjectives" | "actiononobjectives" | "actionsonobjective" => KillChainPhase::ActionsOnObjectives,
            _ => return Err(ModelError::UnknownPhase(s.to_string())),
        })
    }
}

/// Coarse platform tag carried on knowledge units.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Platform {
    Windows,
    Linux,
    Other,
}

/// Labeled attack entities for one scenario. All keys are canonical
/// (re-canonicalizing any of them is a fixpoint); enforced at construction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaliciousEntitySet {
    pub scenario_id: String,
    keys: BTreeSet<String>,
}

impl MaliciousEntitySet {
    pub fn from_keys<I, S>(scenario_id: impl Into<String>, keys: I) -> Result<Self, ModelError>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut set = BTreeSet::new();
        for k in keys {
            set.insert(recanonicalize(k.as_ref())?);
        }
        Ok(MaliciousEntitySet { scenario_id: scenario_id.into(), keys: set })
    }

    pub fn contains(&self, key: &str) -> bool {
        self.keys.contains(key)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.keys.iter().map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }
}
