//! Cassette backend: records completions to a JSONL file and replays them
//! keyed by prompt hash, so recorded investigations rerun byte-identically
//! with zero network.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{LlmBackend, LlmError, TokenUsage};

/// SHA-256 over `system || NUL || user`, hex encoded. The NUL separator keeps
/// (system, user) splits from colliding.
pub fn prompt_hash(system: &str, user: &str) -> String {
    let mut hasher = Sha256::new();
    hasher.update(system.as_bytes());
    hasher.update([0u8]);
    hasher.update(user.as_bytes());
    hex::encode(hasher.finalize())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CassetteEntry {
    hash: String,
    system: String,
    user: String,
    response: String,
    usage: TokenUsage,
}

enum Mode {
    Record { inner: Box<dyn LlmBackend>, file: Mutex<File> },
    Replay,
}

pub struct Cassette {
    mode: Mode,
    path: PathBuf,
    entries: Mutex<HashMap<String, CassetteEntry>>,
}

impl Cassette {
    /// Wraps `inner`, recording every completion. Truncates any existing file
    /// so a cassette always describes one run.
    pub fn record(inner: Box<dyn LlmBackend>, path: impl AsRef<Path>) -> Result<Self, LlmError> {
        let path = path.as_ref().to_path_buf();
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .truncate(true)
            .open(&path)
            .map_err(|e| LlmError::CassetteIo(format!("{}: {e}", path.display())))?;
        Ok(Cassette {
            mode: Mode::Record { inner, file: Mutex::new(file) },
            path,
            entries: Mutex::new(HashMap::new()),
        })
    }

    /// Loads a recorded cassette for replay. Lookup is keyed by prompt hash,
    /// not call order, so any subset of the recorded prompts can replay in any
    /// order. Unseen prompts are a `CassetteMiss`.
    pub fn replay(path: impl AsRef<Path>) -> Result<Self, LlmError> {
        let path = path.as_ref().to_path_buf();
        let file = File::open(&path).map_err(|e| LlmError::CassetteIo(format!("{}: {e}", path.display())))?;
        let mut entries = HashMap::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| LlmError::CassetteIo(format!("{}: {e}", path.display())))?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: CassetteEntry = serde_json::from_str(&line)
                .map_err(|e| LlmError::CassetteIo(format!("{} line {}: {e}", path.display(), i + 1)))?;
            entries.insert(entry.hash.clone(), entry);
        }
        Ok(Cassette { mode: Mode::Replay, path, entries: Mutex::new(entries) })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("cassette lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl LlmBackend for Cassette {
    fn id(&self) -> &str {
        match self.mode {
            Mode::Record { .. } => "cassette-record",
            Mode::Replay => "cassette-replay",
        }
    }

    fn complete(&self, system: &str, user: &str) -> Result<(String, TokenUsage), LlmError> {
        let hash = prompt_hash(system, user);
        match &self.mode {
            Mode::Replay => {
                let entries = self.entries.lock().expect("cassette lock");
                let entry = entries.get(&hash).ok_or_else(|| LlmError::CassetteMiss(hash.clone()))?;
                Ok((entry.response.clone(), entry.usage))
            }
            Mode::Record { inner, file } => {
                let (response, usage) = inner.complete(system, user)?;
                let entry = CassetteEntry {
                    hash: hash.clone(),
                    system: system.to_string(),
                    user: user.to_string(),
                    response: response.clone(),
                    usage,
                };
                let line = serde_json::to_string(&entry).expect("cassette entry serializes");
                {
                    let mut f = file.lock().expect("cassette file lock");
                    writeln!(f, "{line}").map_err(|e| LlmError::CassetteIo(format!("{}: {e}", self.path.display())))?;
                }
                self.entries.lock().expect("cassette lock").insert(hash, entry);
                Ok((response, usage))
            }
        }
    }
}
