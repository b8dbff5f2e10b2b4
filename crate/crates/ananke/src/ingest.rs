//! Log ingestion: one event per line, two wire formats, strict or lenient loading.
//!
//! JsonEvent lines look like
//! `{"ts":1000,"host":"h1","s":{"kind":"process","name":"a.exe","pid":3},"a":"write","o":{"kind":"file","name":"/tmp/x"}}`
//! with unknown fields ignored. CsvTriple lines are
//! `ts,host,subj_kind,subj_name,action,obj_kind,obj_name[,subj_pid,obj_pid]`.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::model::{Entity, EntityKind, Event, Platform};
use crate::par::maybe_par_iter;
#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LogFormat {
    JsonEvent,
    CsvTriple,
}

#[derive(Debug, thiserror::Error)]
pub enum IngestError {
    #[error("{file}:{line}: {reason}")]
    MalformedLine { file: String, line: u64, reason: String },
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// A parsed, canonically sorted batch of events.
///
/// Invariants: events sorted by (timestamp, seq_no); seq_no unique within the
/// set; every entity carries its canonical key; actions are lowercase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogSet {
    pub events: Vec<Event>,
    pub host_id: String,
    pub source_files: Vec<PathBuf>,
}

impl LogSet {
    pub fn from_events(mut events: Vec<Event>, source_files: Vec<PathBuf>) -> Self {
        events.sort_by_key(Event::order_key);
        let host_id = events.first().map(|e| e.host_id.clone()).unwrap_or_default();
        LogSet { events, host_id, source_files }
    }

    /// Majority-vote platform guess from entity name shapes. Drive-letter or
    /// backslash paths and .exe/.dll names vote Windows, /-rooted paths vote
    /// Linux. Used to tag knowledge units built from this set.
    pub fn platform(&self) -> Platform {
        let mut windows = 0usize;
        let mut linux = 0usize;
        for ev in &self.events {
            for ent in [&ev.subject, &ev.object] {
                let name = ent.raw_name.trim();
                let lower = name.to_ascii_lowercase();
                if name.contains('\\')
                    || (name.len() >= 2 && name.as_bytes()[0].is_ascii_alphabetic() && name.as_bytes()[1] == b':')
                    || lower.ends_with(".exe")
                    || lower.ends_with(".dll")
                {
                    windows += 1;
                } else if name.starts_with('/') {
                    linux += 1;
                }
            }
        }
        if windows == 0 && linux == 0 {
            Platform::Other
        } else if windows >= linux {
            Platform::Windows
        } else {
            Platform::Linux
        }
    }
}

/// Per-line skip record collected in lenient mode.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SkippedLine {
    pub file: String,
    pub line: u64,
    pub reason: String,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct LoadReport {
    pub parsed: usize,
    pub skipped: Vec<SkippedLine>,
}

#[derive(Deserialize)]
struct WireEntity {
    kind: Option<String>,
    name: String,
    #[serde(default)]
    pid: Option<u32>,
}

#[derive(Deserialize)]
struct WireEvent {
    ts: i64,
    host: String,
    s: WireEntity,
    a: String,
    o: WireEntity,
}

#[derive(Serialize)]
struct WireEntityOut<'a> {
    kind: &'static str,
    name: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    pid: Option<u32>,
}

#[derive(Serialize)]
struct WireEventOut<'a> {
    ts: u64,
    host: &'a str,
    s: WireEntityOut<'a>,
    a: &'a str,
    o: WireEntityOut<'a>,
}

fn wire_entity(w: WireEntity) -> Result<Entity, String> {
    let kind = w.kind.as_deref().map(EntityKind::parse_loose).unwrap_or(EntityKind::Other);
    Entity::new(kind, w.name, w.pid).map_err(|e| e.to_string())
}

/// Parses a single line in the given format. `line_no` becomes the event's
/// seq_no and shows up in error messages (1-based).
pub fn parse_line(line: &str, format: LogFormat, line_no: u64) -> Result<Event, IngestError> {
    parse_line_at("<input>", line, format, line_no)
}

fn parse_line_at(file: &str, line: &str, format: LogFormat, line_no: u64) -> Result<Event, IngestError> {
    let fail = |reason: String| IngestError::MalformedLine { file: file.to_string(), line: line_no, reason };
    match format {
        LogFormat::JsonEvent => {
            let wire: WireEvent = serde_json::from_str(line).map_err(|e| fail(format!("bad json: {e}")))?;
            if wire.ts < 0 {
                return Err(fail(format!("negative timestamp {}", wire.ts)));
            }
            let action = wire.a.trim().to_lowercase();
            if action.is_empty() {
                return Err(fail("empty action".to_string()));
            }
            let subject = wire_entity(wire.s).map_err(|e| fail(format!("subject: {e}")))?;
            let object = wire_entity(wire.o).map_err(|e| fail(format!("object: {e}")))?;
            Ok(Event {
                timestamp: wire.ts as u64,
                host_id: wire.host,
                subject,
                action,
                object,
                seq_no: line_no,
                raw_ref: None,
            })
        }
        LogFormat::CsvTriple => {
            let mut rdr = csv::ReaderBuilder::new().has_headers(false).flexible(true).from_reader(line.as_bytes());
            let record = match rdr.records().next() {
                Some(Ok(r)) => r,
                Some(Err(e)) => return Err(fail(format!("bad csv: {e}"))),
                None => return Err(fail("empty record".to_string())),
            };
            if record.len() < 7 {
                return Err(fail(format!("expected at least 7 columns, got {}", record.len())));
            }
            let field = |i: usize| record.get(i).unwrap_or("").trim();
            let ts: i64 = field(0).parse().map_err(|_| fail(format!("bad timestamp {:?}", field(0))))?;
            if ts < 0 {
                return Err(fail(format!("negative timestamp {ts}")));
            }
            let action = field(4).to_lowercase();
            if action.is_empty() {
                return Err(fail("empty action".to_string()));
            }
            let pid_at = |i: usize| -> Result<Option<u32>, IngestError> {
                match record.get(i).map(str::trim) {
                    None | Some("") => Ok(None),
                    Some(raw) => raw.parse().map(Some).map_err(|_| fail(format!("bad pid {raw:?}"))),
                }
            };
            let subj_pid = pid_at(7)?;
            let obj_pid = pid_at(8)?;
            let subject = Entity::new(EntityKind::parse_loose(field(2)), field(3), subj_pid)
                .map_err(|e| fail(format!("subject: {e}")))?;
            let object = Entity::new(EntityKind::parse_loose(field(5)), field(6), obj_pid)
                .map_err(|e| fail(format!("object: {e}")))?;
            Ok(Event {
                timestamp: ts as u64,
                host_id: field(1).to_string(),
                subject,
                action,
                object,
                seq_no: line_no,
                raw_ref: None,
            })
        }
    }
}

/// Serializes an event back to a JsonEvent line. Inverse of `parse_line` for
/// the JsonEvent format (source locators are not part of the wire).
pub fn to_json_line(ev: &Event) -> String {
    let out = WireEventOut {
        ts: ev.timestamp,
        host: &ev.host_id,
        s: WireEntityOut { kind: ev.subject.kind.tag(), name: &ev.subject.raw_name, pid: ev.subject.pid },
        a: &ev.action,
        o: WireEntityOut { kind: ev.object.kind.tag(), name: &ev.object.raw_name, pid: ev.object.pid },
    };
    serde_json::to_string(&out).expect("wire event serializes")
}

/// Loads and sorts events from the given files, in order. seq_no is the global
/// line index across the concatenated inputs, so sorting is stable and unique.
/// In strict mode the first malformed line aborts; in lenient mode malformed
/// lines are skipped and reported. Blank lines are ignored in both modes.
pub fn load_log_set(paths: &[PathBuf], format: LogFormat, strict: bool) -> Result<(LogSet, LoadReport), IngestError> {
    let mut inputs = Vec::with_capacity(paths.len());
    let mut offset = 0u64;
    for path in paths {
        let text = fs::read_to_string(path).map_err(|e| IngestError::Io { path: path.display().to_string(), source: e })?;
        let lines = text.lines().count() as u64;
        inputs.push((path.clone(), text, offset));
        offset += lines;
    }

    type FileOutcome = Result<(Vec<Event>, Vec<SkippedLine>), IngestError>;
    let outcomes: Vec<FileOutcome> = maybe_par_iter(&inputs)
        .map(|(path, text, base)| {
            let file = path.display().to_string();
            let mut events = Vec::new();
            let mut skipped = Vec::new();
            for (i, line) in text.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let line_no = base + i as u64;
                match parse_line_at(&file, line, format, line_no) {
                    Ok(mut ev) => {
                        ev.raw_ref = Some(format!("{file}:{}", i + 1));
                        events.push(ev);
                    }
                    Err(e) if strict => return Err(e),
                    Err(e) => skipped.push(SkippedLine { file: file.clone(), line: i as u64 + 1, reason: e.to_string() }),
                }
            }
            Ok((events, skipped))
        })
        .collect();

    let mut events = Vec::new();
    let mut report = LoadReport::default();
    for outcome in outcomes {
        let (evs, skips) = outcome?;
        events.extend(evs);
        report.skipped.extend(skips);
    }
    report.parsed = events.len();
    Ok((LogSet::from_events(events, paths.to_vec()), report))
}

/// Writes a log set as one JsonEvent file.
pub fn write_log_set(log_set: &LogSet, path: &Path) -> Result<(), IngestError> {
    let mut out = Vec::new();
    for ev in &log_set.events {
        writeln!(out, "{}", to_json_line(ev)).expect("vec write");
    }
    fs::write(path, out).map_err(|e| IngestError::Io { path: path.display().to_string(), source: e })
}
