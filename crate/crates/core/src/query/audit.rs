use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::ids::NoteId;

pub const AUDIT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuditOutcome {
    Ok,
    Error,
    Denied,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageLatency {
    pub embed_ms: f64,
    pub search_ms: f64,
    pub hydrate_ms: f64,
    pub total_ms: f64,
}

/// One line of the audit log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub schema_version: u32,
    pub timestamp: DateTime<Utc>,
    pub request_id: String,
    pub user: String,
    /// `search`, `search_more` or `get_note`.
    pub action: String,
    pub query: Option<String>,
    /// The filter as executed, after MRN scoping and workspace exclusions were merged in.
    pub filter: Option<Value>,
    pub requested_note_id: Option<NoteId>,
    pub returned_note_ids: Vec<NoteId>,
    pub result_count: usize,
    pub latency: StageLatency,
    pub outcome: AuditOutcome,
    pub error: Option<String>,
}

enum Sink {
    Memory(Vec<AuditRecord>),
    File { path: PathBuf, file: File },
}

/// Append-only audit log. Appends are serialized and each record is flushed
/// before the call returns.
pub struct AuditLog {
    sink: Mutex<Sink>,
}

impl std::fmt::Debug for AuditLog {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match &*self.sink.lock() {
            Sink::Memory(v) => f.debug_struct("AuditLog").field("records", &v.len()).finish(),
            Sink::File { path, .. } => f.debug_struct("AuditLog").field("path", path).finish(),
        }
    }
}

impl AuditLog {
    pub fn in_memory() -> Self {
        Self { sink: Mutex::new(Sink::Memory(Vec::new())) }
    }

    pub fn open(path: &Path) -> std::io::Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self { sink: Mutex::new(Sink::File { path: path.to_path_buf(), file }) })
    }

    pub fn append(&self, record: &AuditRecord) -> std::io::Result<()> {
        match &mut *self.sink.lock() {
            Sink::Memory(v) => v.push(record.clone()),
            Sink::File { file, .. } => {
                let mut line = serde_json::to_vec(record)?;
                line.push(b'\n');
                file.write_all(&line)?;
                file.sync_data()?;
            }
        }
        Ok(())
    }

    pub fn records(&self) -> std::io::Result<Vec<AuditRecord>> {
        match &*self.sink.lock() {
            Sink::Memory(v) => Ok(v.clone()),
            Sink::File { path, .. } => read_audit_log(path),
        }
    }
}

pub fn read_audit_log(path: &Path) -> std::io::Result<Vec<AuditRecord>> {
    let mut out = Vec::new();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}
