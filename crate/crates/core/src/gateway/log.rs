use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::AgentName;

/// One line of the call log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallLogEntry {
    pub request_hash: String,
    pub agent: AgentName,
    pub provider: String,
    pub attempts: u32,
    pub latency_ms: u64,
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_tokens: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub completion_tokens: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_bytes: Option<usize>,
}

/// Append-only JSON-lines log of gateway calls. Always kept in memory;
/// mirrored to a file when opened with [`CallLog::at`].
#[derive(Debug, Default)]
pub struct CallLog {
    entries: Mutex<Vec<CallLogEntry>>,
    file: Option<Mutex<File>>,
}

impl CallLog {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn at(path: &Path) -> std::io::Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self {
            entries: Mutex::new(Vec::new()),
            file: Some(Mutex::new(file)),
        })
    }

    pub(crate) fn record(&self, entry: CallLogEntry) {
        if let Some(file) = &self.file {
            let mut line = serde_json::to_string(&entry).expect("log entry serializes");
            line.push('\n');
            if let Err(e) = file.lock().unwrap().write_all(line.as_bytes()) {
                tracing::warn!(error = %e, "failed to append call log");
            }
        }
        self.entries.lock().unwrap().push(entry);
    }

    pub fn entries(&self) -> Vec<CallLogEntry> {
        self.entries.lock().unwrap().clone()
    }
}
