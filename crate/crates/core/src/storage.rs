//! Append-only JSON-lines journals.
//!
//! Each store is one file: a header line carrying `schema_version`, then one
//! JSON record per line. A record is durable once its trailing newline is on
//! disk; a trailing partial line (torn write) is discarded on open. Stores
//! rebuild their in-memory state by folding over the records.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Seek, SeekFrom, Write};
use std::marker::PhantomData;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum StorageError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("store '{store}' line {line}: {reason}")]
    Corrupt {
        store: String,
        line: usize,
        reason: String,
    },
    #[error("store '{store}' has schema_version {found}, expected {SCHEMA_VERSION}")]
    SchemaVersion { store: String, found: u32 },
    #[error("storage halted by injected crash")]
    Crashed,
    #[error("serialization failed: {0}")]
    Serialize(#[from] serde_json::Error),
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    schema_version: u32,
    store: String,
}

#[derive(Debug, Default)]
struct GateState {
    remaining: Mutex<Option<u64>>,
    crashed: AtomicBool,
    committed: AtomicU64,
}

/// Shared write counter with optional crash injection.
///
/// With a budget of `n`, the first `n` record writes succeed; write `n + 1`
/// is torn (half its bytes, no newline) and every later write fails with
/// [`StorageError::Crashed`], which is what a killed process looks like from
/// the data directory's point of view.
#[derive(Debug, Clone, Default)]
pub struct WriteGate {
    state: Arc<GateState>,
}

enum Admission {
    Write,
    Tear,
}

impl WriteGate {
    pub fn unlimited() -> Self {
        Self::default()
    }

    pub fn crash_after(writes: u64) -> Self {
        let gate = Self::default();
        *gate.state.remaining.lock().unwrap() = Some(writes);
        gate
    }

    pub fn committed(&self) -> u64 {
        self.state.committed.load(Ordering::SeqCst)
    }

    pub fn crashed(&self) -> bool {
        self.state.crashed.load(Ordering::SeqCst)
    }

    fn admit(&self) -> Result<Admission, StorageError> {
        if self.crashed() {
            return Err(StorageError::Crashed);
        }
        let mut remaining = self.state.remaining.lock().unwrap();
        match remaining.as_mut() {
            Some(0) => {
                self.state.crashed.store(true, Ordering::SeqCst);
                Ok(Admission::Tear)
            }
            Some(n) => {
                *n -= 1;
                Ok(Admission::Write)
            }
            None => Ok(Admission::Write),
        }
    }
}

/// Where stores live: a directory on disk, or nowhere (in-memory only).
#[derive(Debug, Clone)]
pub struct Storage {
    dir: Option<PathBuf>,
    gate: WriteGate,
    fsync: bool,
}

impl Storage {
    pub fn in_memory() -> Self {
        Self {
            dir: None,
            gate: WriteGate::unlimited(),
            fsync: false,
        }
    }

    pub fn at(dir: impl Into<PathBuf>) -> Result<Self, StorageError> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir).map_err(|source| StorageError::Io {
            path: dir.display().to_string(),
            source,
        })?;
        Ok(Self {
            dir: Some(dir),
            gate: WriteGate::unlimited(),
            fsync: true,
        })
    }

    pub fn with_gate(mut self, gate: WriteGate) -> Self {
        self.gate = gate;
        self
    }

    pub fn with_fsync(mut self, fsync: bool) -> Self {
        self.fsync = fsync;
        self
    }

    pub fn gate(&self) -> &WriteGate {
        &self.gate
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    /// Opens (creating if needed) the journal `name` and returns it with the
    /// records already on disk.
    pub fn open_journal<T: Serialize + DeserializeOwned>(
        &self,
        name: &str,
    ) -> Result<(Journal<T>, Vec<T>), StorageError> {
        let Some(dir) = &self.dir else {
            return Ok((
                Journal {
                    name: name.to_string(),
                    file: None,
                    gate: self.gate.clone(),
                    fsync: false,
                    _record: PhantomData,
                },
                Vec::new(),
            ));
        };
        let path = dir.join(format!("{name}.jsonl"));
        let io_err = |source| StorageError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut file = OpenOptions::new()
            .read(true)
            .append(true)
            .create(true)
            .open(&path)
            .map_err(io_err)?;
        let records = read_records::<T>(name, &mut file, &path)?;
        if file.metadata().map_err(io_err)?.len() == 0 {
            let header = serde_json::to_string(&Header {
                schema_version: SCHEMA_VERSION,
                store: name.to_string(),
            })?;
            file.write_all(format!("{header}\n").as_bytes())
                .map_err(io_err)?;
            file.sync_data().map_err(io_err)?;
        }
        Ok((
            Journal {
                name: name.to_string(),
                file: Some(Mutex::new((file, path))),
                gate: self.gate.clone(),
                fsync: self.fsync,
                _record: PhantomData,
            },
            records,
        ))
    }
}

fn read_records<T: DeserializeOwned>(
    name: &str,
    file: &mut File,
    path: &Path,
) -> Result<Vec<T>, StorageError> {
    let io_err = |source| StorageError::Io {
        path: path.display().to_string(),
        source,
    };
    file.seek(SeekFrom::Start(0)).map_err(io_err)?;
    let mut reader = BufReader::new(&*file);
    let mut records = Vec::new();
    let mut good_len: u64 = 0;
    let mut line_no = 0usize;
    let mut buf = String::new();
    let mut torn = false;
    loop {
        buf.clear();
        let n = reader.read_line(&mut buf).map_err(io_err)?;
        if n == 0 {
            break;
        }
        if !buf.ends_with('\n') {
            torn = true;
            break;
        }
        line_no += 1;
        let line = buf.trim_end();
        if line_no == 1 {
            let header: Header = serde_json::from_str(line).map_err(|e| StorageError::Corrupt {
                store: name.to_string(),
                line: 1,
                reason: format!("bad header: {e}"),
            })?;
            if header.schema_version != SCHEMA_VERSION {
                return Err(StorageError::SchemaVersion {
                    store: name.to_string(),
                    found: header.schema_version,
                });
            }
        } else {
            let record = serde_json::from_str(line).map_err(|e| StorageError::Corrupt {
                store: name.to_string(),
                line: line_no,
                reason: e.to_string(),
            })?;
            records.push(record);
        }
        good_len += n as u64;
    }
    drop(reader);
    if torn {
        tracing::warn!(store = name, "discarding torn trailing record");
        file.set_len(good_len).map_err(io_err)?;
    }
    Ok(records)
}

/// Append handle for one store.
pub struct Journal<T> {
    name: String,
    file: Option<Mutex<(File, PathBuf)>>,
    gate: WriteGate,
    fsync: bool,
    _record: PhantomData<fn(T)>,
}

impl<T: Serialize> Journal<T> {
    /// Appends one record as a single line. Either the whole line lands or,
    /// on an injected crash, a torn fragment that the next open discards.
    pub fn append(&self, record: &T) -> Result<(), StorageError> {
        let mut line = serde_json::to_string(record)?;
        line.push('\n');
        let admission = self.gate.admit()?;
        if let Some(file) = &self.file {
            let mut guard = file.lock().unwrap();
            let (file, path) = &mut *guard;
            let io_err = |source| StorageError::Io {
                path: path.display().to_string(),
                source,
            };
            match admission {
                Admission::Write => {
                    file.write_all(line.as_bytes()).map_err(io_err)?;
                    if self.fsync {
                        file.sync_data().map_err(io_err)?;
                    }
                }
                Admission::Tear => {
                    let half = line.len() / 2;
                    file.write_all(&line.as_bytes()[..half]).map_err(io_err)?;
                    return Err(StorageError::Crashed);
                }
            }
        } else if let Admission::Tear = admission {
            return Err(StorageError::Crashed);
        }
        self.gate.state.committed.fetch_add(1, Ordering::SeqCst);
        Ok(())
    }

    pub fn name(&self) -> &str {
        &self.name
    }
}

impl<T> std::fmt::Debug for Journal<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Journal")
            .field("name", &self.name)
            .field("on_disk", &self.file.is_some())
            .finish()
    }
}
