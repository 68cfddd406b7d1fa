//! Append-only JSONL logs with idempotent keys.

use std::collections::HashSet;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::model::{StudyError, Vote};

/// Records that carry their own idempotency key.
pub trait Keyed {
    fn key(&self) -> String;
}

impl Keyed for Vote {
    fn key(&self) -> String {
        format!("{}\u{0}{}", self.session, self.item_id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Appended {
    Recorded,
    /// The key was already present; nothing was written.
    Duplicate,
}

struct Writer {
    file: File,
    keys: HashSet<String>,
}

/// All appends go through one writer lock, so lines never interleave and
/// the duplicate check cannot race. Readers take a cheap snapshot of the
/// in-memory copy and never touch the writer.
pub struct JsonlLog<T> {
    path: PathBuf,
    writer: Mutex<Writer>,
    records: RwLock<Arc<Vec<T>>>,
}

impl<T: Keyed + Serialize + DeserializeOwned + Clone> JsonlLog<T> {
    /// Open or create the log, replaying existing lines. A torn final line
    /// left by a crash is dropped with a warning; corruption anywhere else is
    /// an error.
    pub fn open(path: impl Into<PathBuf>) -> Result<Self, StudyError> {
        let path = path.into();
        let err = |message: String| StudyError::Log {
            path: path.clone(),
            message,
        };
        let mut records: Vec<T> = Vec::new();
        let mut keys = HashSet::new();
        let mut valid_len = 0u64;
        if path.exists() {
            let lines: Vec<String> = BufReader::new(File::open(&path)?).lines().collect::<Result<_, _>>()?;
            let last = lines.len();
            for (i, line) in lines.iter().enumerate() {
                if line.trim().is_empty() {
                    valid_len += line.len() as u64 + 1;
                    continue;
                }
                match serde_json::from_str::<T>(line) {
                    Ok(r) => {
                        if keys.insert(r.key()) {
                            records.push(r);
                        }
                        valid_len += line.len() as u64 + 1;
                    }
                    Err(e) if i + 1 == last => {
                        log::warn!("{}: dropping torn final line: {e}", path.display());
                    }
                    Err(e) => return Err(err(format!("line {}: {e}", i + 1))),
                }
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        if file.metadata()?.len() > valid_len {
            file.set_len(valid_len)?;
        }
        Ok(Self {
            path,
            writer: Mutex::new(Writer { file, keys }),
            records: RwLock::new(Arc::new(records)),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&self, record: T) -> Result<Appended, StudyError> {
        let mut w = self.writer.lock();
        let key = record.key();
        if w.keys.contains(&key) {
            return Ok(Appended::Duplicate);
        }
        let mut line = serde_json::to_vec(&record).expect("records serialize");
        line.push(b'\n');
        w.file.write_all(&line)?;
        w.file.flush()?;
        w.keys.insert(key);
        let mut guard = self.records.write();
        Arc::make_mut(&mut guard).push(record);
        Ok(Appended::Recorded)
    }

    pub fn contains(&self, key: &str) -> bool {
        self.writer.lock().keys.contains(key)
    }

    /// Everything written so far, as of the call.
    pub fn snapshot(&self) -> Arc<Vec<T>> {
        Arc::clone(&self.records.read())
    }

    pub fn len(&self) -> usize {
        self.records.read().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
