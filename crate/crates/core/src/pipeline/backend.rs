//! Chat backends: the trait, a scripted stand-in and a record/replay store.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chat::{request_digest, ChatMessage};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Analysis,
    Proposal,
    Decision,
    /// Single-shot crop without the reasoning stages.
    Baseline,
}

impl Stage {
    pub fn as_str(&self) -> &'static str {
        match self {
            Stage::Analysis => "analysis",
            Stage::Proposal => "proposal",
            Stage::Decision => "decision",
            Stage::Baseline => "baseline",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "analysis" => Ok(Stage::Analysis),
            "proposal" => Ok(Stage::Proposal),
            "decision" => Ok(Stage::Decision),
            "baseline" => Ok(Stage::Baseline),
            other => Err(format!("unknown stage {other:?}")),
        }
    }
}

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("transport: {0}")]
    Transport(String),
    #[error("HTTP status {status}: {body}")]
    Status { status: u16, body: String },
    #[error("malformed backend reply: {0}")]
    Protocol(String),
    #[error("no recorded {stage} response for request digest {digest}")]
    ReplayMiss { stage: Stage, digest: String },
    #[error("scripted backend has no responses for the {0} stage")]
    NoScript(Stage),
    #[error("replay store: {0}")]
    Store(String),
}

/// A vision-language model behind a chat interface. Implementations must
/// be shareable across worker threads.
pub trait ChatBackend: Send + Sync {
    fn complete(&self, stage: Stage, messages: &[ChatMessage]) -> Result<String, BackendError>;
}

impl<T: ChatBackend + ?Sized> ChatBackend for &T {
    fn complete(&self, stage: Stage, messages: &[ChatMessage]) -> Result<String, BackendError> {
        (**self).complete(stage, messages)
    }
}

impl<T: ChatBackend + ?Sized> ChatBackend for Box<T> {
    fn complete(&self, stage: Stage, messages: &[ChatMessage]) -> Result<String, BackendError> {
        (**self).complete(stage, messages)
    }
}

/// Canned replies per stage, served in order. The last reply repeats once
/// the list runs out.
#[derive(Debug, Default)]
pub struct ScriptedBackend {
    scripts: HashMap<Stage, Vec<String>>,
    cursor: Mutex<HashMap<Stage, usize>>,
}

impl ScriptedBackend {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, stage: Stage, responses: impl IntoIterator<Item = impl Into<String>>) -> Self {
        self.scripts.insert(stage, responses.into_iter().map(Into::into).collect());
        self
    }

    /// Number of calls served for `stage` so far.
    pub fn calls(&self, stage: Stage) -> usize {
        self.cursor.lock().get(&stage).copied().unwrap_or(0)
    }
}

impl ChatBackend for ScriptedBackend {
    fn complete(&self, stage: Stage, _messages: &[ChatMessage]) -> Result<String, BackendError> {
        let list = self
            .scripts
            .get(&stage)
            .filter(|l| !l.is_empty())
            .ok_or(BackendError::NoScript(stage))?;
        let mut cursor = self.cursor.lock();
        let n = cursor.entry(stage).or_insert(0);
        let reply = list[(*n).min(list.len() - 1)].clone();
        *n += 1;
        Ok(reply)
    }
}

/// Backend computing replies from the request with a closure.
pub struct FnBackend<F>(pub F);

impl<F> ChatBackend for FnBackend<F>
where
    F: Fn(Stage, &[ChatMessage]) -> Result<String, BackendError> + Send + Sync,
{
    fn complete(&self, stage: Stage, messages: &[ChatMessage]) -> Result<String, BackendError> {
        (self.0)(stage, messages)
    }
}

/// One stored exchange.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplayRecord {
    pub stage: Stage,
    pub request_digest: String,
    pub response_text: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ReplaySpec {
    Off,
    Record(PathBuf),
    Play(PathBuf),
}

impl FromStr for ReplaySpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "off" {
            return Ok(ReplaySpec::Off);
        }
        match s.split_once(':') {
            Some(("record", dir)) if !dir.is_empty() => Ok(ReplaySpec::Record(dir.into())),
            Some(("play", dir)) if !dir.is_empty() => Ok(ReplaySpec::Play(dir.into())),
            _ => Err(format!("expected off, record:<dir> or play:<dir>, got {s:?}")),
        }
    }
}

enum ReplayMode {
    Record(Box<dyn ChatBackend>),
    Play,
}

/// Directory of JSON records keyed by (stage, request digest).
///
/// Recording writes each record to a temporary file and renames it into
/// place, so concurrent runs never observe partial records. A request that
/// was already recorded is answered from the store.
pub struct ReplayBackend {
    dir: PathBuf,
    mode: ReplayMode,
}

impl ReplayBackend {
    pub fn record(dir: impl Into<PathBuf>, inner: Box<dyn ChatBackend>) -> Result<Self, BackendError> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| BackendError::Store(format!("{}: {e}", dir.display())))?;
        Ok(Self {
            dir,
            mode: ReplayMode::Record(inner),
        })
    }

    pub fn play(dir: impl Into<PathBuf>) -> Result<Self, BackendError> {
        let dir = dir.into();
        if !dir.is_dir() {
            return Err(BackendError::Store(format!("{} is not a directory", dir.display())));
        }
        Ok(Self {
            dir,
            mode: ReplayMode::Play,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn record_path(&self, stage: Stage, digest: &str) -> PathBuf {
        self.dir.join(format!("{stage}-{digest}.json"))
    }

    fn load(&self, path: &Path) -> Result<Option<ReplayRecord>, BackendError> {
        match fs::read(path) {
            Ok(bytes) => serde_json::from_slice(&bytes)
                .map(Some)
                .map_err(|e| BackendError::Store(format!("{}: {e}", path.display()))),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(BackendError::Store(format!("{}: {e}", path.display()))),
        }
    }

    fn store(&self, path: &Path, record: &ReplayRecord) -> Result<(), BackendError> {
        let err = |e: std::io::Error| BackendError::Store(format!("{}: {e}", path.display()));
        let mut tmp = tempfile::NamedTempFile::new_in(&self.dir).map_err(err)?;
        let mut body = serde_json::to_vec_pretty(record).expect("records serialize");
        body.push(b'\n');
        tmp.write_all(&body).map_err(err)?;
        tmp.persist(path).map_err(|e| err(e.error))?;
        Ok(())
    }
}

impl ChatBackend for ReplayBackend {
    fn complete(&self, stage: Stage, messages: &[ChatMessage]) -> Result<String, BackendError> {
        let digest = request_digest(stage.as_str(), messages);
        let path = self.record_path(stage, &digest);
        if let Some(rec) = self.load(&path)? {
            if rec.stage != stage || rec.request_digest != digest {
                return Err(BackendError::Store(format!("{} does not match its key", path.display())));
            }
            return Ok(rec.response_text);
        }
        match &self.mode {
            ReplayMode::Play => Err(BackendError::ReplayMiss { stage, digest }),
            ReplayMode::Record(inner) => {
                let response_text = inner.complete(stage, messages)?;
                self.store(
                    &path,
                    &ReplayRecord {
                        stage,
                        request_digest: digest,
                        response_text: response_text.clone(),
                    },
                )?;
                Ok(response_text)
            }
        }
    }
}
