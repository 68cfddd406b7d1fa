//! Session scheduling and vote recording over the persisted logs.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::model::{aggregate_results, Side, StudyError, StudyItem, StudyResult, Vote};
use crate::store::{Appended, JsonlLog, Keyed};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionRecord {
    pub ts: u64,
    pub session: String,
}

impl Keyed for SessionRecord {
    fn key(&self) -> String {
        self.session.clone()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub done: usize,
    pub total: usize,
}

/// What a rater's client sees for one item: no method labels, no paths.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemView {
    pub item_id: String,
    pub left_png_url: String,
    pub right_png_url: String,
    pub progress: Progress,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum NextItem {
    Item(ItemView),
    Done { done: bool, progress: Progress },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionInfo {
    pub session_id: String,
    pub total_items: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoteAck {
    pub recorded: bool,
    pub duplicate: bool,
    pub progress: Progress,
}

pub fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// A running study: the item table plus the session and vote logs under
/// one data directory.
pub struct Study {
    items: Vec<StudyItem>,
    index: HashMap<String, usize>,
    seed: u64,
    votes: JsonlLog<Vote>,
    sessions: JsonlLog<SessionRecord>,
}

impl Study {
    pub const VOTE_LOG: &'static str = "votes.jsonl";
    pub const SESSION_LOG: &'static str = "sessions.jsonl";

    pub fn open(items: Vec<StudyItem>, seed: u64, data_dir: &Path) -> Result<Self, StudyError> {
        std::fs::create_dir_all(data_dir)?;
        let index = items.iter().enumerate().map(|(i, it)| (it.item_id.clone(), i)).collect();
        Ok(Self {
            items,
            index,
            seed,
            votes: JsonlLog::open(data_dir.join(Self::VOTE_LOG))?,
            sessions: JsonlLog::open(data_dir.join(Self::SESSION_LOG))?,
        })
    }

    pub fn items(&self) -> &[StudyItem] {
        &self.items
    }

    pub fn vote_log_path(&self) -> PathBuf {
        self.votes.path().to_path_buf()
    }

    pub fn votes(&self) -> Vec<Vote> {
        self.votes.snapshot().as_ref().clone()
    }

    pub fn item(&self, item_id: &str) -> Result<&StudyItem, StudyError> {
        self.index
            .get(item_id)
            .map(|&i| &self.items[i])
            .ok_or_else(|| StudyError::UnknownItem(item_id.to_string()))
    }

    pub fn new_session(&self) -> Result<SessionInfo, StudyError> {
        let session_id = uuid::Uuid::new_v4().simple().to_string();
        self.sessions.append(SessionRecord {
            ts: unix_now(),
            session: session_id.clone(),
        })?;
        Ok(SessionInfo {
            session_id,
            total_items: self.items.len(),
        })
    }

    fn check_session(&self, session: &str) -> Result<(), StudyError> {
        if self.sessions.contains(session) {
            Ok(())
        } else {
            Err(StudyError::UnknownSession(session.to_string()))
        }
    }

    /// Item order for a session, fixed by the study seed and the session id
    /// so a resumed session continues where it stopped.
    pub fn session_order(&self, session: &str) -> Vec<usize> {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(session.as_bytes());
        let d = h.finalize();
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&d);
        let mut order: Vec<usize> = (0..self.items.len()).collect();
        order.shuffle(&mut ChaCha8Rng::from_seed(seed));
        order
    }

    fn voted(&self, session: &str, item_id: &str) -> bool {
        let probe = Vote {
            ts: 0,
            session: session.to_string(),
            item_id: item_id.to_string(),
            choice: Side::Left,
        };
        self.votes.contains(&probe.key())
    }

    pub fn progress(&self, session: &str) -> Result<Progress, StudyError> {
        self.check_session(session)?;
        let done = self.items.iter().filter(|it| self.voted(session, &it.item_id)).count();
        Ok(Progress {
            done,
            total: self.items.len(),
        })
    }

    pub fn next_item(&self, session: &str) -> Result<NextItem, StudyError> {
        let progress = self.progress(session)?;
        let next = self
            .session_order(session)
            .into_iter()
            .map(|i| &self.items[i])
            .find(|it| !self.voted(session, &it.item_id));
        Ok(match next {
            Some(it) => NextItem::Item(ItemView {
                item_id: it.item_id.clone(),
                left_png_url: format!("/crops/{}/left.png", it.item_id),
                right_png_url: format!("/crops/{}/right.png", it.item_id),
                progress,
            }),
            None => NextItem::Done { done: true, progress },
        })
    }

    pub fn record_vote(&self, session: &str, item_id: &str, choice: Side) -> Result<VoteAck, StudyError> {
        self.check_session(session)?;
        self.item(item_id)?;
        let outcome = self.votes.append(Vote {
            ts: unix_now(),
            session: session.to_string(),
            item_id: item_id.to_string(),
            choice,
        })?;
        Ok(VoteAck {
            recorded: outcome == Appended::Recorded,
            duplicate: outcome == Appended::Duplicate,
            progress: self.progress(session)?,
        })
    }

    pub fn results(&self) -> StudyResult {
        aggregate_results(&self.votes.snapshot(), &self.items)
    }
}
