//! Session storage: in memory, mirrored to one JSON file per session.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::{DateTime, Utc};
use parking_lot::RwLock;
use serde::{Deserialize, Serialize};
use uuid::Uuid;

use crate::belief::StoppingPolicy;
use crate::engine::{Criterion, Recommendation, SessionState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredSession {
    pub session_id: Uuid,
    pub dataset: String,
    pub policy: StoppingPolicy,
    pub criterion: Criterion,
    pub budget: Option<usize>,
    /// Sampling seed for every step of this session.
    pub seed: u64,
    pub created_at: DateTime<Utc>,
    pub updated_at: DateTime<Utc>,
    pub state: SessionState,
    /// Evaluation of the current step, kept until a result is submitted.
    pub pending: Option<Recommendation>,
}

pub struct Entry {
    /// Serializes mutations of one session.
    pub state: tokio::sync::Mutex<StoredSession>,
    snapshot: RwLock<Arc<StoredSession>>,
}

impl Entry {
    fn new(session: StoredSession) -> Self {
        Self {
            snapshot: RwLock::new(Arc::new(session.clone())),
            state: tokio::sync::Mutex::new(session),
        }
    }

    /// Last published state; never waits on an in-flight mutation.
    pub fn snapshot(&self) -> Arc<StoredSession> {
        self.snapshot.read().clone()
    }
}

pub struct SessionStore {
    dir: Option<PathBuf>,
    entries: RwLock<HashMap<Uuid, Arc<Entry>>>,
}

impl SessionStore {
    pub fn in_memory() -> Self {
        Self {
            dir: None,
            entries: RwLock::new(HashMap::new()),
        }
    }

    /// Opens a persistent store, loading every session file in `dir`.
    pub fn open(dir: &Path) -> std::io::Result<Self> {
        std::fs::create_dir_all(dir)?;
        let mut entries = HashMap::new();
        for entry in std::fs::read_dir(dir)? {
            let path = entry?.path();
            if path.extension().is_none_or(|x| x != "json") {
                continue;
            }
            let text = std::fs::read_to_string(&path)?;
            match serde_json::from_str::<StoredSession>(&text) {
                Ok(s) => {
                    entries.insert(s.session_id, Arc::new(Entry::new(s)));
                }
                Err(e) => tracing::warn!(path = %path.display(), error = %e, "skipping unreadable session"),
            }
        }
        tracing::info!(sessions = entries.len(), dir = %dir.display(), "session store opened");
        Ok(Self {
            dir: Some(dir.to_path_buf()),
            entries: RwLock::new(entries),
        })
    }

    pub fn get(&self, id: &Uuid) -> Option<Arc<Entry>> {
        self.entries.read().get(id).cloned()
    }

    pub fn insert(&self, session: StoredSession) -> std::io::Result<Arc<Entry>> {
        self.persist(&session)?;
        let id = session.session_id;
        let entry = Arc::new(Entry::new(session));
        self.entries.write().insert(id, entry.clone());
        Ok(entry)
    }

    /// Persists `session` and publishes it as the entry's snapshot.
    pub fn publish(&self, entry: &Entry, session: &StoredSession) -> std::io::Result<()> {
        self.persist(session)?;
        *entry.snapshot.write() = Arc::new(session.clone());
        Ok(())
    }

    fn persist(&self, session: &StoredSession) -> std::io::Result<()> {
        let Some(dir) = &self.dir else {
            return Ok(());
        };
        let path = dir.join(format!("{}.json", session.session_id));
        let tmp = path.with_extension("json.tmp");
        std::fs::write(&tmp, serde_json::to_vec_pretty(session)?)?;
        std::fs::rename(tmp, path)
    }

    pub fn len(&self) -> usize {
        self.entries.read().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
