//! Sessions, their history, and the on-disk log they are rebuilt from.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use living_novel::jsonl::read_jsonl;
use living_novel::{Ordinal, StoryTime};
use serde::{Deserialize, Serialize};

use crate::ServiceError;

/// Speaker name of user turns.
pub const USER: &str = "user";

/// Log events between snapshots.
pub const SNAPSHOT_EVERY: usize = 32;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub index: usize,
    pub speaker: String,
    pub text: String,
    pub t_at_send: Ordinal,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Session {
    pub session_id: String,
    pub novel_id: String,
    pub selected_characters: Vec<String>,
    pub t_current: StoryTime,
    pub history: Vec<Turn>,
    /// Milliseconds since the Unix epoch.
    pub created_at: u64,
    pub updated_at: u64,
}

/// One line of a session log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum LogEvent {
    Created { session: Session },
    Timeline { t: StoryTime, at: u64 },
    Turns { turns: Vec<Turn>, at: u64 },
}

impl Session {
    pub fn apply(&mut self, event: &LogEvent) {
        match event {
            LogEvent::Created { session } => *self = session.clone(),
            LogEvent::Timeline { t, at } => {
                self.t_current = t.clone();
                self.updated_at = *at;
            }
            LogEvent::Turns { turns, at } => {
                self.history.extend(turns.iter().cloned());
                self.updated_at = *at;
            }
        }
    }
}

pub trait Clock: Send + Sync {
    fn now_ms(&self) -> u64;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now_ms(&self) -> u64 {
        SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
    }
}

/// Always the same instant; keeps transcripts byte-stable in tests.
#[derive(Debug, Clone, Copy, Default)]
pub struct FixedClock(pub u64);

impl Clock for FixedClock {
    fn now_ms(&self) -> u64 {
        self.0
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Snapshot {
    session: Session,
    /// Log lines already folded into `session`.
    events: usize,
}

/// Append-only log per session plus a periodic snapshot. Without a directory
/// nothing is written.
#[derive(Debug, Clone, Default)]
pub struct SessionLog {
    dir: Option<PathBuf>,
}

impl SessionLog {
    pub fn in_memory() -> Self {
        Self { dir: None }
    }

    pub fn on_disk(dir: impl Into<PathBuf>) -> Result<Self, ServiceError> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| io_error(&dir, e))?;
        Ok(Self { dir: Some(dir) })
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    fn log_path(dir: &Path, id: &str) -> PathBuf {
        dir.join(format!("{id}.log.jsonl"))
    }

    fn snapshot_path(dir: &Path, id: &str) -> PathBuf {
        dir.join(format!("{id}.snapshot.json"))
    }

    /// Append `event`; `session` is the state after it and `count` the number
    /// of events logged so far including this one.
    pub fn append(&self, session: &Session, event: &LogEvent, count: usize) -> Result<(), ServiceError> {
        let Some(dir) = &self.dir else { return Ok(()) };
        let path = Self::log_path(dir, &session.session_id);
        let mut file = OpenOptions::new().create(true).append(true).open(&path).map_err(|e| io_error(&path, e))?;
        let mut line = serde_json::to_string(event).expect("log event serializes");
        line.push('\n');
        file.write_all(line.as_bytes()).map_err(|e| io_error(&path, e))?;
        if count % SNAPSHOT_EVERY == 0 {
            let snap = Snapshot { session: session.clone(), events: count };
            let target = Self::snapshot_path(dir, &session.session_id);
            let tmp = target.with_extension("json.tmp");
            fs::write(&tmp, serde_json::to_vec(&snap).expect("snapshot serializes")).map_err(|e| io_error(&tmp, e))?;
            fs::rename(&tmp, &target).map_err(|e| io_error(&target, e))?;
        }
        Ok(())
    }

    /// Rebuild every logged session, each with its event count.
    pub fn load_all(&self) -> Result<Vec<(Session, usize)>, ServiceError> {
        let Some(dir) = &self.dir else { return Ok(Vec::new()) };
        let mut ids: Vec<String> = fs::read_dir(dir)
            .map_err(|e| io_error(dir, e))?
            .filter_map(|e| e.ok())
            .filter_map(|e| e.file_name().to_str().and_then(|n| n.strip_suffix(".log.jsonl")).map(str::to_string))
            .collect();
        ids.sort();
        ids.into_iter().map(|id| self.load(dir, &id)).collect()
    }

    fn load(&self, dir: &Path, id: &str) -> Result<(Session, usize), ServiceError> {
        let log_path = Self::log_path(dir, id);
        let events: Vec<LogEvent> =
            read_jsonl(&log_path).map_err(|e| ServiceError::Storage(format!("{}: {e}", log_path.display())))?;
        let snap_path = Self::snapshot_path(dir, id);
        let (mut session, skip) = match fs::read(&snap_path) {
            Ok(bytes) => {
                let snap: Snapshot = serde_json::from_slice(&bytes)
                    .map_err(|e| ServiceError::Storage(format!("{}: {e}", snap_path.display())))?;
                (Some(snap.session), snap.events)
            }
            Err(_) => (None, 0),
        };
        for event in events.iter().skip(skip) {
            match (&mut session, event) {
                (None, LogEvent::Created { session: s }) => session = Some(s.clone()),
                (Some(s), e) => s.apply(e),
                (None, _) => return Err(ServiceError::Storage(format!("{}: log does not start with creation", log_path.display()))),
            }
        }
        let session = session.ok_or_else(|| ServiceError::Storage(format!("{}: empty log", log_path.display())))?;
        Ok((session, events.len()))
    }
}

fn io_error(path: &Path, e: std::io::Error) -> ServiceError {
    ServiceError::Storage(format!("{}: {e}", path.display()))
}
