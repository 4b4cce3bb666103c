//! Append-only JSONL event log, one file per session.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use crate::error::ServiceError;
use crate::session::{Event, RoundStatus, Session};

#[derive(Debug, Clone)]
pub struct EventStore {
    root: PathBuf,
}

impl EventStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, ServiceError> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(Self { root })
    }

    pub fn log_path(&self, session_id: &str) -> PathBuf {
        self.root.join(format!("{session_id}.jsonl"))
    }

    /// Appends and syncs one event; the write is durable when this returns.
    pub fn append(&self, session_id: &str, event: &Event) -> Result<(), ServiceError> {
        let mut line = serde_json::to_vec(event).map_err(|e| ServiceError::Internal(e.to_string()))?;
        line.push(b'\n');
        let mut f = OpenOptions::new().create(true).append(true).open(self.log_path(session_id))?;
        f.write_all(&line)?;
        f.sync_data()?;
        Ok(())
    }

    pub fn read(&self, session_id: &str) -> Result<Vec<Event>, ServiceError> {
        read_log(&self.log_path(session_id))
    }

    /// Replays every log. A round left pending by a crash is closed with a
    /// failure event so the client can retry it.
    pub fn load_all(&self) -> Result<Vec<Session>, ServiceError> {
        let mut out = Vec::new();
        for entry in fs::read_dir(&self.root)? {
            let path = entry?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("jsonl") {
                continue;
            }
            let events = read_log(&path)?;
            let mut session = Session::replay(&events)?;
            if let Some(r) = session.rounds.last().filter(|r| r.status == RoundStatus::Pending) {
                let e = Event::RoundFailed {
                    round_index: r.round_index,
                    error: "interrupted before completion".into(),
                };
                self.append(&session.session_id, &e)?;
                session.apply(&e)?;
            }
            out.push(session);
        }
        Ok(out)
    }
}

fn read_log(path: &Path) -> Result<Vec<Event>, ServiceError> {
    let f = File::open(path).map_err(|_| ServiceError::NotFound(format!("event log {}", path.display())))?;
    let mut events = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(&line) {
            Ok(e) => events.push(e),
            // a torn final line from a crash mid-write is dropped
            Err(_) if is_last_line(path, n)? => tracing::warn!(path = %path.display(), "dropping torn last event"),
            Err(e) => return Err(ServiceError::Internal(format!("{}:{}: {e}", path.display(), n + 1))),
        }
    }
    Ok(events)
}

fn is_last_line(path: &Path, n: usize) -> Result<bool, ServiceError> {
    let count = BufReader::new(File::open(path)?).lines().count();
    Ok(n + 1 == count)
}
