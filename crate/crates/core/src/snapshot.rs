//! Snapshots of the master's state and crash recovery.
//!
//! A snapshot file is the state as one JSON document, a newline, then a
//! `crc32:xxxxxxxx` line over the JSON bytes. Files are written to a
//! temporary sibling and renamed into place.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use crate::error::MasterError;
use crate::events::{parse_json_lines, LogRecord, MalformedLog};
use crate::master::{Master, MasterConfig};

#[derive(Debug, thiserror::Error)]
pub enum PersistError {
    #[error("snapshot is corrupt: {0}")]
    SnapshotCorrupt(String),
    #[error("event log is corrupt at line {line}: {message}")]
    LogCorrupt { line: usize, message: String },
    #[error("snapshot is ahead of the event log ({snapshot} events vs {log})")]
    LogBehindSnapshot { snapshot: u64, log: usize },
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Master(#[from] MasterError),
}

impl From<MalformedLog> for PersistError {
    fn from(e: MalformedLog) -> Self {
        PersistError::LogCorrupt {
            line: e.line,
            message: e.message,
        }
    }
}

pub fn encode_snapshot(master: &Master) -> String {
    let body = master.state_json();
    let crc = crc32fast::hash(body.as_bytes());
    format!("{body}\ncrc32:{crc:08x}\n")
}

pub fn decode_snapshot(text: &str) -> Result<Master, PersistError> {
    let corrupt = |m: &str| PersistError::SnapshotCorrupt(m.to_string());
    let trimmed = text.strip_suffix('\n').ok_or_else(|| corrupt("missing trailer"))?;
    let (body, trailer) = trimmed
        .rsplit_once('\n')
        .ok_or_else(|| corrupt("missing checksum line"))?;
    let expected = trailer
        .strip_prefix("crc32:")
        .and_then(|h| u32::from_str_radix(h, 16).ok())
        .ok_or_else(|| corrupt("malformed checksum line"))?;
    if crc32fast::hash(body.as_bytes()) != expected {
        return Err(corrupt("checksum mismatch"));
    }
    serde_json::from_str(body).map_err(|e| PersistError::SnapshotCorrupt(e.to_string()))
}

/// Writes atomically: temp file, fsync, rename.
pub fn write_snapshot(path: &Path, master: &Master) -> Result<(), PersistError> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(encode_snapshot(master).as_bytes())?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// `Ok(None)` when no snapshot exists yet.
pub fn read_snapshot(path: &Path) -> Result<Option<Master>, PersistError> {
    match fs::read_to_string(path) {
        Ok(text) => decode_snapshot(&text).map(Some),
        Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(e.into()),
    }
}

/// Rebuilds state from an optional snapshot and the records that follow it.
pub fn restore_state(
    config: MasterConfig,
    snapshot: Option<Master>,
    tail: &[LogRecord],
) -> Result<Master, PersistError> {
    let mut master = match snapshot {
        Some(m) => m,
        None => Master::new(config)?,
    };
    for r in tail {
        master
            .apply_record(r)
            .map_err(|e| PersistError::Master(e.into()))?;
    }
    Ok(master)
}

/// Restores from a snapshot plus a complete event log: records already
/// covered by the snapshot are skipped.
pub fn recover(
    config: MasterConfig,
    snapshot: Option<Master>,
    log: &[LogRecord],
) -> Result<Master, PersistError> {
    let covered = snapshot.as_ref().map_or(0, |m| m.events_applied());
    if covered as usize > log.len() {
        return Err(PersistError::LogBehindSnapshot {
            snapshot: covered,
            log: log.len(),
        });
    }
    restore_state(config, snapshot, &log[covered as usize..])
}

/// Reads an event log file; a missing file is an empty log.
pub fn read_log(path: &Path) -> Result<Vec<LogRecord>, PersistError> {
    match fs::read_to_string(path) {
        Ok(text) => Ok(parse_json_lines(&text)?),
        Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(Vec::new()),
        Err(e) => Err(e.into()),
    }
}
