//! Append-only event log on disk.
//!
//! One event per line, prefixed by its sequence number: `<seq> <json>`.
//! A batch is written with a single `write_all` and synced before the
//! append returns.

use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use coem_core::event::{self, Event, Journal, StorageError};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LogError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("line {line}: {message}")]
    Corrupt { line: usize, message: String },
}

impl LogError {
    pub fn line(&self) -> Option<usize> {
        match self {
            LogError::Corrupt { line, .. } => Some(*line),
            LogError::Io(_) => None,
        }
    }
}

pub fn encode_line(e: &Event) -> String {
    let json = serde_json::to_string(e).expect("events always serialize");
    format!("{} {json}\n", e.seq)
}

fn decode_line(line: &str, number: usize) -> Result<Event, LogError> {
    let corrupt = |message: String| LogError::Corrupt { line: number, message };
    let (prefix, json) = line
        .split_once(' ')
        .ok_or_else(|| corrupt("missing sequence prefix".into()))?;
    let seq: u64 = prefix
        .parse()
        .map_err(|_| corrupt(format!("bad sequence prefix {prefix:?}")))?;
    let e: Event = serde_json::from_str(json).map_err(|err| corrupt(err.to_string()))?;
    if e.seq != seq {
        return Err(corrupt(format!("prefix {seq} does not match event seq {}", e.seq)));
    }
    Ok(e)
}

/// Parsed log plus where its valid part ends.
#[derive(Debug, Default)]
pub struct LogContents {
    pub events: Vec<Event>,
    /// Byte offset just past each event's line.
    pub line_ends: Vec<u64>,
    /// Byte length of the readable prefix.
    pub valid_len: u64,
    /// A final line was unreadable (torn write) and ignored.
    pub torn_tail: bool,
}

/// Strict read: every line must parse and end with a newline.
pub fn read_strict(path: &Path) -> Result<Vec<Event>, LogError> {
    read(path, false).map(|c| c.events)
}

/// Boot-time read: an unreadable last line is treated as a torn write.
pub fn read_lenient(path: &Path) -> Result<LogContents, LogError> {
    read(path, true)
}

fn read(path: &Path, lenient: bool) -> Result<LogContents, LogError> {
    let mut reader = BufReader::new(File::open(path)?);
    let mut contents = LogContents::default();
    let mut buf = String::new();
    let mut number = 0;
    loop {
        buf.clear();
        let n = reader.read_line(&mut buf)?;
        if n == 0 {
            break;
        }
        number += 1;
        let complete = buf.ends_with('\n');
        let parsed = if complete {
            decode_line(buf.trim_end_matches(['\n', '\r']), number)
        } else {
            Err(LogError::Corrupt {
                line: number,
                message: "truncated line (no trailing newline)".into(),
            })
        };
        match parsed {
            Ok(e) => {
                contents.events.push(e);
                contents.valid_len += n as u64;
                contents.line_ends.push(contents.valid_len);
            }
            Err(err) => {
                let at_end = reader.fill_buf()?.is_empty();
                if lenient && at_end {
                    contents.torn_tail = true;
                    break;
                }
                return Err(err);
            }
        }
    }
    Ok(contents)
}

/// Durable journal backed by a log file.
#[derive(Debug)]
pub struct FileJournal {
    path: PathBuf,
    file: File,
    /// Bytes of complete batches written so far.
    len: u64,
    sync: bool,
}

/// What was found and repaired when opening an existing log.
#[derive(Debug, Default)]
pub struct Recovery {
    pub events: Vec<Event>,
    pub torn_tail: bool,
    /// Events of an unfinished trailing batch that were cut off.
    pub dropped: usize,
}

impl FileJournal {
    /// Opens or creates `path`, cutting off a torn final line and any
    /// unfinished trailing batch so the next append continues a clean log.
    pub fn open(path: &Path) -> Result<(Self, Recovery), LogError> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        if !path.exists() {
            File::create(path)?;
        }
        let contents = read_lenient(path)?;
        let (complete, dropped) = event::complete_prefix(&contents.events);
        let keep = complete.len();
        let valid_len = if keep == 0 { 0 } else { contents.line_ends[keep - 1] };
        let mut file = OpenOptions::new().read(true).write(true).open(path)?;
        if file.metadata()?.len() != valid_len {
            file.set_len(valid_len)?;
            file.sync_all()?;
        }
        file.seek(SeekFrom::End(0))?;
        let mut events = contents.events;
        events.truncate(keep);
        Ok((
            Self {
                path: path.to_path_buf(),
                file,
                len: valid_len,
                sync: true,
            },
            Recovery {
                events,
                torn_tail: contents.torn_tail,
                dropped,
            },
        ))
    }

    /// Skips fsync; for tests and throwaway runs.
    pub fn without_sync(mut self) -> Self {
        self.sync = false;
        self
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

impl Journal for FileJournal {
    fn append(&mut self, batch: &[Event]) -> Result<(), StorageError> {
        if batch.is_empty() {
            return Ok(());
        }
        let mut buf = String::new();
        for e in batch {
            buf.push_str(&encode_line(e));
        }
        let written = self.file.write_all(buf.as_bytes()).and_then(|()| {
            if self.sync {
                self.file.sync_data()
            } else {
                Ok(())
            }
        });
        match written {
            Ok(()) => {
                self.len += buf.len() as u64;
                Ok(())
            }
            Err(e) => {
                // best effort: do not leave a partial batch for the next append to extend
                let _ = self.file.set_len(self.len);
                let _ = self.file.seek(SeekFrom::Start(self.len));
                Err(StorageError(e.to_string()))
            }
        }
    }
}

/// Journal that keeps a copy of every appended event, for serving log tails.
#[derive(Debug)]
pub struct MirroredJournal<J> {
    pub inner: J,
    pub events: Vec<Event>,
}

impl<J: Journal> Journal for MirroredJournal<J> {
    fn append(&mut self, batch: &[Event]) -> Result<(), StorageError> {
        self.inner.append(batch)?;
        self.events.extend_from_slice(batch);
        Ok(())
    }
}
