//! Append-only event records, the journal contract, and replay.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attribution::AttributionResult;
use crate::pool::FragmentId;
use crate::session::SessionId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    /// Strictly increasing, gap-free, starting at 0.
    pub seq: u64,
    /// Milliseconds since the epoch, or the logical sequence when no clock is set.
    pub timestamp: u64,
    /// Events of one batch commit together or not at all.
    pub batch: u64,
    /// Set on the final event of its batch.
    pub last_in_batch: bool,
    #[serde(flatten)]
    pub kind: EventKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractedFragment {
    pub id: FragmentId,
    pub text: String,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload", rename_all = "snake_case")]
pub enum EventKind {
    FragmentAdded {
        id: FragmentId,
        text: String,
        source: String,
        created_iteration: u64,
    },
    SessionGenerated {
        session: SessionId,
        conversation: Option<u64>,
        selected: Vec<FragmentId>,
        output_text: String,
        user_input: String,
    },
    FeedbackApplied {
        session: SessionId,
        r: f64,
        /// Over every selected fragment, in selection order.
        attribution: AttributionResult,
        /// Selected fragments still alive at commit time; only these are updated.
        updated: Vec<FragmentId>,
    },
    FragmentsExtracted {
        session: SessionId,
        /// Newly inserted fragments only; duplicates of alive fragments are omitted.
        fragments: Vec<ExtractedFragment>,
        warnings: Vec<String>,
    },
    Pruned {
        session: Option<SessionId>,
        ids: Vec<FragmentId>,
    },
    BackendError {
        session: Option<SessionId>,
        message: String,
    },
}

impl EventKind {
    pub fn name(&self) -> &'static str {
        match self {
            EventKind::FragmentAdded { .. } => "fragment_added",
            EventKind::SessionGenerated { .. } => "session_generated",
            EventKind::FeedbackApplied { .. } => "feedback_applied",
            EventKind::FragmentsExtracted { .. } => "fragments_extracted",
            EventKind::Pruned { .. } => "pruned",
            EventKind::BackendError { .. } => "backend_error",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("storage failure: {0}")]
pub struct StorageError(pub String);

/// Durable sink for event batches. `append` must be all-or-nothing from the
/// reader's point of view: a partially written batch is discarded on replay.
pub trait Journal {
    fn append(&mut self, batch: &[Event]) -> Result<(), StorageError>;
}

impl<J: Journal + ?Sized> Journal for &mut J {
    fn append(&mut self, batch: &[Event]) -> Result<(), StorageError> {
        (**self).append(batch)
    }
}

impl<J: Journal + ?Sized> Journal for alloc::boxed::Box<J> {
    fn append(&mut self, batch: &[Event]) -> Result<(), StorageError> {
        (**self).append(batch)
    }
}

/// Keeps every event in memory.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MemoryJournal {
    pub events: Vec<Event>,
}

impl Journal for MemoryJournal {
    fn append(&mut self, batch: &[Event]) -> Result<(), StorageError> {
        self.events.extend_from_slice(batch);
        Ok(())
    }
}

/// Discards everything. Used by the simulator, where the log is not needed.
#[derive(Debug, Clone, Copy, Default)]
pub struct NullJournal;

impl Journal for NullJournal {
    fn append(&mut self, _: &[Event]) -> Result<(), StorageError> {
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ReplayError {
    #[error("expected seq {expected}, found {found}")]
    SeqGap { expected: u64, found: u64 },
    #[error("event {seq}: batch {batch} does not follow batch {previous}")]
    BatchOrder { seq: u64, batch: u64, previous: u64 },
    #[error("event {seq} ({kind}) cannot be applied: {reason}")]
    Inconsistent { seq: u64, kind: &'static str, reason: String },
}

/// Splits a log into the prefix made of complete batches and the number of
/// trailing events belonging to an unfinished batch.
pub fn complete_prefix(events: &[Event]) -> (&[Event], usize) {
    let end = events
        .iter()
        .rposition(|e| e.last_in_batch)
        .map_or(0, |i| i + 1);
    (&events[..end], events.len() - end)
}

/// Checks seq continuity and batch ordering, starting at `first_seq`.
pub fn check_order(events: &[Event], first_seq: u64, last_batch: Option<u64>) -> Result<(), ReplayError> {
    let mut open_batch: Option<u64> = None;
    let mut previous = last_batch;
    for (expected, e) in (first_seq..).zip(events) {
        if e.seq != expected {
            return Err(ReplayError::SeqGap { expected, found: e.seq });
        }
        match open_batch {
            Some(b) if b != e.batch => {
                return Err(ReplayError::BatchOrder { seq: e.seq, batch: e.batch, previous: b });
            }
            Some(_) => {}
            None => {
                if let Some(p) = previous {
                    if e.batch <= p {
                        return Err(ReplayError::BatchOrder { seq: e.seq, batch: e.batch, previous: p });
                    }
                }
                open_batch = Some(e.batch);
            }
        }
        if e.last_in_batch {
            previous = open_batch.take();
        }
    }
    Ok(())
}
