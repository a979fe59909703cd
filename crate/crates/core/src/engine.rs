//! Session orchestration over an event-sourced pool.
//!
//! Every state change is first planned against a staged copy, written to the
//! [`Journal`] as one batch, and only then applied. Applying is the same
//! function replay uses, so a live engine and a replayed log agree bit for bit.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::ops::ControlFlow;

use thiserror::Error;

use crate::attribution::{AttributionError, AttributionRequest, AttributionResult, Attributor};
use crate::backend::{BackendError, GenerationRequest, Generator};
use crate::event::{self, Event, EventKind, ExtractedFragment, Journal, ReplayError, StorageError};
use crate::extraction::{ExtractError, Extractor};
use crate::feedback::{FeedbackError, Rating, RatingScale};
use crate::pool::{FragmentId, KnowledgePool, PoolConfig, PoolError};
use crate::session::{select_subset, Session, SessionId, SessionRequest, SessionStatus};

/// Source label given to fragments mined from user input.
pub const EXTRACTED_SOURCE: &str = "extracted";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeedbackStep {
    Attributed,
    Updated,
    Extracted,
    Pruned,
    Persisted,
}

/// Observes the steps of a feedback commit; returning `Break` aborts at that
/// point as if the process had died there.
pub trait FeedbackProbe {
    fn reached(&mut self, step: FeedbackStep) -> ControlFlow<()>;
}

impl FeedbackProbe for () {
    fn reached(&mut self, _: FeedbackStep) -> ControlFlow<()> {
        ControlFlow::Continue(())
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EngineError {
    #[error(transparent)]
    Pool(#[from] PoolError),
    #[error("knowledge pool has no alive fragments")]
    EmptyPool,
    #[error("invalid query: {0}")]
    InvalidQuery(&'static str),
    #[error("unknown session {0}")]
    UnknownSession(SessionId),
    #[error("session {0} already has feedback")]
    DuplicateFeedback(SessionId),
    #[error("session {0} has no deferred feedback to retry")]
    NothingToRetry(SessionId),
    #[error(transparent)]
    Feedback(#[from] FeedbackError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("attribution failed for session {session}; feedback kept for retry: {source}")]
    AttributionDeferred { session: SessionId, source: AttributionError },
    #[error("extraction failed for session {session}; feedback kept for retry: {source}")]
    ExtractionDeferred { session: SessionId, source: ExtractError },
    #[error(transparent)]
    Storage(#[from] StorageError),
    #[error(transparent)]
    Replay(#[from] ReplayError),
    #[error("interrupted at {0:?}")]
    Interrupted(FeedbackStep),
    #[error("engine state diverged from its journal; rebuild it by replay")]
    Poisoned,
}

/// Everything reconstructible from the event log.
#[derive(Debug, Clone, PartialEq)]
pub struct EngineState {
    pub pool: KnowledgePool,
    pub sessions: BTreeMap<SessionId, Session>,
    next_seq: u64,
    next_batch: u64,
    last_batch: Option<u64>,
    next_session: u64,
}

/// Result of replaying a log.
#[derive(Debug, Clone, PartialEq)]
pub struct Replayed {
    pub state: EngineState,
    /// Trailing events of an unfinished batch that were ignored.
    pub dropped: usize,
}

impl EngineState {
    pub fn new(config: PoolConfig) -> Result<Self, PoolError> {
        Ok(Self {
            pool: KnowledgePool::new(config)?,
            sessions: BTreeMap::new(),
            next_seq: 0,
            next_batch: 0,
            last_batch: None,
            next_session: 0,
        })
    }

    pub fn next_seq(&self) -> u64 {
        self.next_seq
    }

    /// Rebuilds state from a log, ignoring an unfinished trailing batch.
    pub fn replay(config: PoolConfig, events: &[Event]) -> Result<Replayed, EngineError> {
        let mut state = Self::new(config)?;
        let (complete, dropped) = event::complete_prefix(events);
        event::check_order(complete, 0, None)?;
        for e in complete {
            state.apply(e)?;
        }
        Ok(Replayed { state, dropped })
    }

    /// Applies one event. Sequence numbers must be contiguous.
    pub fn apply(&mut self, e: &Event) -> Result<(), ReplayError> {
        if e.seq != self.next_seq {
            return Err(ReplayError::SeqGap {
                expected: self.next_seq,
                found: e.seq,
            });
        }
        let fail = |reason: String| ReplayError::Inconsistent {
            seq: e.seq,
            kind: e.kind.name(),
            reason,
        };
        match &e.kind {
            EventKind::FragmentAdded {
                id,
                text,
                source,
                created_iteration,
            } => self
                .pool
                .insert_with_id(*id, text, source, *created_iteration)
                .map_err(|err| fail(format!("{err}")))?,
            EventKind::SessionGenerated {
                session,
                conversation,
                selected,
                output_text,
                user_input,
            } => {
                if self.sessions.contains_key(session) {
                    return Err(fail(format!("session {session} already exists")));
                }
                self.sessions.insert(
                    *session,
                    Session {
                        id: *session,
                        conversation: *conversation,
                        selected: selected.clone(),
                        output_text: output_text.clone(),
                        user_input: user_input.clone(),
                        feedback: None,
                        attribution: None,
                        status: SessionStatus::Generated,
                    },
                );
                self.next_session = self.next_session.max(session.0 + 1);
            }
            EventKind::FeedbackApplied {
                session,
                r,
                attribution,
                updated,
            } => {
                let sess = self
                    .sessions
                    .get(session)
                    .ok_or_else(|| fail(format!("unknown session {session}")))?;
                if sess.status == SessionStatus::Applied {
                    return Err(fail(format!("session {session} already applied")));
                }
                let weights = weights_for(&sess.selected, attribution, updated).map_err(fail)?;
                self.pool
                    .apply_feedback(updated, &weights, *r)
                    .map_err(|err| fail(format!("{err}")))?;
                let sess = self.sessions.get_mut(session).expect("checked above");
                sess.feedback = Some(*r);
                sess.attribution = Some(attribution.clone());
                sess.status = SessionStatus::Applied;
            }
            EventKind::FragmentsExtracted { fragments, .. } => {
                let iteration = self.pool.iteration();
                for f in fragments {
                    self.pool
                        .insert_with_id(f.id, &f.text, EXTRACTED_SOURCE, iteration)
                        .map_err(|err| fail(format!("{err}")))?;
                }
            }
            EventKind::Pruned { ids, .. } => {
                self.pool.prune_ids(ids).map_err(|err| fail(format!("{err}")))?
            }
            EventKind::BackendError { .. } => {}
        }
        self.next_seq += 1;
        if e.last_in_batch {
            self.last_batch = Some(e.batch);
            self.next_batch = e.batch + 1;
        }
        Ok(())
    }
}

fn weights_for(
    selected: &[FragmentId],
    attribution: &AttributionResult,
    updated: &[FragmentId],
) -> Result<Vec<f64>, String> {
    if attribution.weights.len() != selected.len() {
        return Err(format!(
            "{} weights for {} selected fragments",
            attribution.weights.len(),
            selected.len()
        ));
    }
    updated
        .iter()
        .map(|id| {
            selected
                .iter()
                .position(|s| s == id)
                .map(|i| attribution.weights[i])
                .ok_or_else(|| format!("fragment {id} was not selected"))
        })
        .collect()
}

/// Selection and generation request for a session not yet committed.
#[derive(Debug, Clone, PartialEq)]
pub struct PlannedSession {
    pub selected: Vec<FragmentId>,
    pub request: GenerationRequest,
    pub user_input: String,
    pub conversation: Option<u64>,
}

pub struct Engine<J> {
    state: EngineState,
    journal: J,
    scale: RatingScale,
    clock: Option<fn() -> u64>,
    poisoned: bool,
}

impl<J: Journal> Engine<J> {
    pub fn new(config: PoolConfig, journal: J) -> Result<Self, EngineError> {
        Ok(Self::from_state(EngineState::new(config)?, journal))
    }

    /// Resumes from replayed state; the journal must already hold that state's log.
    pub fn from_state(state: EngineState, journal: J) -> Self {
        Self {
            state,
            journal,
            scale: RatingScale::default(),
            clock: None,
            poisoned: false,
        }
    }

    pub fn with_rating_scale(mut self, scale: RatingScale) -> Self {
        self.scale = scale;
        self
    }

    /// Wall clock for event timestamps; without one the sequence number is used.
    pub fn with_clock(mut self, clock: fn() -> u64) -> Self {
        self.clock = Some(clock);
        self
    }

    pub fn state(&self) -> &EngineState {
        &self.state
    }

    pub fn pool(&self) -> &KnowledgePool {
        &self.state.pool
    }

    pub fn session(&self, id: SessionId) -> Option<&Session> {
        self.state.sessions.get(&id)
    }

    pub fn journal(&self) -> &J {
        &self.journal
    }

    pub fn journal_mut(&mut self) -> &mut J {
        &mut self.journal
    }

    pub fn rating_scale(&self) -> RatingScale {
        self.scale
    }

    pub fn into_parts(self) -> (EngineState, J) {
        (self.state, self.journal)
    }

    fn ensure_healthy(&self) -> Result<(), EngineError> {
        if self.poisoned {
            Err(EngineError::Poisoned)
        } else {
            Ok(())
        }
    }

    fn stamp(&self, kinds: Vec<EventKind>) -> Vec<Event> {
        let n = kinds.len();
        let first = self.state.next_seq;
        let batch = self.state.next_batch;
        let now = self.clock.map(|c| c());
        kinds
            .into_iter()
            .enumerate()
            .map(|(i, kind)| {
                let seq = first + i as u64;
                Event {
                    seq,
                    timestamp: now.unwrap_or(seq),
                    batch,
                    last_in_batch: i + 1 == n,
                    kind,
                }
            })
            .collect()
    }

    fn apply_all(&mut self, events: &[Event]) -> Result<(), EngineError> {
        for e in events {
            if let Err(err) = self.state.apply(e) {
                self.poisoned = true;
                return Err(err.into());
            }
        }
        Ok(())
    }

    /// Persists one batch, then applies it. An empty batch is a no-op.
    pub fn append_and_apply(&mut self, kinds: Vec<EventKind>) -> Result<Vec<Event>, EngineError> {
        self.ensure_healthy()?;
        if kinds.is_empty() {
            return Ok(Vec::new());
        }
        let events = self.stamp(kinds);
        self.journal.append(&events)?;
        self.apply_all(&events)?;
        Ok(events)
    }

    pub fn add_fragment(&mut self, text: &str, source: &str) -> Result<FragmentId, EngineError> {
        self.ensure_healthy()?;
        if crate::text::normalize(text).is_empty() {
            return Err(PoolError::EmptyText.into());
        }
        if let Some(id) = self.state.pool.lookup_text(text) {
            return Ok(id);
        }
        let id = self.state.pool.next_id();
        self.append_and_apply(alloc::vec![EventKind::FragmentAdded {
            id,
            text: String::from(text.trim()),
            source: String::from(source),
            created_iteration: self.state.pool.iteration(),
        }])?;
        Ok(id)
    }

    /// Selects fragments and builds the generation request without mutating anything.
    pub fn plan_session(&self, req: &SessionRequest) -> Result<PlannedSession, EngineError> {
        self.ensure_healthy()?;
        let selected = select_subset(&self.state.pool, &req.query)?;
        let texts = selected
            .iter()
            .map(|id| self.state.pool.get(*id).expect("selected from pool").text.clone())
            .collect();
        Ok(PlannedSession {
            selected,
            request: GenerationRequest::summary(texts),
            user_input: req.user_input.clone(),
            conversation: req.conversation,
        })
    }

    pub fn commit_session(&mut self, plan: PlannedSession, output_text: String) -> Result<Session, EngineError> {
        self.ensure_healthy()?;
        for id in &plan.selected {
            match self.state.pool.get(*id) {
                Some(f) if f.alive => {}
                Some(_) => return Err(PoolError::PrunedFragment(*id).into()),
                None => return Err(PoolError::UnknownFragment(*id).into()),
            }
        }
        let id = SessionId(self.state.next_session);
        self.append_and_apply(alloc::vec![EventKind::SessionGenerated {
            session: id,
            conversation: plan.conversation,
            selected: plan.selected,
            output_text,
            user_input: plan.user_input,
        }])?;
        Ok(self.state.sessions[&id].clone())
    }

    pub fn record_backend_error(&mut self, message: String) -> Result<(), EngineError> {
        self.append_and_apply(alloc::vec![EventKind::BackendError { session: None, message }])?;
        Ok(())
    }

    /// Select, then generate. A backend failure is logged and leaves the pool untouched.
    pub fn run_session<G: Generator + ?Sized>(
        &mut self,
        backend: &G,
        req: &SessionRequest,
    ) -> Result<Session, EngineError> {
        let plan = self.plan_session(req)?;
        match backend.generate(&plan.request) {
            Ok(output) => self.commit_session(plan, output),
            Err(err) => {
                self.record_backend_error(format!("{err}"))?;
                Err(err.into())
            }
        }
    }

    pub fn submit_feedback<A, E>(
        &mut self,
        id: SessionId,
        rating: Rating,
        attributor: &A,
        extractor: &E,
    ) -> Result<Session, EngineError>
    where
        A: Attributor + ?Sized,
        E: Extractor + ?Sized,
    {
        self.submit_feedback_probed(id, rating, attributor, extractor, &mut ())
    }

    /// Like [`Engine::submit_feedback`], reporting each step to `probe`.
    pub fn submit_feedback_probed<A, E, P>(
        &mut self,
        id: SessionId,
        rating: Rating,
        attributor: &A,
        extractor: &E,
        probe: &mut P,
    ) -> Result<Session, EngineError>
    where
        A: Attributor + ?Sized,
        E: Extractor + ?Sized,
        P: FeedbackProbe + ?Sized,
    {
        self.ensure_healthy()?;
        let session = self.state.sessions.get(&id).ok_or(EngineError::UnknownSession(id))?;
        if session.status == SessionStatus::Applied || session.feedback.is_some() {
            return Err(EngineError::DuplicateFeedback(id));
        }
        let r = self.scale.map(rating)?;
        self.commit_feedback(id, r, attributor, extractor, probe)
    }

    /// Re-runs a deferred feedback commit with the stored rating.
    pub fn retry_feedback<A, E>(&mut self, id: SessionId, attributor: &A, extractor: &E) -> Result<Session, EngineError>
    where
        A: Attributor + ?Sized,
        E: Extractor + ?Sized,
    {
        self.ensure_healthy()?;
        let session = self.state.sessions.get(&id).ok_or(EngineError::UnknownSession(id))?;
        if session.status == SessionStatus::Applied {
            return Err(EngineError::DuplicateFeedback(id));
        }
        let r = session.feedback.ok_or(EngineError::NothingToRetry(id))?;
        self.commit_feedback(id, r, attributor, extractor, &mut ())
    }

    fn commit_feedback<A, E, P>(
        &mut self,
        id: SessionId,
        r: f64,
        attributor: &A,
        extractor: &E,
        probe: &mut P,
    ) -> Result<Session, EngineError>
    where
        A: Attributor + ?Sized,
        E: Extractor + ?Sized,
        P: FeedbackProbe + ?Sized,
    {
        let step = |probe: &mut P, s: FeedbackStep| match probe.reached(s) {
            ControlFlow::Continue(()) => Ok(()),
            ControlFlow::Break(()) => Err(EngineError::Interrupted(s)),
        };
        let session = self.state.sessions[&id].clone();

        // 1. attribute over every selected fragment
        let req = AttributionRequest::new(
            session.output_text.clone(),
            session
                .selected
                .iter()
                .map(|fid| (*fid, self.state.pool.get(*fid).expect("selected from pool").text.clone()))
                .collect(),
        );
        let attribution = match attributor.attribute(&req) {
            Ok(a) => a,
            Err(source) => {
                self.defer(id, r, None);
                return Err(EngineError::AttributionDeferred { session: id, source });
            }
        };
        step(probe, FeedbackStep::Attributed)?;

        // 2. EMA update on a staged copy; fragments pruned meanwhile are skipped
        let mut staged = self.state.pool.clone();
        let updated: Vec<FragmentId> = session
            .selected
            .iter()
            .copied()
            .filter(|fid| staged.get(*fid).is_some_and(|f| f.alive))
            .collect();
        let weights = weights_for(&session.selected, &attribution, &updated).map_err(|_| {
            EngineError::AttributionDeferred {
                session: id,
                source: AttributionError::WeightCount {
                    expected: session.selected.len(),
                    got: attribution.weights.len(),
                },
            }
        })?;
        staged.apply_feedback(&updated, &weights, r)?;
        step(probe, FeedbackStep::Updated)?;

        // 3. extract new fragments from the user's input
        let extraction = match extractor.extract(&session.user_input) {
            Ok(x) => x,
            Err(source) => {
                self.defer(id, r, None);
                return Err(EngineError::ExtractionDeferred { session: id, source });
            }
        };
        let mut extracted = Vec::new();
        for cand in &extraction.candidates {
            if staged.lookup_text(&cand.text).is_some() {
                continue;
            }
            let fid = staged.next_id();
            staged.insert_with_id(fid, &cand.text, EXTRACTED_SOURCE, staged.iteration())?;
            extracted.push(ExtractedFragment {
                id: fid,
                text: staged.get(fid).expect("just inserted").text.clone(),
                confidence: cand.confidence,
            });
        }
        step(probe, FeedbackStep::Extracted)?;

        // 4. prune
        let pruned = staged.prune();
        step(probe, FeedbackStep::Pruned)?;

        let events = self.stamp(alloc::vec![
            EventKind::FeedbackApplied {
                session: id,
                r,
                attribution: attribution.clone(),
                updated,
            },
            EventKind::FragmentsExtracted {
                session: id,
                fragments: extracted,
                warnings: extraction.warnings,
            },
            EventKind::Pruned {
                session: Some(id),
                ids: pruned,
            },
        ]);
        if let Err(err) = self.journal.append(&events) {
            self.defer(id, r, Some(attribution));
            return Err(err.into());
        }
        if let Err(e) = step(probe, FeedbackStep::Persisted) {
            // the journal is ahead of memory now
            self.poisoned = true;
            return Err(e);
        }
        self.apply_all(&events)?;
        debug_assert!(self.state.pool.bitwise_eq(&staged));
        Ok(self.state.sessions[&id].clone())
    }

    fn defer(&mut self, id: SessionId, r: f64, attribution: Option<AttributionResult>) {
        if let Some(s) = self.state.sessions.get_mut(&id) {
            s.feedback = Some(r);
            if attribution.is_some() {
                s.status = SessionStatus::Rated;
                s.attribution = attribution;
            }
        }
    }
}
