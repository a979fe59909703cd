//! Feedback-driven knowledge pool.
//!
//! Fragments enter the pool at value 1, are grounded into generated
//! outputs a few at a time, and have their value pulled by an exponential
//! moving average toward `weight * r` whenever a user rates an output that
//! used them. Fragments that stay below the threshold after their grace
//! period are pruned. New fragments are mined from what users type.
//!
//! This crate is `no_std` (it needs `alloc`). File formats, the HTTP
//! service, the remote chat backend and the CLI live in the `coem` crate.

#![no_std]

extern crate alloc;

pub mod attribution;
pub mod backend;
pub mod engine;
pub mod event;
pub mod extraction;
pub mod feedback;
pub mod pool;
pub mod session;
pub mod simulator;
pub mod text;

pub use attribution::{AttributionRequest, AttributionResult, Attributor, Strategy};
pub use backend::{BackendError, GenerationRequest, Generator, MockGenerator};
pub use engine::{Engine, EngineError, EngineState};
pub use event::{Event, EventKind, Journal, MemoryJournal};
pub use extraction::{ExtractionResult, Extractor};
pub use feedback::{Rating, RatingScale};
pub use pool::{Fragment, FragmentId, KnowledgePool, PoolConfig, PoolError};
pub use session::{SelectorQuery, Session, SessionId, SessionRequest, SessionStatus};
