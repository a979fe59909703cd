//! Generator abstraction and the deterministic mock generator.

use alloc::boxed::Box;
use alloc::format;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec::Vec;
use core::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::text;

/// Template id for "summary with viewpoints" generation.
pub const SUMMARY_TEMPLATE: &str = "summary-v1";
/// Template id for knowledge extraction from user input.
pub const EXTRACT_TEMPLATE: &str = "extract-v1";

pub const DEFAULT_MAX_LENGTH: usize = 4096;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub fragments: Vec<String>,
    /// Prompt template id.
    pub instruction: String,
    /// Upper bound on output length, in characters.
    pub max_length: usize,
}

impl GenerationRequest {
    pub fn summary(fragments: Vec<String>) -> Self {
        Self {
            fragments,
            instruction: String::from(SUMMARY_TEMPLATE),
            max_length: DEFAULT_MAX_LENGTH,
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if self.fragments.is_empty() {
            return Err(BackendError::InvalidRequest(String::from("no fragments")));
        }
        if self.max_length == 0 {
            return Err(BackendError::InvalidRequest(String::from("max_length must be positive")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BackendError {
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("backend timed out: {0}")]
    Timeout(String),
    #[error("malformed backend response: {0}")]
    Malformed(String),
    #[error("backend unavailable: {0}")]
    Unavailable(String),
    #[error("invalid generation request: {0}")]
    InvalidRequest(String),
}

pub trait Generator {
    fn generate(&self, req: &GenerationRequest) -> Result<String, BackendError>;
}

impl<G: Generator + ?Sized> Generator for &G {
    fn generate(&self, req: &GenerationRequest) -> Result<String, BackendError> {
        (**self).generate(req)
    }
}

impl<G: Generator + ?Sized> Generator for Box<G> {
    fn generate(&self, req: &GenerationRequest) -> Result<String, BackendError> {
        (**self).generate(req)
    }
}

impl<G: Generator + ?Sized> Generator for Arc<G> {
    fn generate(&self, req: &GenerationRequest) -> Result<String, BackendError> {
        (**self).generate(req)
    }
}

/// Canonical digest: a header line, then one numbered line per fragment
/// holding that fragment's first clause. Order-sensitive and pure.
pub fn generate_mock(req: &GenerationRequest, seed: u64) -> String {
    let mut out = format!(
        "[mock-digest v1 seed={seed} template={} n={}]",
        req.instruction,
        req.fragments.len()
    );
    for (i, fragment) in req.fragments.iter().enumerate() {
        let _ = write!(out, "\n{}. {}", i + 1, text::first_clause(fragment));
    }
    text::truncate_chars(&mut out, req.max_length);
    out
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MockGenerator {
    pub seed: u64,
}

impl MockGenerator {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }
}

impl Generator for MockGenerator {
    fn generate(&self, req: &GenerationRequest) -> Result<String, BackendError> {
        req.validate()?;
        Ok(generate_mock(req, self.seed))
    }
}
