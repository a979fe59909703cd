//! Sessions and fragment selection.

use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::attribution::AttributionResult;
use crate::engine::EngineError;
use crate::pool::{FragmentId, KnowledgePool};
use crate::text;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SessionId(pub u64);

impl fmt::Display for SessionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Only moves forward: generated -> rated -> applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionStatus {
    Generated,
    /// Attribution computed, commit still outstanding.
    Rated,
    Applied,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub id: SessionId,
    /// Turns of one multi-turn dialogue share a conversation id.
    pub conversation: Option<u64>,
    pub selected: Vec<FragmentId>,
    pub output_text: String,
    pub user_input: String,
    /// Canonical feedback in [-1, 1]. May be set while still `Generated`
    /// when attribution or extraction failed and the update was deferred.
    pub feedback: Option<f64>,
    pub attribution: Option<AttributionResult>,
    pub status: SessionStatus,
}

impl Session {
    pub fn has_pending_feedback(&self) -> bool {
        self.status != SessionStatus::Applied && self.feedback.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectorQuery {
    pub topic_hint: Option<String>,
    pub k: usize,
}

impl SelectorQuery {
    pub fn top(k: usize) -> Self {
        Self { topic_hint: None, k }
    }

    pub fn with_hint(hint: impl Into<String>, k: usize) -> Self {
        Self {
            topic_hint: Some(hint.into()),
            k,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionRequest {
    pub query: SelectorQuery,
    pub user_input: String,
    pub conversation: Option<u64>,
}

impl SessionRequest {
    pub fn new(query: SelectorQuery) -> Self {
        Self {
            query,
            user_input: String::new(),
            conversation: None,
        }
    }
}

/// Picks up to `k` alive fragments ranked by hint-token overlap (desc),
/// then value (desc), then id (asc).
pub fn select_subset(pool: &KnowledgePool, query: &SelectorQuery) -> Result<Vec<FragmentId>, EngineError> {
    if query.k == 0 {
        return Err(EngineError::InvalidQuery("k must be positive"));
    }
    if pool.alive_count() == 0 {
        return Err(EngineError::EmptyPool);
    }
    let hint: BTreeSet<String> = query
        .topic_hint
        .as_deref()
        .map(|h| text::tokens(h).into_iter().collect())
        .unwrap_or_default();

    let mut ranked: Vec<(usize, f64, FragmentId)> = pool
        .alive()
        .map(|f| {
            let overlap = if hint.is_empty() { 0 } else { hint_overlap(&hint, &f.text) };
            (overlap, f.value, f.id)
        })
        .collect();
    ranked.sort_by(|a, b| b.0.cmp(&a.0).then(b.1.total_cmp(&a.1)).then(a.2.cmp(&b.2)));
    Ok(ranked.into_iter().take(query.k).map(|(_, _, id)| id).collect())
}

/// Distinct hint tokens present in `text`, tokenized as [`text::tokens`] does.
fn hint_overlap(hint: &BTreeSet<String>, text: &str) -> usize {
    let mut matched: Vec<&str> = Vec::new();
    for word in text.split_whitespace() {
        let w = word.trim_matches(|c: char| !c.is_alphanumeric());
        if w.is_empty() {
            continue;
        }
        let hit = if w.bytes().all(|b| b.is_ascii() && !b.is_ascii_uppercase()) {
            hint.get(w)
        } else {
            hint.get(w.to_lowercase().as_str())
        };
        if let Some(h) = hit {
            if !matched.contains(&h.as_str()) {
                matched.push(h);
            }
        }
    }
    matched.len()
}
