//! The knowledge pool: scored fragments, EMA value updates, optimistic
//! initialization and threshold pruning.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::text;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FragmentId(pub u64);

impl fmt::Display for FragmentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Score given to every fragment on entry.
pub const OPTIMISTIC_VALUE: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fragment {
    pub id: FragmentId,
    pub text: String,
    pub source: String,
    pub value: f64,
    /// Rated sessions this fragment supported.
    pub session_count: u64,
    pub feedback_count: u64,
    pub created_iteration: u64,
    pub alive: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoolConfig {
    /// EMA learning rate, strictly inside (0, 1).
    pub alpha: f64,
    /// Prune threshold in [-1, 1].
    pub theta: f64,
    /// Grace period: a fragment is only pruned once it has taken part in
    /// at least this many rated sessions.
    pub min_sessions_before_prune: u64,
    /// Number of fragments grounding one generation.
    pub subset_size: usize,
}

impl Default for PoolConfig {
    fn default() -> Self {
        Self {
            alpha: 0.03,
            theta: 0.5,
            min_sessions_before_prune: 5,
            subset_size: 3,
        }
    }
}

impl PoolConfig {
    pub fn validate(&self) -> Result<(), PoolError> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(PoolError::InvalidConfig("alpha must lie in (0, 1)"));
        }
        if !(-1.0..=1.0).contains(&self.theta) {
            return Err(PoolError::InvalidConfig("theta must lie in [-1, 1]"));
        }
        if self.min_sessions_before_prune == 0 {
            return Err(PoolError::InvalidConfig("min_sessions_before_prune must be positive"));
        }
        if self.subset_size == 0 {
            return Err(PoolError::InvalidConfig("subset_size must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PoolError {
    #[error("fragment text is empty after normalization")]
    EmptyText,
    #[error("unknown fragment {0}")]
    UnknownFragment(FragmentId),
    #[error("fragment {0} has been pruned")]
    PrunedFragment(FragmentId),
    #[error("fragment {0} appears more than once in the subset")]
    DuplicateInSubset(FragmentId),
    #[error("subset has {subset} fragments but {weights} weights were given")]
    LengthMismatch { subset: usize, weights: usize },
    #[error("attribution weight {0} is outside [0, 1]")]
    WeightOutOfRange(f64),
    #[error("feedback score {0} is outside [-1, 1]")]
    FeedbackOutOfRange(f64),
    #[error("fragment value {0} is outside [-1, 1]")]
    ValueOutOfRange(f64),
    #[error("pool is empty")]
    EmptyPool,
    #[error("invalid pool config: {0}")]
    InvalidConfig(&'static str),
    #[error("fragment id {0} is already taken")]
    IdTaken(FragmentId),
    #[error("fragment {0} violates feedback_count <= session_count")]
    CountInvariant(FragmentId),
}

/// One EMA step: `(1 - alpha) * value + alpha * (weight * r)`.
#[inline]
pub fn ema_update(value: f64, alpha: f64, weight: f64, r: f64) -> f64 {
    (1.0 - alpha) * value + alpha * (weight * r)
}

#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgePool {
    fragments: BTreeMap<FragmentId, Fragment>,
    // normalized text -> alive fragment
    by_text: BTreeMap<String, FragmentId>,
    config: PoolConfig,
    iteration: u64,
    next_id: u64,
}

impl KnowledgePool {
    pub fn new(config: PoolConfig) -> Result<Self, PoolError> {
        config.validate()?;
        Ok(Self {
            fragments: BTreeMap::new(),
            by_text: BTreeMap::new(),
            config,
            iteration: 0,
            next_id: 0,
        })
    }

    /// Rebuilds a pool from exported parts, re-checking every invariant.
    pub fn from_parts(
        config: PoolConfig,
        iteration: u64,
        next_id: u64,
        fragments: impl IntoIterator<Item = Fragment>,
    ) -> Result<Self, PoolError> {
        let mut pool = Self::new(config)?;
        pool.iteration = iteration;
        for frag in fragments {
            if pool.fragments.contains_key(&frag.id) {
                return Err(PoolError::IdTaken(frag.id));
            }
            let key = text::normalize(&frag.text);
            if key.is_empty() {
                return Err(PoolError::EmptyText);
            }
            if !(-1.0..=1.0).contains(&frag.value) {
                return Err(PoolError::ValueOutOfRange(frag.value));
            }
            if frag.feedback_count > frag.session_count {
                return Err(PoolError::CountInvariant(frag.id));
            }
            if frag.alive && pool.by_text.insert(key, frag.id).is_some() {
                return Err(PoolError::IdTaken(frag.id));
            }
            pool.next_id = pool.next_id.max(frag.id.0 + 1);
            pool.fragments.insert(frag.id, frag);
        }
        pool.next_id = pool.next_id.max(next_id);
        Ok(pool)
    }

    pub fn config(&self) -> &PoolConfig {
        &self.config
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    /// Id the next inserted fragment will receive.
    pub fn next_id(&self) -> FragmentId {
        FragmentId(self.next_id)
    }

    pub fn get(&self, id: FragmentId) -> Option<&Fragment> {
        self.fragments.get(&id)
    }

    /// All fragments ever added, ascending id.
    pub fn fragments(&self) -> impl Iterator<Item = &Fragment> {
        self.fragments.values()
    }

    pub fn alive(&self) -> impl Iterator<Item = &Fragment> {
        self.fragments.values().filter(|f| f.alive)
    }

    pub fn alive_count(&self) -> usize {
        self.by_text.len()
    }

    pub fn total_count(&self) -> usize {
        self.fragments.len()
    }

    /// Alive fragment whose normalized text matches, if any.
    pub fn lookup_text(&self, text: &str) -> Option<FragmentId> {
        self.by_text.get(&text::normalize(text)).copied()
    }

    /// Adds a fragment at the optimistic value, or returns the alive
    /// duplicate's id untouched.
    pub fn add_fragment(&mut self, text: &str, source: &str) -> Result<FragmentId, PoolError> {
        let key = text::normalize(text);
        if key.is_empty() {
            return Err(PoolError::EmptyText);
        }
        if let Some(&id) = self.by_text.get(&key) {
            return Ok(id);
        }
        let id = FragmentId(self.next_id);
        self.insert_unchecked(id, key, text.trim(), source, self.iteration);
        Ok(id)
    }

    /// Inserts with a caller-chosen id. Used when replaying a log.
    pub fn insert_with_id(
        &mut self,
        id: FragmentId,
        text: &str,
        source: &str,
        created_iteration: u64,
    ) -> Result<(), PoolError> {
        let key = text::normalize(text);
        if key.is_empty() {
            return Err(PoolError::EmptyText);
        }
        if self.fragments.contains_key(&id) || self.by_text.contains_key(&key) {
            return Err(PoolError::IdTaken(id));
        }
        self.insert_unchecked(id, key, text.trim(), source, created_iteration);
        Ok(())
    }

    fn insert_unchecked(&mut self, id: FragmentId, key: String, text: &str, source: &str, created: u64) {
        self.by_text.insert(key, id);
        self.next_id = self.next_id.max(id.0 + 1);
        self.fragments.insert(
            id,
            Fragment {
                id,
                text: String::from(text),
                source: String::from(source),
                value: OPTIMISTIC_VALUE,
                session_count: 0,
                feedback_count: 0,
                created_iteration: created,
                alive: true,
            },
        );
    }

    /// Applies one session's attributed feedback. Inputs are validated in
    /// full before anything is mutated.
    pub fn apply_feedback(
        &mut self,
        subset: &[FragmentId],
        weights: &[f64],
        r: f64,
    ) -> Result<Vec<f64>, PoolError> {
        if subset.len() != weights.len() {
            return Err(PoolError::LengthMismatch {
                subset: subset.len(),
                weights: weights.len(),
            });
        }
        if !(-1.0..=1.0).contains(&r) {
            return Err(PoolError::FeedbackOutOfRange(r));
        }
        for (i, (&id, &w)) in subset.iter().zip(weights).enumerate() {
            if !(0.0..=1.0).contains(&w) {
                return Err(PoolError::WeightOutOfRange(w));
            }
            match self.fragments.get(&id) {
                None => return Err(PoolError::UnknownFragment(id)),
                Some(f) if !f.alive => return Err(PoolError::PrunedFragment(id)),
                Some(_) => {}
            }
            if subset[..i].contains(&id) {
                return Err(PoolError::DuplicateInSubset(id));
            }
        }

        let alpha = self.config.alpha;
        let mut updated = Vec::with_capacity(subset.len());
        for (&id, &w) in subset.iter().zip(weights) {
            let frag = self.fragments.get_mut(&id).expect("validated above");
            frag.value = ema_update(frag.value, alpha, w, r);
            frag.session_count += 1;
            frag.feedback_count += 1;
            updated.push(frag.value);
        }
        self.iteration += 1;
        Ok(updated)
    }

    /// Fragments that `prune` would remove right now, ascending id.
    pub fn prune_candidates(&self) -> Vec<FragmentId> {
        let cfg = &self.config;
        self.alive()
            .filter(|f| f.value < cfg.theta && f.session_count >= cfg.min_sessions_before_prune)
            .map(|f| f.id)
            .collect()
    }

    pub fn prune(&mut self) -> Vec<FragmentId> {
        let removed = self.prune_candidates();
        for id in &removed {
            self.retire(*id);
        }
        removed
    }

    /// Marks exactly the given alive fragments as pruned.
    pub fn prune_ids(&mut self, ids: &[FragmentId]) -> Result<(), PoolError> {
        for id in ids {
            match self.fragments.get(id) {
                None => return Err(PoolError::UnknownFragment(*id)),
                Some(f) if !f.alive => return Err(PoolError::PrunedFragment(*id)),
                Some(_) => {}
            }
        }
        for id in ids {
            self.retire(*id);
        }
        Ok(())
    }

    fn retire(&mut self, id: FragmentId) {
        if let Some(frag) = self.fragments.get_mut(&id) {
            frag.alive = false;
            let key = text::normalize(&frag.text);
            if self.by_text.get(&key) == Some(&id) {
                self.by_text.remove(&key);
            }
        }
    }

    /// Alive fragments scoring at least `theta`, over every fragment ever added.
    pub fn high_value_fraction(&self, theta: f64) -> Result<f64, PoolError> {
        if self.fragments.is_empty() {
            return Err(PoolError::EmptyPool);
        }
        let high = self.alive().filter(|f| f.value >= theta).count();
        Ok(high as f64 / self.fragments.len() as f64)
    }

    /// Bitwise state equality: floats compared by bit pattern.
    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.iteration == other.iteration
            && self.next_id == other.next_id
            && self.config.alpha.to_bits() == other.config.alpha.to_bits()
            && self.config.theta.to_bits() == other.config.theta.to_bits()
            && self.config.min_sessions_before_prune == other.config.min_sessions_before_prune
            && self.config.subset_size == other.config.subset_size
            && self.fragments.len() == other.fragments.len()
            && self.fragments.values().zip(other.fragments.values()).all(|(a, b)| {
                a.id == b.id
                    && a.text == b.text
                    && a.source == b.source
                    && a.value.to_bits() == b.value.to_bits()
                    && a.session_count == b.session_count
                    && a.feedback_count == b.feedback_count
                    && a.created_iteration == b.created_iteration
                    && a.alive == b.alive
            })
    }
}
