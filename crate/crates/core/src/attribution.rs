//! Attribution strategies mapping (output, fragment) to a weight in [0, 1],
//! and the empirical expected-weighted-attribution estimator.

use alloc::boxed::Box;
use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{GenerationRequest, Generator, DEFAULT_MAX_LENGTH, SUMMARY_TEMPLATE};
use crate::pool::FragmentId;
use crate::text;

/// Exact Shapley enumeration visits 2^n coalitions; beyond this a sampling
/// estimator is required.
pub const MAX_SHAPLEY_FRAGMENTS: usize = 12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionRequest {
    pub output_text: String,
    pub fragments: Vec<(FragmentId, String)>,
}

impl AttributionRequest {
    pub fn new(output_text: impl Into<String>, fragments: Vec<(FragmentId, String)>) -> Self {
        Self {
            output_text: output_text.into(),
            fragments,
        }
    }

    pub fn validate(&self) -> Result<(), AttributionError> {
        if self.fragments.is_empty() {
            return Err(AttributionError::EmptyRequest);
        }
        let mut seen = BTreeSet::new();
        for (id, _) in &self.fragments {
            if !seen.insert(*id) {
                return Err(AttributionError::DuplicateFragment(*id));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.fragments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fragments.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Uniform,
    LeaveOneOut,
    Shapley,
    ExternalJudge,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionResult {
    /// Aligned with the request's fragment order.
    pub weights: Vec<f64>,
    pub strategy: Strategy,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AttributionError {
    #[error("attribution request has no fragments")]
    EmptyRequest,
    #[error("fragment {0} appears twice in the attribution request")]
    DuplicateFragment(FragmentId),
    #[error("exact Shapley supports at most {max} fragments, got {got}; use a sampling estimator")]
    TooManyFragments { got: usize, max: usize },
    #[error("scorer failed on fragment {index}: {message}")]
    Scorer { index: usize, message: String },
    #[error("coalition scorer failed on coalition {mask:#b}: {message}")]
    Coalition { mask: u32, message: String },
    #[error("judge failed: {0}")]
    Judge(String),
    #[error("expected {expected} weights, got {got}")]
    WeightCount { expected: usize, got: usize },
    #[error("fragment {0} does not appear in any session record")]
    FragmentNotInRecords(FragmentId),
}

/// Error reported by a pluggable scorer or judge.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{0}")]
pub struct ScorerError(pub String);

pub trait Attributor {
    fn strategy(&self) -> Strategy;
    fn attribute(&self, req: &AttributionRequest) -> Result<AttributionResult, AttributionError>;
}

impl<A: Attributor + ?Sized> Attributor for &A {
    fn strategy(&self) -> Strategy {
        (**self).strategy()
    }
    fn attribute(&self, req: &AttributionRequest) -> Result<AttributionResult, AttributionError> {
        (**self).attribute(req)
    }
}

impl<A: Attributor + ?Sized> Attributor for Box<A> {
    fn strategy(&self) -> Strategy {
        (**self).strategy()
    }
    fn attribute(&self, req: &AttributionRequest) -> Result<AttributionResult, AttributionError> {
        (**self).attribute(req)
    }
}

fn clip_unit(x: f64) -> f64 {
    x.clamp(0.0, 1.0)
}

// ---------------------------------------------------------------------------
// Uniform

/// Every fragment gets `1 / n`.
#[derive(Debug, Clone, Copy, Default)]
pub struct Uniform;

pub fn attribute_uniform(req: &AttributionRequest) -> Result<AttributionResult, AttributionError> {
    req.validate()?;
    let w = 1.0 / req.len() as f64;
    Ok(AttributionResult {
        weights: vec![w; req.len()],
        strategy: Strategy::Uniform,
    })
}

impl Attributor for Uniform {
    fn strategy(&self) -> Strategy {
        Strategy::Uniform
    }
    fn attribute(&self, req: &AttributionRequest) -> Result<AttributionResult, AttributionError> {
        attribute_uniform(req)
    }
}

// ---------------------------------------------------------------------------
// Leave-one-out

/// Similarity in [0, 1] between the full output and the output obtained
/// without fragment `omit`.
pub trait OutputScorer {
    fn similarity_without(&self, req: &AttributionRequest, omit: usize) -> Result<f64, ScorerError>;
}

/// `weight_i = 1 - similarity(with all, without i)`, clipped to [0, 1].
pub fn attribute_leave_one_out<S: OutputScorer + ?Sized>(
    req: &AttributionRequest,
    scorer: &S,
) -> Result<AttributionResult, AttributionError> {
    req.validate()?;
    let weights = if req.len() == 1 {
        vec![1.0]
    } else {
        (0..req.len())
            .map(|i| {
                let sim = scorer
                    .similarity_without(req, i)
                    .map_err(|e| AttributionError::Scorer { index: i, message: e.0 })?;
                if sim.is_nan() {
                    return Err(AttributionError::Scorer {
                        index: i,
                        message: String::from("similarity is NaN"),
                    });
                }
                Ok(clip_unit(1.0 - sim))
            })
            .collect::<Result<Vec<_>, _>>()?
    };
    Ok(AttributionResult {
        weights,
        strategy: Strategy::LeaveOneOut,
    })
}

#[derive(Debug, Clone)]
pub struct LeaveOneOut<S> {
    pub scorer: S,
}

impl<S: OutputScorer> LeaveOneOut<S> {
    pub fn new(scorer: S) -> Self {
        Self { scorer }
    }
}

impl<S: OutputScorer> Attributor for LeaveOneOut<S> {
    fn strategy(&self) -> Strategy {
        Strategy::LeaveOneOut
    }
    fn attribute(&self, req: &AttributionRequest) -> Result<AttributionResult, AttributionError> {
        attribute_leave_one_out(req, &self.scorer)
    }
}

/// Token-set Jaccard similarity; two empty texts are identical.
pub fn jaccard(a: &str, b: &str) -> f64 {
    let ta: BTreeSet<String> = text::tokens(a).into_iter().collect();
    let tb: BTreeSet<String> = text::tokens(b).into_iter().collect();
    let union = ta.union(&tb).count();
    if union == 0 {
        return 1.0;
    }
    ta.intersection(&tb).count() as f64 / union as f64
}

/// Regenerates the output without the omitted fragment and compares the
/// two outputs by token Jaccard similarity.
#[derive(Debug, Clone)]
pub struct RegenerateScorer<G> {
    pub generator: G,
    pub template: String,
    pub max_length: usize,
}

impl<G: Generator> RegenerateScorer<G> {
    pub fn new(generator: G) -> Self {
        Self {
            generator,
            template: String::from(SUMMARY_TEMPLATE),
            max_length: DEFAULT_MAX_LENGTH,
        }
    }
}

impl<G: Generator> OutputScorer for RegenerateScorer<G> {
    fn similarity_without(&self, req: &AttributionRequest, omit: usize) -> Result<f64, ScorerError> {
        let fragments = req
            .fragments
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != omit)
            .map(|(_, (_, t))| t.clone())
            .collect();
        let regenerated = self
            .generator
            .generate(&GenerationRequest {
                fragments,
                instruction: self.template.clone(),
                max_length: self.max_length,
            })
            .map_err(|e| ScorerError(alloc::format!("{e}")))?;
        Ok(jaccard(&req.output_text, &regenerated))
    }
}

// ---------------------------------------------------------------------------
// Shapley

/// Payoff in [0, 1] of a coalition, given as ascending fragment indices.
pub trait CoalitionScorer {
    fn payoff(&self, req: &AttributionRequest, members: &[usize]) -> Result<f64, ScorerError>;
}

impl<F> CoalitionScorer for F
where
    F: Fn(&[usize]) -> f64,
{
    fn payoff(&self, _req: &AttributionRequest, members: &[usize]) -> Result<f64, ScorerError> {
        Ok(self(members))
    }
}

/// Exact Shapley values for `n` players from a payoff over coalition bitmasks.
///
/// `phi_i = sum over S not containing i of |S|! (n-|S|-1)! / n! * (v(S+i) - v(S))`.
/// No clipping; efficiency holds: `sum(phi) == v(N) - v(empty)` up to rounding.
pub fn shapley_values<E>(
    n: usize,
    mut payoff: impl FnMut(u32) -> Result<f64, E>,
) -> Result<Vec<f64>, (u32, E)> {
    assert!(n <= MAX_SHAPLEY_FRAGMENTS, "too many players for exact enumeration");
    let coalitions = 1usize << n;
    let mut table = Vec::with_capacity(coalitions);
    for mask in 0..coalitions as u32 {
        table.push(payoff(mask).map_err(|e| (mask, e))?);
    }

    let mut factorial = vec![1.0f64; n + 1];
    for k in 1..=n {
        factorial[k] = factorial[k - 1] * k as f64;
    }
    // weight by coalition size |S| for S not containing the player
    let size_weight: Vec<f64> = (0..n)
        .map(|s| factorial[s] * factorial[n - s - 1] / factorial[n])
        .collect();

    let mut phi = vec![0.0; n];
    for (i, slot) in phi.iter_mut().enumerate() {
        let bit = 1u32 << i;
        let mut acc = 0.0;
        for mask in 0..coalitions as u32 {
            if mask & bit == 0 {
                let s = mask.count_ones() as usize;
                acc += size_weight[s] * (table[(mask | bit) as usize] - table[mask as usize]);
            }
        }
        *slot = acc;
    }
    Ok(phi)
}

fn members_of(mask: u32, n: usize) -> Vec<usize> {
    (0..n).filter(|i| mask & (1 << i) != 0).collect()
}

/// Raw Shapley values of every fragment under `scorer`, before clipping.
pub fn shapley_raw<C: CoalitionScorer + ?Sized>(
    req: &AttributionRequest,
    scorer: &C,
) -> Result<Vec<f64>, AttributionError> {
    req.validate()?;
    let n = req.len();
    if n > MAX_SHAPLEY_FRAGMENTS {
        return Err(AttributionError::TooManyFragments {
            got: n,
            max: MAX_SHAPLEY_FRAGMENTS,
        });
    }
    shapley_values(n, |mask| {
        let v = scorer.payoff(req, &members_of(mask, n))?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(ScorerError(String::from("payoff is not finite")))
        }
    })
    .map_err(|(mask, e)| AttributionError::Coalition { mask, message: e.0 })
}

/// Shapley weights clipped into [0, 1]. Negative marginal contributions
/// become 0, so clipped weights no longer satisfy efficiency.
pub fn attribute_shapley<C: CoalitionScorer + ?Sized>(
    req: &AttributionRequest,
    scorer: &C,
) -> Result<AttributionResult, AttributionError> {
    let raw = shapley_raw(req, scorer)?;
    Ok(AttributionResult {
        weights: raw.into_iter().map(clip_unit).collect(),
        strategy: Strategy::Shapley,
    })
}

#[derive(Debug, Clone)]
pub struct Shapley<C> {
    pub scorer: C,
}

impl<C: CoalitionScorer> Shapley<C> {
    pub fn new(scorer: C) -> Self {
        Self { scorer }
    }
}

impl<C: CoalitionScorer> Attributor for Shapley<C> {
    fn strategy(&self) -> Strategy {
        Strategy::Shapley
    }
    fn attribute(&self, req: &AttributionRequest) -> Result<AttributionResult, AttributionError> {
        attribute_shapley(req, &self.scorer)
    }
}

/// `v(S)` = share of the output's fragment-supported tokens covered by the
/// fragments in `S`. `v(all) = 1` whenever any token is supported.
#[derive(Debug, Clone, Copy, Default)]
pub struct OverlapCoalition;

impl CoalitionScorer for OverlapCoalition {
    fn payoff(&self, req: &AttributionRequest, members: &[usize]) -> Result<f64, ScorerError> {
        let output: BTreeSet<String> = text::tokens(&req.output_text).into_iter().collect();
        let token_sets: Vec<BTreeSet<String>> = req
            .fragments
            .iter()
            .map(|(_, t)| text::tokens(t).into_iter().collect())
            .collect();
        let supported = output
            .iter()
            .filter(|tok| token_sets.iter().any(|s| s.contains(*tok)))
            .count();
        if supported == 0 {
            return Ok(0.0);
        }
        let covered = output
            .iter()
            .filter(|tok| members.iter().any(|&m| token_sets[m].contains(*tok)))
            .count();
        Ok(covered as f64 / supported as f64)
    }
}

// ---------------------------------------------------------------------------
// Judge

/// Scores each fragment's contribution to the output independently.
pub trait Judge {
    fn judge(&self, req: &AttributionRequest) -> Result<Vec<f64>, ScorerError>;
}

impl<J: Judge + ?Sized> Judge for &J {
    fn judge(&self, req: &AttributionRequest) -> Result<Vec<f64>, ScorerError> {
        (**self).judge(req)
    }
}

#[derive(Debug, Clone)]
pub struct JudgeAttributor<J> {
    pub judge: J,
}

impl<J: Judge> JudgeAttributor<J> {
    pub fn new(judge: J) -> Self {
        Self { judge }
    }
}

impl<J: Judge> Attributor for JudgeAttributor<J> {
    fn strategy(&self) -> Strategy {
        Strategy::ExternalJudge
    }
    fn attribute(&self, req: &AttributionRequest) -> Result<AttributionResult, AttributionError> {
        req.validate()?;
        let scores = self
            .judge
            .judge(req)
            .map_err(|e| AttributionError::Judge(e.0))?;
        if scores.len() != req.len() {
            return Err(AttributionError::WeightCount {
                expected: req.len(),
                got: scores.len(),
            });
        }
        if scores.iter().any(|s| s.is_nan()) {
            return Err(AttributionError::Judge(String::from("judge returned NaN")));
        }
        Ok(AttributionResult {
            weights: scores.into_iter().map(clip_unit).collect(),
            strategy: Strategy::ExternalJudge,
        })
    }
}

/// Deterministic judge: the fraction of a fragment's tokens that appear in
/// the output. A fragment judged against its own text scores 1.
#[derive(Debug, Clone, Copy, Default)]
pub struct OverlapJudge;

impl Judge for OverlapJudge {
    fn judge(&self, req: &AttributionRequest) -> Result<Vec<f64>, ScorerError> {
        let output: BTreeSet<String> = text::tokens(&req.output_text).into_iter().collect();
        Ok(req
            .fragments
            .iter()
            .map(|(_, t)| {
                let toks: BTreeSet<String> = text::tokens(t).into_iter().collect();
                if toks.is_empty() {
                    0.0
                } else {
                    toks.iter().filter(|tok| output.contains(*tok)).count() as f64 / toks.len() as f64
                }
            })
            .collect())
    }
}

/// Parses the first bracketed, comma-separated numeric list in a judge reply,
/// e.g. `"scores: [0.8, 0.1, 0.5]"`.
pub fn parse_score_list(reply: &str) -> Option<Vec<f64>> {
    let start = reply.find('[')?;
    let end = start + reply[start..].find(']')?;
    let body = reply[start + 1..end].trim();
    if body.is_empty() {
        return Some(Vec::new());
    }
    body.split(',')
        .map(|item| item.trim().parse::<f64>().ok().filter(|v| v.is_finite()))
        .collect()
}

// ---------------------------------------------------------------------------
// Expected weighted attribution

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionRecord {
    pub attribution: AttributionResult,
    pub feedback_r: f64,
    pub fragment_ids: Vec<FragmentId>,
}

/// Mean of `weight * r` over every record that mentions `fragment`.
pub fn estimate_value(records: &[SessionRecord], fragment: FragmentId) -> Result<f64, AttributionError> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for rec in records {
        if rec.attribution.weights.len() != rec.fragment_ids.len() {
            return Err(AttributionError::WeightCount {
                expected: rec.fragment_ids.len(),
                got: rec.attribution.weights.len(),
            });
        }
        if let Some(pos) = rec.fragment_ids.iter().position(|&id| id == fragment) {
            sum += rec.attribution.weights[pos] * rec.feedback_r;
            count += 1;
        }
    }
    if count == 0 {
        return Err(AttributionError::FragmentNotInRecords(fragment));
    }
    Ok(sum / count as f64)
}
