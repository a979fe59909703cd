//! Seeded synthetic-domain experiments.
//!
//! Every fragment gets a latent true value. Simulated users rate generated
//! digests with a Bernoulli draw on the mean true value of the fragments
//! behind them, and the engine runs its normal select/generate/rate/update/
//! prune loop. The report compares what the pool retained with the latent truth.

use alloc::boxed::Box;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attribution::{
    Attributor, JudgeAttributor, LeaveOneOut, OverlapCoalition, OverlapJudge, RegenerateScorer, Shapley, Strategy,
    Uniform,
};
use crate::backend::MockGenerator;
use crate::engine::{Engine, EngineError};
use crate::event::NullJournal;
use crate::extraction::NullExtractor;
use crate::feedback::Rating;
use crate::pool::{KnowledgePool, PoolConfig};
use crate::session::{SelectorQuery, SessionRequest};

pub const HISTOGRAM_BINS: usize = 20;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("report has no fragment values")]
    EmptyReport,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RaterModel {
    /// Probability of flipping the drawn rating; below 0.5.
    pub noise: f64,
    /// Added to the mean true value before the like draw.
    pub like_bias: f64,
}

impl Default for RaterModel {
    fn default() -> Self {
        Self {
            noise: 0.0,
            like_bias: 0.0,
        }
    }
}

/// Two-component mixture for latent true values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Mixture {
    pub high_fraction: f64,
    pub high_range: (f64, f64),
    pub low_range: (f64, f64),
}

impl Default for Mixture {
    fn default() -> Self {
        Self {
            high_fraction: 0.75,
            high_range: (0.75, 1.0),
            low_range: (0.0, 0.25),
        }
    }
}

impl Mixture {
    /// True values exactly 1 (high) or 0 (low).
    pub fn separable(high_fraction: f64) -> Self {
        Self {
            high_fraction,
            high_range: (1.0, 1.0),
            low_range: (0.0, 0.0),
        }
    }

    fn validate(&self) -> Result<(), SimError> {
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        let range_ok = |(lo, hi): (f64, f64)| unit(lo) && unit(hi) && lo <= hi;
        if !unit(self.high_fraction) || !range_ok(self.high_range) || !range_ok(self.low_range) {
            return Err(SimError::InvalidConfig(String::from(
                "mixture fractions and ranges must lie in [0, 1] with low <= high",
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDomain {
    /// Indexed by fragment id.
    pub true_values: Vec<f64>,
    pub high_threshold: f64,
}

impl SyntheticDomain {
    pub fn generate<R: Rng>(mixture: &Mixture, n: usize, high_threshold: f64, rng: &mut R) -> Self {
        let true_values = (0..n)
            .map(|_| {
                let high = rng.random::<f64>() < mixture.high_fraction;
                let (lo, hi) = if high { mixture.high_range } else { mixture.low_range };
                lo + (hi - lo) * rng.random::<f64>()
            })
            .collect();
        Self {
            true_values,
            high_threshold,
        }
    }

    pub fn is_high(&self, index: usize) -> bool {
        self.true_values[index] >= self.high_threshold
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationConfig {
    pub seed: u64,
    pub n_fragments: usize,
    pub n_sessions: usize,
    pub pool: PoolConfig,
    pub rater: RaterModel,
    pub attributor: Strategy,
    pub mixture: Mixture,
    /// Latent values at or above this are truly high-value.
    pub high_threshold: f64,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            n_fragments: 200,
            n_sessions: 2000,
            pool: PoolConfig::default(),
            rater: RaterModel::default(),
            attributor: Strategy::ExternalJudge,
            mixture: Mixture::default(),
            high_threshold: 0.5,
        }
    }
}

impl SimulationConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        self.pool
            .validate()
            .map_err(|e| SimError::InvalidConfig(format!("{e}")))?;
        if self.n_fragments == 0 {
            return Err(SimError::InvalidConfig(String::from("n_fragments must be positive")));
        }
        if !(0.0..0.5).contains(&self.rater.noise) {
            return Err(SimError::InvalidConfig(String::from("rater noise must lie in [0, 0.5)")));
        }
        if !self.rater.like_bias.is_finite() || !self.high_threshold.is_finite() {
            return Err(SimError::InvalidConfig(String::from("like_bias and high_threshold must be finite")));
        }
        self.mixture.validate()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub true_positive: u64,
    pub false_positive: u64,
    pub false_negative: u64,
    pub true_negative: u64,
}

impl Confusion {
    /// Retained fragments that are truly high. 1 when nothing is retained.
    pub fn precision(&self) -> f64 {
        ratio(self.true_positive, self.true_positive + self.false_positive)
    }

    /// Truly high fragments that were retained. 1 when none are truly high.
    pub fn recall(&self) -> f64 {
        ratio(self.true_positive, self.true_positive + self.false_negative)
    }

}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

/// Fixed 20-bin histogram over [-1, 1]; bins are closed on the right, the
/// first bin also takes -1.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Histogram {
    pub counts: Vec<u64>,
}

impl Default for Histogram {
    fn default() -> Self {
        Self {
            counts: vec![0; HISTOGRAM_BINS],
        }
    }
}

impl Histogram {
    pub fn bin_of(value: f64) -> usize {
        let upper = libm::ceil((value + 1.0) * (HISTOGRAM_BINS as f64 / 2.0));
        (upper as i64 - 1).clamp(0, HISTOGRAM_BINS as i64 - 1) as usize
    }

    pub fn from_values(values: impl IntoIterator<Item = f64>) -> Self {
        let mut h = Self::default();
        for v in values {
            h.counts[Self::bin_of(v)] += 1;
        }
        h
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// `(bin_low, bin_high, count)` rows.
    pub fn rows(&self) -> impl Iterator<Item = (f64, f64, u64)> + '_ {
        let half = HISTOGRAM_BINS as f64 / 2.0;
        self.counts
            .iter()
            .enumerate()
            .map(move |(i, &c)| ((i as f64 - half) / half, (i as f64 + 1.0 - half) / half, c))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlphaResult {
    pub alpha: f64,
    pub retained_fraction: f64,
    pub precision_vs_oracle: f64,
    pub recall_vs_oracle: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationReport {
    pub seed: u64,
    pub alpha: f64,
    pub theta: f64,
    pub n_fragments: usize,
    pub n_sessions: usize,
    pub retained_fraction: f64,
    pub precision_vs_oracle: f64,
    pub recall_vs_oracle: f64,
    /// Share of alive fragments that are truly high-value.
    pub agreement: f64,
    pub likes: u64,
    pub dislikes: u64,
    pub confusion: Confusion,
    /// Final value of every fragment, pruned ones included.
    pub value_histogram: Histogram,
    pub per_alpha_results: Option<Vec<AlphaResult>>,
}

impl SimulationReport {
    pub fn like_fraction(&self) -> f64 {
        ratio(self.likes, self.likes + self.dislikes)
    }
}

/// Like with probability `clip(mean + like_bias, 0, 1)`, then flipped with
/// probability `noise`. Always consumes two draws.
pub fn simulate_rating<R: Rng>(selected_true_values: &[f64], rater: &RaterModel, rng: &mut R) -> Rating {
    let mean = if selected_true_values.is_empty() {
        0.0
    } else {
        selected_true_values.iter().sum::<f64>() / selected_true_values.len() as f64
    };
    let p_like = (mean + rater.like_bias).clamp(0.0, 1.0);
    let like = rng.random::<f64>() < p_like;
    let flip = rng.random::<f64>() < rater.noise;
    if like != flip {
        Rating::LIKE
    } else {
        Rating::DISLIKE
    }
}

/// Attributor used by simulations for a given strategy. Mock-backed throughout.
pub fn simulation_attributor(strategy: Strategy, seed: u64) -> Box<dyn Attributor> {
    match strategy {
        Strategy::Uniform => Box::new(Uniform),
        Strategy::LeaveOneOut => Box::new(LeaveOneOut::new(RegenerateScorer::new(MockGenerator::new(seed)))),
        Strategy::Shapley => Box::new(Shapley::new(OverlapCoalition)),
        Strategy::ExternalJudge => Box::new(JudgeAttributor::new(OverlapJudge)),
    }
}

const SUBJECTS: [&str; 8] = ["yields", "equities", "bitcoin", "crude", "gold", "credit", "payrolls", "the dollar"];
const MOVES: [&str; 6] = ["rally", "slide", "stall", "rebound", "diverge", "tighten"];
const DRIVERS: [&str; 6] = [
    "after the rate decision",
    "on earnings revisions",
    "amid supply worries",
    "as volumes thin",
    "on policy signals",
    "after the halving",
];

fn fragment_tag(index: usize) -> String {
    format!("item-{index:04}")
}

fn synthetic_text<R: Rng>(index: usize, rng: &mut R) -> String {
    let s = SUBJECTS[rng.random_range(0..SUBJECTS.len())];
    let m = MOVES[rng.random_range(0..MOVES.len())];
    let d = DRIVERS[rng.random_range(0..DRIVERS.len())];
    format!("{} notes {s} {m} {d}", fragment_tag(index))
}

/// Outcome of one run: the report plus the final pool and latent truth.
#[derive(Debug, Clone)]
pub struct SimulationRun {
    pub report: SimulationReport,
    pub pool: KnowledgePool,
    pub domain: SyntheticDomain,
}

pub fn run_simulation(cfg: &SimulationConfig) -> Result<SimulationReport, SimError> {
    run_simulation_detailed(cfg).map(|run| run.report)
}

/// Runs the experiment and keeps the final pool for inspection.
///
/// Each session the simulated user asks about `k` random alive fragments,
/// naming their tags in the topic hint, so the engine's own selector
/// picks exactly those fragments.
pub fn run_simulation_detailed(cfg: &SimulationConfig) -> Result<SimulationRun, SimError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let domain = SyntheticDomain::generate(&cfg.mixture, cfg.n_fragments, cfg.high_threshold, &mut rng);

    let mut engine = Engine::new(cfg.pool, NullJournal)?;
    for i in 0..cfg.n_fragments {
        let id = engine.add_fragment(&synthetic_text(i, &mut rng), "synthetic")?;
        debug_assert_eq!(id.0 as usize, i);
    }

    let generator = MockGenerator::new(cfg.seed);
    let attributor = simulation_attributor(cfg.attributor, cfg.seed);
    let k = cfg.pool.subset_size;
    let (mut likes, mut dislikes) = (0u64, 0u64);
    let mut alive: Vec<usize> = Vec::with_capacity(cfg.n_fragments);

    for _ in 0..cfg.n_sessions {
        alive.clear();
        alive.extend(engine.pool().alive().map(|f| f.id.0 as usize));
        if alive.is_empty() {
            break;
        }
        let take = k.min(alive.len());
        for i in 0..take {
            let j = rng.random_range(i..alive.len());
            alive.swap(i, j);
        }
        let hint = alive[..take]
            .iter()
            .map(|&i| fragment_tag(i))
            .collect::<Vec<_>>()
            .join(" ");

        let session = engine.run_session(&generator, &SessionRequest::new(SelectorQuery::with_hint(hint, k)))?;
        let truths: Vec<f64> = session
            .selected
            .iter()
            .map(|id| domain.true_values[id.0 as usize])
            .collect();
        let rating = simulate_rating(&truths, &cfg.rater, &mut rng);
        if rating.is_like() {
            likes += 1;
        } else {
            dislikes += 1;
        }
        engine.submit_feedback(session.id, rating, &*attributor, &NullExtractor)?;
    }

    let pool = engine.pool().clone();
    let theta = cfg.pool.theta;
    let mut confusion = Confusion::default();
    let (mut alive_count, mut alive_high) = (0u64, 0u64);
    for f in pool.fragments() {
        if f.alive {
            alive_count += 1;
            alive_high += u64::from(domain.is_high(f.id.0 as usize));
        }
        let retained = f.alive && f.value >= theta;
        match (retained, domain.is_high(f.id.0 as usize)) {
            (true, true) => confusion.true_positive += 1,
            (true, false) => confusion.false_positive += 1,
            (false, true) => confusion.false_negative += 1,
            (false, false) => confusion.true_negative += 1,
        }
    }
    let report = SimulationReport {
        seed: cfg.seed,
        alpha: cfg.pool.alpha,
        theta,
        n_fragments: cfg.n_fragments,
        n_sessions: cfg.n_sessions,
        retained_fraction: pool.high_value_fraction(theta).map_err(EngineError::from)?,
        precision_vs_oracle: confusion.precision(),
        recall_vs_oracle: confusion.recall(),
        agreement: ratio(alive_high, alive_count),
        likes,
        dislikes,
        confusion,
        value_histogram: Histogram::from_values(pool.fragments().map(|f| f.value)),
        per_alpha_results: None,
    };
    Ok(SimulationRun { report, pool, domain })
}

/// Runs the same seeded experiment once per learning rate. The top-level
/// fields describe the first rate.
pub fn sweep_alpha(cfg: &SimulationConfig, alphas: &[f64]) -> Result<SimulationReport, SimError> {
    if alphas.is_empty() {
        return Err(SimError::InvalidConfig(String::from("no learning rates given")));
    }
    if alphas.iter().any(|a| !(*a > 0.0 && *a < 1.0)) {
        return Err(SimError::InvalidConfig(String::from("every learning rate must lie in (0, 1)")));
    }
    if alphas.windows(2).any(|w| w[0] >= w[1]) {
        return Err(SimError::InvalidConfig(String::from("learning rates must be strictly ascending")));
    }
    let mut first: Option<SimulationReport> = None;
    let mut results = Vec::with_capacity(alphas.len());
    for &alpha in alphas {
        let mut run_cfg = cfg.clone();
        run_cfg.pool.alpha = alpha;
        let report = run_simulation(&run_cfg)?;
        results.push(AlphaResult {
            alpha,
            retained_fraction: report.retained_fraction,
            precision_vs_oracle: report.precision_vs_oracle,
            recall_vs_oracle: report.recall_vs_oracle,
        });
        first.get_or_insert(report);
    }
    let mut report = first.expect("alphas is non-empty");
    report.per_alpha_results = Some(results);
    Ok(report)
}
