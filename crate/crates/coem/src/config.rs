//! Configuration file (TOML), documented in `docs/config.md`.
//!
//! Every key is optional except `version`. Secrets never live in the file:
//! the file only names the environment variables that hold them.

use std::fs;
use std::path::{Path, PathBuf};

use coem_core::simulator::{Mixture, RaterModel, SimulationConfig};
use coem_core::{PoolConfig, Strategy};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::remote::BackendConfig;

pub const CONFIG_VERSION: u32 = 1;
pub const DEFAULT_PAGE_SIZE: usize = 100;
pub const MAX_PAGE_SIZE: usize = 1000;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub version: u32,
    pub pool: PoolSection,
    pub simulation: SimulationSection,
    pub sweep: SweepSection,
    pub service: ServiceSection,
    pub backend: BackendConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            pool: PoolSection::default(),
            simulation: SimulationSection::default(),
            sweep: SweepSection::default(),
            service: ServiceSection::default(),
            backend: BackendConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoolSection {
    pub alpha: f64,
    pub theta: f64,
    pub min_sessions_before_prune: u64,
    pub subset_size: usize,
}

impl Default for PoolSection {
    fn default() -> Self {
        PoolConfig::default().into()
    }
}

impl From<PoolConfig> for PoolSection {
    fn from(c: PoolConfig) -> Self {
        Self {
            alpha: c.alpha,
            theta: c.theta,
            min_sessions_before_prune: c.min_sessions_before_prune,
            subset_size: c.subset_size,
        }
    }
}

impl From<PoolSection> for PoolConfig {
    fn from(s: PoolSection) -> Self {
        Self {
            alpha: s.alpha,
            theta: s.theta,
            min_sessions_before_prune: s.min_sessions_before_prune,
            subset_size: s.subset_size,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationSection {
    pub seed: u64,
    pub fragments: usize,
    pub sessions: usize,
    pub attributor: Strategy,
    pub high_threshold: f64,
    pub rater: RaterSection,
    pub mixture: MixtureSection,
}

impl Default for SimulationSection {
    fn default() -> Self {
        let d = SimulationConfig::default();
        Self {
            seed: d.seed,
            fragments: d.n_fragments,
            sessions: d.n_sessions,
            attributor: d.attributor,
            high_threshold: d.high_threshold,
            rater: RaterSection::default(),
            mixture: MixtureSection::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RaterSection {
    pub noise: f64,
    pub like_bias: f64,
}

impl Default for RaterSection {
    fn default() -> Self {
        let r = RaterModel::default();
        Self {
            noise: r.noise,
            like_bias: r.like_bias,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MixtureSection {
    pub high_fraction: f64,
    pub high_range: [f64; 2],
    pub low_range: [f64; 2],
}

impl Default for MixtureSection {
    fn default() -> Self {
        let m = Mixture::default();
        Self {
            high_fraction: m.high_fraction,
            high_range: [m.high_range.0, m.high_range.1],
            low_range: [m.low_range.0, m.low_range.1],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub alphas: Vec<f64>,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            alphas: vec![0.01, 0.03, 0.1, 0.3],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Mock,
    Remote,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractorKind {
    None,
    Rules,
    Judge,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceSection {
    pub host: String,
    pub port: u16,
    /// Holds `events.log` and `pool.json`.
    pub data_dir: PathBuf,
    pub page_size: usize,
    /// Environment variable with the static API token; unset means no auth.
    pub api_token_env: String,
    pub backend: BackendKind,
    pub mock_seed: u64,
    pub attributor: Strategy,
    pub extractor: ExtractorKind,
    /// One domain term per line; required by the `rules` extractor.
    pub lexicon: Option<PathBuf>,
    pub fsync: bool,
}

impl Default for ServiceSection {
    fn default() -> Self {
        Self {
            host: "127.0.0.1".into(),
            port: 8080,
            data_dir: PathBuf::from("coem-data"),
            page_size: DEFAULT_PAGE_SIZE,
            api_token_env: "COEM_SERVICE_TOKEN".into(),
            backend: BackendKind::Mock,
            mock_seed: 0,
            attributor: Strategy::ExternalJudge,
            extractor: ExtractorKind::Judge,
            lexicon: None,
            fsync: true,
        }
    }
}

impl Config {
    pub fn parse(source: &str, path: &Path) -> Result<Self, ConfigError> {
        let parse_err = |message: String| ConfigError::Parse {
            path: path.to_path_buf(),
            message,
        };
        let table: toml::Table = source.parse().map_err(|e: toml::de::Error| parse_err(e.to_string()))?;
        if !table.contains_key("version") {
            return Err(parse_err("missing top-level `version` key".into()));
        }
        let cfg: Config = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| parse_err(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let source = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&source, path)
    }

    pub fn load_or_default(path: Option<&Path>) -> Result<Self, ConfigError> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    pub fn pool_config(&self) -> PoolConfig {
        self.pool.into()
    }

    pub fn simulation_config(&self) -> SimulationConfig {
        let s = &self.simulation;
        SimulationConfig {
            seed: s.seed,
            n_fragments: s.fragments,
            n_sessions: s.sessions,
            pool: self.pool_config(),
            rater: RaterModel {
                noise: s.rater.noise,
                like_bias: s.rater.like_bias,
            },
            attributor: s.attributor,
            mixture: Mixture {
                high_fraction: s.mixture.high_fraction,
                high_range: (s.mixture.high_range[0], s.mixture.high_range[1]),
                low_range: (s.mixture.low_range[0], s.mixture.low_range[1]),
            },
            high_threshold: s.high_threshold,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        if self.version != CONFIG_VERSION {
            return invalid(format!("unsupported config version {}", self.version));
        }
        self.simulation_config()
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        validate_alphas(&self.sweep.alphas).map_err(ConfigError::Invalid)?;
        self.backend.validate().map_err(ConfigError::Invalid)?;
        let svc = &self.service;
        if svc.page_size == 0 || svc.page_size > MAX_PAGE_SIZE {
            return invalid(format!("service.page_size must be in 1..={MAX_PAGE_SIZE}"));
        }
        if svc.extractor == ExtractorKind::Rules && svc.lexicon.is_none() {
            return invalid("service.extractor = \"rules\" needs service.lexicon".into());
        }
        if svc.attributor == Strategy::Shapley && self.pool.subset_size > coem_core::attribution::MAX_SHAPLEY_FRAGMENTS {
            return invalid("shapley attribution needs pool.subset_size <= 12".into());
        }
        Ok(())
    }

    /// The fully resolved config as TOML.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config always serializes")
    }
}

/// Sweep rates: non-empty, strictly ascending, each in (0, 1).
pub fn validate_alphas(alphas: &[f64]) -> Result<(), String> {
    if alphas.is_empty() {
        return Err("alpha list is empty".into());
    }
    if let Some(a) = alphas.iter().find(|a| !(**a > 0.0 && **a < 1.0)) {
        return Err(format!("alpha {a} is outside (0, 1)"));
    }
    if alphas.windows(2).any(|w| w[0] >= w[1]) {
        return Err("alphas must be strictly ascending".into());
    }
    Ok(())
}
