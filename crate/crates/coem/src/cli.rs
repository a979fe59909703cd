//! Command-line entry point.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 invalid input.
//! Precedence: built-in defaults, then the `--config` file, then flags.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use coem_core::simulator::{run_simulation, sweep_alpha, Histogram, SimError};
use coem_core::{EngineState, KnowledgePool, PoolConfig, Strategy};

use crate::config::{validate_alphas, Config, ConfigError};
use crate::journal::{self, LogError};
use crate::report;
use crate::service::{self, Service, EVENT_LOG_FILE, POOL_CONFIG_FILE};
use crate::snapshot;

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_VALIDATION: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "coem", version, about = "Feedback-driven knowledge pool: simulate, sweep, serve, inspect, replay")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one seeded synthetic-domain simulation.
    Simulate(SimulateArgs),
    /// Run the same simulation for several learning rates.
    Sweep(SweepArgs),
    /// Serve the HTTP API.
    Serve(ServeArgs),
    /// Inspect or export a pool.
    Pool(PoolArgs),
    /// Rebuild a pool snapshot from an event log.
    Replay(ReplayArgs),
}

#[derive(Debug, Args)]
pub struct SimFlags {
    /// TOML config file; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub theta: Option<f64>,
    #[arg(long)]
    pub sessions: Option<usize>,
    #[arg(long)]
    pub fragments: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub attributor: Option<StrategyArg>,
    /// Probability that a simulated rating is flipped.
    #[arg(long)]
    pub noise: Option<f64>,
    /// Write the report (JSON) here.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Write the final value histogram (CSV) here.
    #[arg(long)]
    pub histogram_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub common: SimFlags,
    #[arg(long)]
    pub alpha: Option<f64>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: SimFlags,
    /// Comma-separated, strictly ascending learning rates.
    #[arg(long, value_delimiter = ',')]
    pub alphas: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum StrategyArg {
    Uniform,
    LeaveOneOut,
    Shapley,
    Judge,
}

impl From<StrategyArg> for Strategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::Uniform => Strategy::Uniform,
            StrategyArg::LeaveOneOut => Strategy::LeaveOneOut,
            StrategyArg::Shapley => Strategy::Shapley,
            StrategyArg::Judge => Strategy::ExternalJudge,
        }
    }
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub host: Option<String>,
    #[arg(long)]
    pub port: Option<u16>,
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PoolArgs {
    #[command(subcommand)]
    pub command: PoolCommand,
}

#[derive(Debug, Args)]
pub struct PoolSource {
    /// Snapshot file to read.
    #[arg(long, conflicts_with = "data_dir")]
    pub snapshot: Option<PathBuf>,
    /// Service data directory; its log is replayed.
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum PoolCommand {
    /// Print counts, retained fraction and the value histogram.
    Stats {
        #[command(flatten)]
        source: PoolSource,
    },
    /// List fragments ordered by id.
    List {
        #[command(flatten)]
        source: PoolSource,
        #[arg(long, default_value_t = 0)]
        offset: usize,
        #[arg(long, default_value_t = 100)]
        limit: usize,
        #[arg(long)]
        include_pruned: bool,
    },
    /// Write the pool as a snapshot file.
    Export {
        #[command(flatten)]
        source: PoolSource,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    #[arg(long)]
    pub log: PathBuf,
    #[arg(long)]
    pub snapshot_out: PathBuf,
    /// Pool settings; defaults to `pool.json` next to the log, then built-ins.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => EXIT_VALIDATION,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Io { .. } => CliError::Runtime(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::InvalidConfig(_) => CliError::Validation(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_VALIDATION } else { EXIT_OK };
        }
    };
    match execute(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let (CliError::Validation(m) | CliError::Runtime(m)) = &e;
            eprintln!("error: {m}");
            e.exit_code()
        }
    }
}

pub fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Simulate(args) => simulate(args),
        Command::Sweep(args) => sweep(args),
        Command::Serve(args) => serve(args),
        Command::Pool(args) => pool(args),
        Command::Replay(args) => replay(args),
    }
}

fn apply_sim_flags(cfg: &mut Config, f: &SimFlags) {
    if let Some(v) = f.theta {
        cfg.pool.theta = v;
    }
    if let Some(v) = f.sessions {
        cfg.simulation.sessions = v;
    }
    if let Some(v) = f.fragments {
        cfg.simulation.fragments = v;
    }
    if let Some(v) = f.seed {
        cfg.simulation.seed = v;
    }
    if let Some(v) = f.attributor {
        cfg.simulation.attributor = v.into();
    }
    if let Some(v) = f.noise {
        cfg.simulation.rater.noise = v;
    }
}

fn echo_config(cfg: &Config) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "# effective config");
    for line in cfg.to_toml().lines() {
        let _ = writeln!(out, "#   {line}");
    }
}

fn write_outputs(report: &coem_core::simulator::SimulationReport, f: &SimFlags) -> Result<(), CliError> {
    if let Some(path) = &f.out {
        report::write_report(report, path).map_err(runtime)?;
        println!("report={}", path.display());
    }
    if let Some(path) = &f.histogram_out {
        report::export_histogram_file(report, path).map_err(runtime)?;
        println!("histogram={}", path.display());
    }
    Ok(())
}

fn simulate(args: SimulateArgs) -> Result<(), CliError> {
    let mut cfg = Config::load_or_default(args.common.config.as_deref())?;
    apply_sim_flags(&mut cfg, &args.common);
    if let Some(a) = args.alpha {
        cfg.pool.alpha = a;
    }
    cfg.validate()?;
    echo_config(&cfg);
    let report = run_simulation(&cfg.simulation_config())?;
    print!("{}", report::summary_lines(&report));
    write_outputs(&report, &args.common)
}

fn sweep(args: SweepArgs) -> Result<(), CliError> {
    let mut cfg = Config::load_or_default(args.common.config.as_deref())?;
    apply_sim_flags(&mut cfg, &args.common);
    if let Some(alphas) = &args.alphas {
        validate_alphas(alphas).map_err(CliError::Validation)?;
        cfg.sweep.alphas = alphas.clone();
    }
    cfg.validate()?;
    echo_config(&cfg);
    let report = sweep_alpha(&cfg.simulation_config(), &cfg.sweep.alphas)?;
    print!("{}", report::sweep_table(&report));
    write_outputs(&report, &args.common)
}

fn serve(args: ServeArgs) -> Result<(), CliError> {
    let mut cfg = Config::load_or_default(args.config.as_deref())?;
    if let Some(h) = args.host {
        cfg.service.host = h;
    }
    if let Some(p) = args.port {
        cfg.service.port = p;
    }
    if let Some(d) = args.data_dir {
        cfg.service.data_dir = d;
    }
    cfg.validate()?;
    let addr: SocketAddr = format!("{}:{}", cfg.service.host, cfg.service.port)
        .parse()
        .map_err(|e| CliError::Validation(format!("service address: {e}")))?;
    echo_config(&cfg);
    let svc = Arc::new(Service::from_config(&cfg).map_err(runtime)?);
    let rt = tokio::runtime::Runtime::new().map_err(runtime)?;
    rt.block_on(service::serve(svc, addr)).map_err(runtime)
}

/// Pool config for a log: explicit file, else `pool.json` beside the log, else defaults.
fn pool_config_for(log: &Path, config: Option<&Path>) -> Result<PoolConfig, CliError> {
    if let Some(path) = config {
        let cfg = Config::load(path)?;
        cfg.validate()?;
        return Ok(cfg.pool_config());
    }
    let beside = log.parent().unwrap_or(Path::new(".")).join(POOL_CONFIG_FILE);
    if beside.exists() {
        return service::read_pool_config(&beside).map_err(|e| CliError::Validation(e.to_string()));
    }
    Ok(PoolConfig::default())
}

/// Strict replay of a log file.
pub fn replay_log(log: &Path, config: PoolConfig) -> Result<KnowledgePool, CliError> {
    let events = journal::read_strict(log).map_err(|e| match e {
        LogError::Corrupt { line, message } => {
            CliError::Runtime(format!("{}: corrupt log at line {line}: {message}", log.display()))
        }
        LogError::Io(err) => CliError::Runtime(format!("{}: {err}", log.display())),
    })?;
    let replayed = EngineState::replay(config, &events).map_err(runtime)?;
    if replayed.dropped > 0 {
        eprintln!(
            "warning: ignored {} trailing events of an unfinished batch",
            replayed.dropped
        );
    }
    Ok(replayed.state.pool)
}

fn replay(args: ReplayArgs) -> Result<(), CliError> {
    let config = pool_config_for(&args.log, args.config.as_deref())?;
    let pool = replay_log(&args.log, config)?;
    snapshot::save(&pool, &args.snapshot_out).map_err(runtime)?;
    println!(
        "replayed fragments={} alive={} iteration={} snapshot={}",
        pool.total_count(),
        pool.alive_count(),
        pool.iteration(),
        args.snapshot_out.display()
    );
    Ok(())
}

fn load_pool(source: &PoolSource) -> Result<KnowledgePool, CliError> {
    match (&source.snapshot, &source.data_dir) {
        (Some(path), _) => snapshot::load(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display()))),
        (None, Some(dir)) => {
            let log = dir.join(EVENT_LOG_FILE);
            let config = pool_config_for(&log, None)?;
            replay_log(&log, config)
        }
        (None, None) => Err(CliError::Validation("give --snapshot or --data-dir".into())),
    }
}

fn pool(args: PoolArgs) -> Result<(), CliError> {
    match args.command {
        PoolCommand::Stats { source } => {
            let pool = load_pool(&source)?;
            let theta = pool.config().theta;
            println!("total={}", pool.total_count());
            println!("alive={}", pool.alive_count());
            println!("iteration={}", pool.iteration());
            match pool.high_value_fraction(theta) {
                Ok(f) => println!("retained_fraction={f}"),
                Err(_) => println!("retained_fraction=none"),
            }
            println!("bin_low,bin_high,count");
            for (lo, hi, c) in Histogram::from_values(pool.alive().map(|f| f.value)).rows() {
                println!("{lo},{hi},{c}");
            }
            Ok(())
        }
        PoolCommand::List {
            source,
            offset,
            limit,
            include_pruned,
        } => {
            let pool = load_pool(&source)?;
            println!("id\tvalue\tsessions\talive\ttext");
            for f in pool
                .fragments()
                .filter(|f| include_pruned || f.alive)
                .skip(offset)
                .take(limit)
            {
                println!("{}\t{:.6}\t{}\t{}\t{}", f.id, f.value, f.session_count, f.alive, f.text);
            }
            Ok(())
        }
        PoolCommand::Export { source, out } => {
            let pool = load_pool(&source)?;
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).map_err(runtime)?;
            }
            snapshot::save(&pool, &out).map_err(runtime)?;
            println!("snapshot={}", out.display());
            Ok(())
        }
    }
}
