//! Line-delimited pool snapshots.
//!
//! The first line is a header carrying the pool configuration and counters;
//! every following line is one fragment in ascending id order. Reals are
//! written with 17 significant digits so a round trip is bit-exact.

use std::fs;
use std::io::{self, BufRead, Write};
use std::path::Path;

use coem_core::pool::{Fragment, KnowledgePool, PoolConfig, PoolError};
use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;
use thiserror::Error;

pub const SNAPSHOT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum SnapshotError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("snapshot has no header line")]
    MissingHeader,
    #[error("unsupported snapshot version {0}")]
    Version(u32),
    #[error(transparent)]
    Pool(#[from] PoolError),
}

/// A real written as a JSON number with 17 significant digits.
pub fn exact_number(x: f64) -> Box<RawValue> {
    RawValue::from_string(format!("{x:.16e}")).expect("finite float formats as a JSON number")
}

#[derive(Serialize)]
struct ConfigOut {
    alpha: Box<RawValue>,
    theta: Box<RawValue>,
    min_sessions_before_prune: u64,
    subset_size: usize,
}

#[derive(Serialize)]
#[serde(tag = "record", rename = "header")]
struct HeaderOut {
    version: u32,
    config: ConfigOut,
    iteration: u64,
    next_id: u64,
    fragments: usize,
}

#[derive(Serialize)]
#[serde(tag = "record", rename = "fragment")]
struct FragmentOut<'a> {
    id: u64,
    text: &'a str,
    source: &'a str,
    value: Box<RawValue>,
    session_count: u64,
    feedback_count: u64,
    created_iteration: u64,
    alive: bool,
}

#[derive(Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum RecordIn {
    Header {
        version: u32,
        config: PoolConfig,
        iteration: u64,
        next_id: u64,
    },
    Fragment(Fragment),
}

pub fn write_snapshot<W: Write>(pool: &KnowledgePool, mut out: W) -> io::Result<()> {
    let cfg = pool.config();
    let header = HeaderOut {
        version: SNAPSHOT_VERSION,
        config: ConfigOut {
            alpha: exact_number(cfg.alpha),
            theta: exact_number(cfg.theta),
            min_sessions_before_prune: cfg.min_sessions_before_prune,
            subset_size: cfg.subset_size,
        },
        iteration: pool.iteration(),
        next_id: pool.next_id().0,
        fragments: pool.total_count(),
    };
    serde_json::to_writer(&mut out, &header)?;
    out.write_all(b"\n")?;
    for f in pool.fragments() {
        let rec = FragmentOut {
            id: f.id.0,
            text: &f.text,
            source: &f.source,
            value: exact_number(f.value),
            session_count: f.session_count,
            feedback_count: f.feedback_count,
            created_iteration: f.created_iteration,
            alive: f.alive,
        };
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn snapshot_bytes(pool: &KnowledgePool) -> Vec<u8> {
    let mut buf = Vec::new();
    write_snapshot(pool, &mut buf).expect("writing to memory cannot fail");
    buf
}

pub fn read_snapshot<R: BufRead>(input: R) -> Result<KnowledgePool, SnapshotError> {
    let mut header: Option<(PoolConfig, u64, u64)> = None;
    let mut fragments = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        let number = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: RecordIn = serde_json::from_str(&line).map_err(|e| SnapshotError::Parse {
            line: number,
            message: e.to_string(),
        })?;
        match rec {
            RecordIn::Header {
                version,
                config,
                iteration,
                next_id,
            } => {
                if version != SNAPSHOT_VERSION {
                    return Err(SnapshotError::Version(version));
                }
                if header.is_some() {
                    return Err(SnapshotError::Parse {
                        line: number,
                        message: "second header record".into(),
                    });
                }
                header = Some((config, iteration, next_id));
            }
            RecordIn::Fragment(f) => {
                if header.is_none() {
                    return Err(SnapshotError::MissingHeader);
                }
                if fragments.last().is_some_and(|prev: &Fragment| prev.id >= f.id) {
                    return Err(SnapshotError::Parse {
                        line: number,
                        message: format!("fragment {} is out of id order", f.id),
                    });
                }
                fragments.push(f);
            }
        }
    }
    let (config, iteration, next_id) = header.ok_or(SnapshotError::MissingHeader)?;
    Ok(KnowledgePool::from_parts(config, iteration, next_id, fragments)?)
}

pub fn save(pool: &KnowledgePool, path: &Path) -> io::Result<()> {
    let mut file = io::BufWriter::new(fs::File::create(path)?);
    write_snapshot(pool, &mut file)?;
    file.flush()
}

pub fn load(path: &Path) -> Result<KnowledgePool, SnapshotError> {
    read_snapshot(io::BufReader::new(fs::File::open(path)?))
}
