//! Simulation report files: JSON report, histogram CSV, console summaries.

use std::fmt::Write as _;
use std::fs;
use std::io::{self, Write};
use std::path::Path;

use coem_core::simulator::{SimError, SimulationReport};

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Sim(#[from] SimError),
}

pub fn report_json(report: &SimulationReport) -> String {
    let mut s = serde_json::to_string_pretty(report).expect("reports always serialize");
    s.push('\n');
    s
}

pub fn write_report(report: &SimulationReport, path: &Path) -> io::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, report_json(report))
}

/// CSV with header `bin_low,bin_high,count`, one row per bin.
pub fn export_histogram<W: Write>(report: &SimulationReport, mut out: W) -> Result<(), ReportError> {
    if report.value_histogram.total() == 0 {
        return Err(SimError::EmptyReport.into());
    }
    writeln!(out, "bin_low,bin_high,count")?;
    for (lo, hi, count) in report.value_histogram.rows() {
        writeln!(out, "{lo},{hi},{count}")?;
    }
    Ok(())
}

pub fn export_histogram_file(report: &SimulationReport, path: &Path) -> Result<(), ReportError> {
    let mut buf = Vec::new();
    export_histogram(report, &mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

/// `key=value` lines printed by `simulate`.
pub fn summary_lines(report: &SimulationReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "retained_fraction={}", report.retained_fraction);
    let _ = writeln!(s, "precision={}", report.precision_vs_oracle);
    let _ = writeln!(s, "recall={}", report.recall_vs_oracle);
    let _ = writeln!(s, "agreement={}", report.agreement);
    let _ = writeln!(s, "likes={} dislikes={}", report.likes, report.dislikes);
    s
}

/// Fixed-width per-alpha table printed by `sweep`.
pub fn sweep_table(report: &SimulationReport) -> String {
    let mut s = format!("{:>8} {:>18} {:>10} {:>10}\n", "alpha", "retained_fraction", "precision", "recall");
    for r in report.per_alpha_results.iter().flatten() {
        let _ = writeln!(
            s,
            "{:>8} {:>18.6} {:>10.6} {:>10.6}",
            r.alpha, r.retained_fraction, r.precision_vs_oracle, r.recall_vs_oracle
        );
    }
    s
}
