//! CSV and plot-data output.
//!
//! Layout under the output directory:
//!
//! ```text
//! summary.csv                     one row per run
//! sessions.csv                    one row per session request
//! <run_id>/mos_by_session.dat     whitespace table for bar charts
//! ```
//!
//! Fractions are written as percentages with two decimals and rates as
//! integer kb/s, so the files are stable across platforms.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::admission::Mode;
use crate::scenario::RunReport;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("nothing to write")]
    Empty,
    #[error("i/o failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv failure on {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
}

fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

fn kbps(bits_per_sec: f64) -> u64 {
    (bits_per_sec / 1000.0).round() as u64
}

/// One line of `summary.csv`, at the precision it is written with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub run_id: String,
    pub mode: Mode,
    /// kb/s
    pub capacity: u64,
    pub admitted: u32,
    /// Percent.
    pub drop_ratio: f64,
    /// Percent.
    pub utilization: f64,
}

impl From<&RunReport> for SummaryRow {
    fn from(r: &RunReport) -> Self {
        Self {
            run_id: r.run_id.clone(),
            mode: r.mode,
            capacity: kbps(r.capacity),
            admitted: r.metrics.admitted,
            drop_ratio: round2(r.metrics.drop_ratio * 100.0),
            utilization: round2(r.metrics.utilization * 100.0),
        }
    }
}

/// One line of `sessions.csv`. Rejected sessions have no quality.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionRow {
    pub run_id: String,
    pub session_id: u32,
    pub decision: String,
    /// kb/s
    pub sla_rate: u64,
    pub mean_psnr: Option<f64>,
    pub mos: Option<u8>,
}

pub fn session_rows(r: &RunReport) -> Vec<SessionRow> {
    r.decisions
        .iter()
        .map(|d| {
            let q = r.metrics.per_session.iter().find(|s| s.session_id == d.session_id);
            SessionRow {
                run_id: r.run_id.clone(),
                session_id: d.session_id,
                decision: d.decision.as_str().to_string(),
                sla_rate: kbps(d.sla_rate),
                mean_psnr: q.map(|s| round2(s.mean_psnr)),
                mos: q.map(|s| s.mos),
            }
        })
        .collect()
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ReportError + '_ {
    move |source| ReportError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn csv_err(path: &Path) -> impl FnOnce(csv::Error) -> ReportError + '_ {
    move |source| ReportError::Csv {
        path: path.to_path_buf(),
        source,
    }
}

fn write_csv(path: &Path, header: &[&str], rows: impl Iterator<Item = Vec<String>>) -> Result<(), ReportError> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    w.write_record(header).map_err(csv_err(path))?;
    for row in rows {
        w.write_record(&row).map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Writes every report under `out_dir` and returns the files written.
pub fn emit_reports(reports: &[RunReport], out_dir: &Path) -> Result<Vec<PathBuf>, ReportError> {
    if reports.is_empty() {
        return Err(ReportError::Empty);
    }
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let mut written = Vec::new();

    let summary = out_dir.join("summary.csv");
    write_csv(
        &summary,
        &["run_id", "mode", "capacity", "admitted", "drop_ratio", "utilization"],
        reports.iter().map(SummaryRow::from).map(|r| {
            vec![
                r.run_id,
                r.mode.to_string(),
                r.capacity.to_string(),
                r.admitted.to_string(),
                format!("{:.2}", r.drop_ratio),
                format!("{:.2}", r.utilization),
            ]
        }),
    )?;
    written.push(summary);

    let sessions = out_dir.join("sessions.csv");
    write_csv(
        &sessions,
        &["run_id", "session_id", "decision", "sla_rate", "mean_psnr", "mos"],
        reports.iter().flat_map(session_rows).map(|r| {
            vec![
                r.run_id,
                r.session_id.to_string(),
                r.decision,
                r.sla_rate.to_string(),
                opt(r.mean_psnr.map(|p| format!("{p:.2}"))),
                opt(r.mos),
            ]
        }),
    )?;
    written.push(sessions);

    for r in reports {
        let dir = out_dir.join(&r.run_id);
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let path = dir.join("mos_by_session.dat");
        let mut f = fs::File::create(&path).map_err(io_err(&path))?;
        writeln!(
            f,
            "# {} admitted={} rejected={}",
            r.run_id, r.metrics.admitted, r.metrics.rejected
        )
        .map_err(io_err(&path))?;
        writeln!(f, "# session_id mos mean_psnr").map_err(io_err(&path))?;
        for s in &r.metrics.per_session {
            writeln!(f, "{} {} {:.2}", s.session_id, s.mos, s.mean_psnr).map_err(io_err(&path))?;
        }
        written.push(path);
    }
    Ok(written)
}

pub fn read_summary(path: &Path) -> Result<Vec<SummaryRow>, ReportError> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
    r.deserialize().collect::<Result<_, _>>().map_err(csv_err(path))
}

pub fn read_sessions(path: &Path) -> Result<Vec<SessionRow>, ReportError> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
    r.deserialize().collect::<Result<_, _>>().map_err(csv_err(path))
}
