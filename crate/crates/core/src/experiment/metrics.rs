//! Per-step metric CSV files.
//!
//! Schema version 1 columns, in order: `step, wall_ms, loss_0 … loss_{n−1},
//! grad_norm, step_norm, cg_iterations, cg_residual, eta, theta_norm`.
//! `step` counts completed optimizer steps; losses are taken at the
//! pre-step iterate; `wall_ms` is cumulative wall-clock time of the run.

use std::fs::{File, OpenOptions};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::optimizers::UpdateReport;

pub const METRICS_SCHEMA_VERSION: u32 = 1;
pub const METRICS_FILE: &str = "metrics.csv";
pub const WALL_CLOCK_COLUMN: &str = "wall_ms";

pub fn metrics_header(num_players: usize) -> Vec<String> {
    let mut h = vec!["step".to_string(), WALL_CLOCK_COLUMN.to_string()];
    h.extend((0..num_players).map(|i| format!("loss_{i}")));
    h.extend(
        ["grad_norm", "step_norm", "cg_iterations", "cg_residual", "eta", "theta_norm"]
            .iter()
            .map(|s| s.to_string()),
    );
    h
}

/// Shortest round-trip decimal form.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:?}")
}

pub fn metrics_row(report: &UpdateReport, wall_ms: f64) -> Vec<String> {
    let mut r = vec![(report.step + 1).to_string(), format!("{wall_ms:.3}")];
    r.extend(report.losses.iter().map(|x| fmt_f64(*x)));
    r.extend([
        fmt_f64(report.grad_norm),
        fmt_f64(report.step_norm),
        report.cg_iterations().to_string(),
        fmt_f64(report.cg_residual()),
        fmt_f64(report.eta),
        fmt_f64(report.theta_norm),
    ]);
    r
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Csv(format!("{}: {e}", path.display()))
}

/// A CSV file read into memory.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvTable {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl CsvTable {
    pub fn read(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut rdr = csv::Reader::from_reader(file);
        let header = rdr.headers().map_err(|e| csv_err(path, e))?.iter().map(String::from).collect();
        let rows = rdr
            .records()
            .map(|r| r.map(|rec| rec.iter().map(String::from).collect()).map_err(|e| csv_err(path, e)))
            .collect::<Result<Vec<Vec<String>>>>()?;
        Ok(Self { header, rows })
    }

    pub fn column(&self, name: &str) -> Result<usize> {
        self.header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Csv(format!("missing column {name}")))
    }

    /// Numeric values of a column.
    pub fn numbers(&self, name: &str) -> Result<Vec<f64>> {
        let c = self.column(name)?;
        self.rows
            .iter()
            .map(|r| {
                r[c].parse::<f64>()
                    .map_err(|_| Error::Csv(format!("column {name}: {:?} is not a number", r[c])))
            })
            .collect()
    }

    /// The table with one column removed, as CSV text.
    pub fn text_without(&self, name: &str) -> Result<String> {
        let skip = self.column(name)?;
        let keep = |r: &Vec<String>| {
            r.iter()
                .enumerate()
                .filter(|(i, _)| *i != skip)
                .map(|(_, s)| s.as_str())
                .collect::<Vec<_>>()
                .join(",")
        };
        let mut out = keep(&self.header);
        for r in &self.rows {
            out.push('\n');
            out.push_str(&keep(r));
        }
        Ok(out)
    }
}

/// Metrics file contents without the wall-clock column, for reproducibility
/// comparisons.
pub fn deterministic_metrics(path: &Path) -> Result<String> {
    CsvTable::read(path)?.text_without(WALL_CLOCK_COLUMN)
}

/// Append-only writer, flushed after every row.
pub struct MetricsWriter {
    path: PathBuf,
    writer: csv::Writer<File>,
}

impl MetricsWriter {
    /// Start a fresh file with the header row.
    pub fn create(path: &Path, num_players: usize) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut writer = csv::Writer::from_writer(file);
        writer.write_record(metrics_header(num_players)).map_err(|e| csv_err(path, e))?;
        writer.flush().map_err(|e| Error::io(path, e))?;
        Ok(Self { path: path.to_path_buf(), writer })
    }

    /// Continue a file after a resume from `step`: rows past `step` are
    /// dropped (they were written after the checkpoint). Returns the writer
    /// and the last recorded wall-clock time.
    pub fn resume(path: &Path, num_players: usize, step: u64) -> Result<(Self, f64)> {
        if !path.exists() {
            return Ok((Self::create(path, num_players)?, 0.0));
        }
        let table = CsvTable::read(path)?;
        if table.header != metrics_header(num_players) {
            return Err(Error::Csv(format!("{}: header does not match the run", path.display())));
        }
        let steps = table.numbers("step")?;
        let walls = table.numbers(WALL_CLOCK_COLUMN)?;
        let kept: Vec<usize> = (0..steps.len()).filter(|&i| steps[i] <= step as f64).collect();
        let wall = kept.last().map_or(0.0, |&i| walls[i]);
        let mut w = Self::create(path, num_players)?;
        for &i in &kept {
            w.writer.write_record(&table.rows[i]).map_err(|e| csv_err(path, e))?;
        }
        w.writer.flush().map_err(|e| Error::io(path, e))?;
        Ok((w, wall))
    }

    pub fn write(&mut self, report: &UpdateReport, wall_ms: f64) -> Result<()> {
        self.writer
            .write_record(metrics_row(report, wall_ms))
            .map_err(|e| csv_err(&self.path, e))?;
        self.writer.flush().map_err(|e| Error::io(&self.path, e))
    }
}

/// Plain CSV writer for the other report files.
pub(crate) fn write_csv(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let file = OpenOptions::new()
        .write(true)
        .create(true)
        .truncate(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(header).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.write_record(&r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
