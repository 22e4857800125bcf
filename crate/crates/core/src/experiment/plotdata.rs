//! Long-format plot tables merged from several metric files.
//!
//! Output columns: `method, step, wall_ms, metric, value`, one row per
//! (run, step, metric). With a window `w` each series is replaced by its
//! trailing `w`-step moving average, starting at the `w`-th step.

use std::path::PathBuf;

use super::config::{ExperimentConfig, ExperimentKind, PlotConfig};
use super::metrics::{fmt_f64, write_csv, CsvTable, WALL_CLOCK_COLUMN};
use super::runner::{prepare_output_dir, RunOptions};
use crate::error::{Error, Result};

pub const PLOT_FILE: &str = "plotdata.csv";
pub const PLOT_HEADER: [&str; 5] = ["method", "step", "wall_ms", "metric", "value"];

/// Trailing moving average over full windows.
pub fn moving_average(values: &[f64], window: usize) -> Result<Vec<f64>> {
    if window == 0 || window > values.len() {
        return Err(Error::InvalidArgument(format!(
            "moving-average window {window} must lie in 1..={}",
            values.len()
        )));
    }
    let mut out = Vec::with_capacity(values.len() + 1 - window);
    let mut sum: f64 = values[..window].iter().sum();
    out.push(sum / window as f64);
    for k in window..values.len() {
        sum += values[k] - values[k - window];
        out.push(sum / window as f64);
    }
    Ok(out)
}

/// Build the long-format rows.
pub fn plot_rows(plot: &PlotConfig) -> Result<Vec<Vec<String>>> {
    let tables = plot
        .inputs
        .iter()
        .map(|i| CsvTable::read(&i.path).map(|t| (i, t)))
        .collect::<Result<Vec<_>>>()?;
    let header = &tables[0].1.header;
    for (input, t) in &tables[1..] {
        if &t.header != header {
            return Err(Error::Csv(format!(
                "{} does not share the schema of {}",
                input.path.display(),
                plot.inputs[0].path.display()
            )));
        }
    }
    let metrics: Vec<String> = if plot.metrics.is_empty() {
        header.iter().filter(|h| *h != "step" && *h != WALL_CLOCK_COLUMN).cloned().collect()
    } else {
        plot.metrics.clone()
    };
    let mut rows = Vec::new();
    for (input, t) in &tables {
        let (step_col, wall_col) = (t.column("step")?, t.column(WALL_CLOCK_COLUMN)?);
        t.numbers("step")?;
        t.numbers(WALL_CLOCK_COLUMN)?;
        let series = metrics
            .iter()
            .map(|m| {
                let v = t.numbers(m)?;
                match plot.window {
                    Some(w) => moving_average(&v, w).map_err(|e| {
                        Error::InvalidArgument(format!("{} ({m}): {e}", input.path.display()))
                    }),
                    None => Ok(v),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let skip = plot.window.map_or(0, |w| w - 1);
        for (k, row) in t.rows.iter().enumerate().skip(skip) {
            for (m, s) in metrics.iter().zip(&series) {
                rows.push(vec![
                    input.label.clone(),
                    row[step_col].clone(),
                    row[wall_col].clone(),
                    m.clone(),
                    fmt_f64(s[k - skip]),
                ]);
            }
        }
    }
    Ok(rows)
}

/// Run a `plot` experiment and write its CSV.
pub fn emit_plot_data(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<PathBuf> {
    cfg.validate()?;
    if cfg.kind() != ExperimentKind::Plot {
        return Err(Error::Config(format!(
            "`plotdata` handles plot specs, not {}",
            cfg.kind().name()
        )));
    }
    let plot = cfg.plot()?;
    let rows = plot_rows(plot)?;
    let dir = prepare_output_dir(cfg, opts)?;
    let path = dir.join(plot.output.as_deref().unwrap_or(PLOT_FILE));
    write_csv(&path, &PLOT_HEADER, rows)?;
    Ok(path)
}
