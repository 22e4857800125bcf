//! Local-convergence sweeps over seeded random quadratic games.

use std::path::PathBuf;

use rayon::prelude::*;

use super::config::{ExperimentConfig, ExperimentKind, SweepConfig};
use super::metrics::{fmt_f64, write_csv};
use super::runner::{prepare_output_dir, RunOptions};
use crate::analysis::{
    assemble_hessian, classify_hessian, jacobian_spectral_radius, local_nash_blocks, simgd_jacobian,
    ConvergenceVerdict, DEFAULT_DENSE_CAP, RHO_MARGIN, STATIONARITY_TOL,
};
use crate::bench::random_quadratic_polymatrix;
use crate::error::{Error, Result};
use crate::game::Game;
use crate::linalg;
use crate::optimizers::Method;

pub const SWEEP_FILE: &str = "sweep.csv";

/// One classified `(game, a_scale, method, η)` combination.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub seed: u64,
    pub a_scale: f64,
    pub method: Method,
    pub verdict: ConvergenceVerdict,
}

pub fn sweep_header() -> Vec<&'static str> {
    let mut h = vec!["seed", "a_scale", "method"];
    h.extend(ConvergenceVerdict::CSV_HEADER.split(','));
    h
}

impl SweepRow {
    pub fn record(&self) -> Vec<String> {
        let v = &self.verdict;
        vec![
            self.seed.to_string(),
            fmt_f64(self.a_scale),
            self.method.name().to_string(),
            fmt_f64(v.eta),
            fmt_f64(v.spectral_radius),
            v.radius_accurate.to_string(),
            fmt_f64(v.s_norm),
            fmt_f64(v.theorem_bound),
            fmt_f64(v.relaxed_bound),
            v.is_local_nash.to_string(),
            v.converges_locally.to_string(),
        ]
    }
}

/// Classify every game of the family at the origin (its equilibrium).
/// Rows come out in (seed, a_scale, η, method) order.
pub fn sweep_rows(sweep: &SweepConfig) -> Result<Vec<SweepRow>> {
    let one_seed = |seed: u64| -> Result<Vec<SweepRow>> {
        let mut rows = Vec::new();
        for &a_scale in &sweep.a_scales {
            let game = random_quadratic_polymatrix(seed, &sweep.dims, sweep.s_scale, a_scale)?;
            let origin = vec![0.0; game.partition().total()];
            let hess = assemble_hessian(&game, &origin, DEFAULT_DENSE_CAP)?;
            let stationary = linalg::norm(&game.gradient(&origin)?) <= STATIONARITY_TOL;
            let nash = stationary && local_nash_blocks(&hess, STATIONARITY_TOL)?;
            let mut etas = sweep.etas.clone();
            if !sweep.bound_fractions.is_empty() {
                let bound = crate::analysis::theorem_step_bound(&hess.symmetric)?;
                etas.extend(sweep.bound_fractions.iter().map(|f| f * bound));
            }
            for &eta in &etas {
                let pcgd = classify_hessian(&hess, eta, nash)?;
                for &method in &sweep.methods {
                    let verdict = match method {
                        Method::Pcgd => pcgd.clone(),
                        Method::SimGd => {
                            let rho = jacobian_spectral_radius(&simgd_jacobian(&hess.h, eta)?)?;
                            ConvergenceVerdict {
                                spectral_radius: rho.value,
                                radius_accurate: rho.accurate,
                                converges_locally: rho.value < 1.0 - RHO_MARGIN,
                                ..pcgd.clone()
                            }
                        }
                        other => {
                            return Err(Error::Unsupported(format!("no update Jacobian for {other}")));
                        }
                    };
                    rows.push(SweepRow { seed, a_scale, method, verdict });
                }
            }
        }
        Ok(rows)
    };
    let seeds: Vec<u64> = (0..sweep.seeds).map(|k| sweep.first_seed + k).collect();
    let per_seed: Vec<Result<Vec<SweepRow>>> = seeds.par_iter().map(|&s| one_seed(s)).collect();
    let mut rows = Vec::new();
    for r in per_seed {
        rows.extend(r?);
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSummary {
    pub path: PathBuf,
    pub rows: Vec<SweepRow>,
}

/// Run an `analysis-sweep` experiment and write its CSV.
pub fn run_analysis_sweep(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<SweepSummary> {
    cfg.validate()?;
    if cfg.kind() != ExperimentKind::AnalysisSweep {
        return Err(Error::Config(format!(
            "`analyze` handles analysis-sweep experiments, not {}",
            cfg.kind().name()
        )));
    }
    let sweep = cfg.sweep()?;
    let rows = match opts.workers {
        0 | 1 => rayon::ThreadPoolBuilder::new().num_threads(1).build(),
        w => rayon::ThreadPoolBuilder::new().num_threads(w).build(),
    }
    .map_err(|e| Error::InvalidArgument(format!("worker pool: {e}")))?
    .install(|| sweep_rows(sweep))?;
    let dir = prepare_output_dir(cfg, opts)?;
    let path = dir.join(SWEEP_FILE);
    write_csv(&path, &sweep_header(), rows.iter().map(SweepRow::record))?;
    Ok(SweepSummary { path, rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiment::metrics::CsvTable;

    fn cfg(extra: &str) -> ExperimentConfig {
        ExperimentConfig::from_toml_str(&format!(
            "[experiment]\nkind = \"analysis-sweep\"\n[sweep]\nseeds = 5\ndims = [2, 2, 2]\n{extra}"
        ))
        .unwrap()
    }

    #[test]
    fn empty_grid_writes_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let o = RunOptions { out: Some(dir.path().into()), ..RunOptions::default() };
        let s = run_analysis_sweep(&cfg("a_scales = [1.0]\n"), &o).unwrap();
        assert!(s.rows.is_empty());
        let text = std::fs::read_to_string(&s.path).unwrap();
        assert_eq!(text.trim_end(), sweep_header().join(","));
    }

    #[test]
    fn below_bound_all_converge_and_simgd_breaks() {
        let dir = tempfile::tempdir().unwrap();
        let o = RunOptions { out: Some(dir.path().into()), workers: 2, ..RunOptions::default() };
        let c = cfg("a_scales = [1.0, 1000.0]\nbound_fractions = [0.9]\nmethods = [\"pcgd\", \"simgd\"]\n");
        let s = run_analysis_sweep(&c, &o).unwrap();
        assert_eq!(s.rows.len(), 5 * 2 * 2);
        for r in &s.rows {
            assert!(r.verdict.is_local_nash);
            if r.method == Method::Pcgd {
                assert!(r.verdict.converges_locally, "{r:?}");
            }
        }
        let simgd_big = s.rows.iter().filter(|r| r.method == Method::SimGd && r.a_scale == 1000.0);
        assert!(simgd_big.filter(|r| r.verdict.spectral_radius > 1.0).count() >= 4);
        let t = CsvTable::read(&s.path).unwrap();
        assert_eq!(t.rows.len(), s.rows.len());
        // sequential and parallel runs agree
        let o1 = RunOptions { workers: 1, ..o };
        assert_eq!(run_analysis_sweep(&c, &o1).unwrap().rows, s.rows);
    }
}
