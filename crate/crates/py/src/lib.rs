//! Python bindings: benchmark games, optimizers, convergence analysis, the
//! inner CG solver and the config-driven experiment runner.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use pcgd_core::analysis::{classify_convergence, ConvergenceVerdict};
use pcgd_core::bench::{
    bilinear_game, four_player_example, pairwise_zero_sum_quadratic, random_quadratic_polymatrix, BilinearGame,
    FourPlayerExample, QuadraticPolymatrixGame,
};
use pcgd_core::experiment::config::{ExperimentConfig, ExperimentKind};
use pcgd_core::experiment::plotdata::emit_plot_data;
use pcgd_core::experiment::presets::{preset, preset_names};
use pcgd_core::experiment::sweep::run_analysis_sweep;
use pcgd_core::experiment::tournament::run_tournament;
use pcgd_core::experiment::{parse_config, run_experiment, RunOptions};
use pcgd_core::game::{FlatParams, Game};
use pcgd_core::linalg::{conjugate_gradient_normal, default_cg_max_iter, DenseMatrix, FnOperator};
use pcgd_core::marl::lambda_return_advantages;
use pcgd_core::optimizers::{Method, Optimizer, OptimizerConfig, UpdateReport};
use pcgd_core::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } | Error::Environment(_) | Error::Checkpoint(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

enum BenchGame {
    Bilinear(BilinearGame),
    FourPlayer(FourPlayerExample),
    Quadratic(QuadraticPolymatrixGame),
}

/// An analytic benchmark game.
#[pyclass(name = "Game", frozen)]
struct PyGame {
    inner: BenchGame,
    description: String,
}

impl PyGame {
    fn game(&self) -> &dyn Game {
        match &self.inner {
            BenchGame::Bilinear(g) => g,
            BenchGame::FourPlayer(g) => g,
            BenchGame::Quadratic(g) => g,
        }
    }
}

#[pymethods]
impl PyGame {
    /// Two scalar players with losses `γxy` and `−γxy`.
    #[staticmethod]
    #[pyo3(signature = (gamma = 1.0))]
    fn bilinear(gamma: f64) -> PyResult<Self> {
        Ok(Self {
            inner: BenchGame::Bilinear(bilinear_game(gamma).map_err(py_err)?),
            description: format!("bilinear(gamma={gamma})"),
        })
    }

    /// The four-player quadratic example on which simultaneous gradient descent diverges.
    #[staticmethod]
    fn four_player() -> Self {
        Self { inner: BenchGame::FourPlayer(four_player_example()), description: "four_player".into() }
    }

    /// Random quadratic polymatrix game with a positive-definite symmetric part.
    #[staticmethod]
    #[pyo3(signature = (seed, dims, s_scale = 1.0, a_scale = 1.0))]
    fn random_quadratic(seed: u64, dims: Vec<usize>, s_scale: f64, a_scale: f64) -> PyResult<Self> {
        let g = random_quadratic_polymatrix(seed, &dims, s_scale, a_scale).map_err(py_err)?;
        Ok(Self {
            inner: BenchGame::Quadratic(g),
            description: format!("random_quadratic(seed={seed}, dims={dims:?}, s_scale={s_scale}, a_scale={a_scale})"),
        })
    }

    /// Random quadratic game whose player pairs are zero-sum.
    #[staticmethod]
    #[pyo3(signature = (seed, dims, s_scale = 1.0, a_scale = 1.0))]
    fn pairwise_zero_sum(seed: u64, dims: Vec<usize>, s_scale: f64, a_scale: f64) -> PyResult<Self> {
        let g = pairwise_zero_sum_quadratic(seed, &dims, s_scale, a_scale).map_err(py_err)?;
        Ok(Self {
            inner: BenchGame::Quadratic(g),
            description: format!("pairwise_zero_sum(seed={seed}, dims={dims:?}, s_scale={s_scale}, a_scale={a_scale})"),
        })
    }

    /// Parameter count of each player.
    #[getter]
    fn dims(&self) -> Vec<usize> {
        self.game().partition().dims().to_vec()
    }

    fn losses(&self, theta: Vec<f64>) -> PyResult<Vec<f64>> {
        self.game().losses(&theta).map_err(py_err)
    }

    /// Simultaneous gradient: each player's gradient of its own loss.
    fn gradient(&self, theta: Vec<f64>) -> PyResult<Vec<f64>> {
        self.game().gradient(&theta).map_err(py_err)
    }

    /// Product of the off-diagonal blocks of the game Hessian with `v`.
    fn offdiag_hvp(&self, theta: Vec<f64>, v: Vec<f64>) -> PyResult<Vec<f64>> {
        self.game().offdiag_hvp(&theta, &v).map_err(py_err)
    }

    /// Product of the full game Hessian with `v`.
    fn hvp(&self, theta: Vec<f64>, v: Vec<f64>) -> PyResult<Vec<f64>> {
        self.game().hvp(&theta, &v).map_err(py_err)
    }

    fn __repr__(&self) -> String {
        format!("Game.{}", self.description)
    }
}

fn report_dict<'py>(py: Python<'py>, r: &UpdateReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("step", r.step)?;
    d.set_item("losses", r.losses.clone())?;
    d.set_item("grad_norm", r.grad_norm)?;
    d.set_item("step_norm", r.step_norm)?;
    d.set_item("theta_norm", r.theta_norm)?;
    d.set_item("eta", r.eta)?;
    d.set_item("cg_iterations", r.cg_iterations())?;
    d.set_item("cg_residual", r.cg_residual())?;
    d.set_item("cg_converged", r.cg_converged())?;
    Ok(d)
}

/// A stateful optimizer: `simgd`, `pcgd`, `extragradient` or `sga`.
#[pyclass(name = "Optimizer")]
struct PyOptimizer {
    inner: Optimizer,
}

#[pymethods]
impl PyOptimizer {
    #[new]
    #[pyo3(signature = (method, eta, cg_eps = None, cg_max_iter = None))]
    fn new(method: &str, eta: f64, cg_eps: Option<f64>, cg_max_iter: Option<usize>) -> PyResult<Self> {
        let method: Method = method.parse().map_err(py_err)?;
        let mut config = OptimizerConfig::new(method, eta);
        if cg_eps.is_some() || cg_max_iter.is_some() {
            let eps = cg_eps.unwrap_or(config.cg_eps);
            config = config.with_cg(eps, cg_max_iter);
        }
        Ok(Self { inner: Optimizer::new(config).map_err(py_err)? })
    }

    /// One update; returns the new parameters and a report dict.
    fn step<'py>(
        &mut self,
        py: Python<'py>,
        game: &PyGame,
        theta: Vec<f64>,
    ) -> PyResult<(Vec<f64>, Bound<'py, PyDict>)> {
        let flat = FlatParams::new(game.game().partition().clone(), theta).map_err(py_err)?;
        let (next, report) = self.inner.step(game.game(), &flat).map_err(py_err)?;
        Ok((next.into_values(), report_dict(py, &report)?))
    }

    /// Run `steps` updates and return the final parameters with one report per step.
    fn run<'py>(
        &mut self,
        py: Python<'py>,
        game: &PyGame,
        theta: Vec<f64>,
        steps: usize,
    ) -> PyResult<(Vec<f64>, Vec<Bound<'py, PyDict>>)> {
        let mut flat = FlatParams::new(game.game().partition().clone(), theta).map_err(py_err)?;
        let mut reports = Vec::with_capacity(steps);
        for _ in 0..steps {
            let (next, report) = self.inner.step(game.game(), &flat).map_err(py_err)?;
            reports.push(report_dict(py, &report)?);
            flat = next;
        }
        Ok((flat.into_values(), reports))
    }

    #[getter]
    fn steps_taken(&self) -> u64 {
        self.inner.state().step
    }
}

fn verdict_dict<'py>(py: Python<'py>, v: &ConvergenceVerdict) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("eta", v.eta)?;
    d.set_item("spectral_radius", v.spectral_radius)?;
    d.set_item("radius_accurate", v.radius_accurate)?;
    d.set_item("s_norm", v.s_norm)?;
    d.set_item("theorem_bound", v.theorem_bound)?;
    d.set_item("relaxed_bound", v.relaxed_bound)?;
    d.set_item("is_local_nash", v.is_local_nash)?;
    d.set_item("converges_locally", v.converges_locally)?;
    Ok(d)
}

/// Local convergence verdict of the PCGD update at a stationary point.
#[pyfunction]
fn classify<'py>(py: Python<'py>, game: &PyGame, theta: Vec<f64>, eta: f64) -> PyResult<Bound<'py, PyDict>> {
    let v = classify_convergence(game.game(), &theta, eta).map_err(py_err)?;
    verdict_dict(py, &v)
}

/// Solve `M x = y` for a dense square `M` with CG on the normal equations.
#[pyfunction]
#[pyo3(signature = (matrix, rhs, eps = 1e-6, max_iter = None, x0 = None))]
fn cg_solve<'py>(
    py: Python<'py>,
    matrix: Vec<Vec<f64>>,
    rhs: Vec<f64>,
    eps: f64,
    max_iter: Option<usize>,
    x0: Option<Vec<f64>>,
) -> PyResult<(Vec<f64>, Bound<'py, PyDict>)> {
    let m = DenseMatrix::from_rows(&matrix).map_err(py_err)?;
    let n = m.rows();
    let (a, b) = (m.clone(), m);
    let op = FnOperator::with_transpose(n, move |v: &[f64]| a.matvec(v), move |v: &[f64]| b.transpose_matvec(v));
    let cap = max_iter.unwrap_or_else(|| default_cg_max_iter(n));
    let (x, rep) = conjugate_gradient_normal(&op, &rhs, x0.as_deref(), eps, cap).map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("iterations", rep.iterations)?;
    d.set_item("relative_residual", rep.relative_residual)?;
    d.set_item("converged", rep.converged)?;
    Ok((x, d))
}

/// Advantages and λ-returns of one episode.
#[pyfunction]
fn lambda_returns(rewards: Vec<f64>, values: Vec<f64>, gamma: f64, lam: f64) -> PyResult<(Vec<f64>, Vec<f64>)> {
    if rewards.len() != values.len() {
        return Err(PyValueError::new_err("rewards and values must have the same length"));
    }
    Ok(lambda_return_advantages(&rewards, &values, gamma, lam))
}

/// Names of the bundled experiment configurations.
#[pyfunction]
fn presets() -> Vec<String> {
    preset_names().map(|s| s.to_string()).collect()
}

fn load_config(config: &str) -> pcgd_core::Result<ExperimentConfig> {
    match config.strip_prefix("preset:") {
        Some(name) => preset(name),
        None => parse_config(&PathBuf::from(config)),
    }
}

/// Run an experiment from a TOML file or `preset:<name>`; returns a summary dict.
#[pyfunction]
#[pyo3(signature = (config, seed = None, out = None, workers = 1, resume = None))]
fn run<'py>(
    py: Python<'py>,
    config: &str,
    seed: Option<u64>,
    out: Option<PathBuf>,
    workers: usize,
    resume: Option<PathBuf>,
) -> PyResult<Bound<'py, PyDict>> {
    let cfg = load_config(config).map_err(py_err)?;
    let opts = RunOptions { seed, out, workers, resume };
    let d = PyDict::new(py);
    d.set_item("kind", format!("{:?}", cfg.experiment.kind).to_lowercase())?;
    match cfg.experiment.kind {
        ExperimentKind::Bench | ExperimentKind::Marl => {
            let s = py.detach(|| run_experiment(&cfg, &opts)).map_err(py_err)?;
            d.set_item("output_dir", s.output_dir)?;
            d.set_item("metrics_path", s.metrics_path)?;
            d.set_item("checkpoint_path", s.checkpoint_path)?;
            d.set_item("steps", s.steps)?;
            d.set_item("final_params", s.final_params)?;
            d.set_item("final_theta_norm", s.final_theta_norm)?;
            d.set_item("sampling_passes", s.sampling_passes)?;
            d.set_item("total_cg_iterations", s.total_cg_iterations)?;
            d.set_item("halted", s.halted)?;
        }
        ExperimentKind::AnalysisSweep => {
            let s = py.detach(|| run_analysis_sweep(&cfg, &opts)).map_err(py_err)?;
            d.set_item("path", s.path)?;
            d.set_item("rows", s.rows.len())?;
            d.set_item("converged", s.rows.iter().filter(|r| r.verdict.converges_locally).count())?;
        }
        ExperimentKind::Tournament => {
            let r = py.detach(|| run_tournament(&cfg, &opts)).map_err(py_err)?;
            d.set_item("path", r.path)?;
            let rows: Vec<(usize, String, f64)> =
                r.rows.iter().map(|m| (m.focal_seats, m.population.clone(), m.win_rate())).collect();
            d.set_item("win_rates", rows)?;
        }
        ExperimentKind::Plot => {
            let p = py.detach(|| emit_plot_data(&cfg, &opts)).map_err(py_err)?;
            d.set_item("path", p)?;
        }
    }
    Ok(d)
}

#[pymodule]
fn pcgd(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyGame>()?;
    m.add_class::<PyOptimizer>()?;
    m.add_function(wrap_pyfunction!(classify, m)?)?;
    m.add_function(wrap_pyfunction!(cg_solve, m)?)?;
    m.add_function(wrap_pyfunction!(lambda_returns, m)?)?;
    m.add_function(wrap_pyfunction!(presets, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    Ok(())
}
