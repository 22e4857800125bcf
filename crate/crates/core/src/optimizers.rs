//! PCGD and the baseline game optimizers behind one stepping interface.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::game::{simultaneous_gradient, FlatParams, Game};
use crate::linalg::{
    self, conjugate_gradient_normal, default_cg_max_iter, CgReport, LinearOperator,
    DEFAULT_CG_EPS,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    SimGd,
    Pcgd,
    Extragradient,
    Sga,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::SimGd => "simgd",
            Method::Pcgd => "pcgd",
            Method::Extragradient => "extragradient",
            Method::Sga => "sga",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "simgd" => Ok(Method::SimGd),
            "pcgd" => Ok(Method::Pcgd),
            "extragradient" => Ok(Method::Extragradient),
            "sga" => Ok(Method::Sga),
            other => Err(Error::InvalidArgument(format!("unknown optimizer method {other:?}"))),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

fn default_sga_lambda() -> f64 {
    1.0
}

fn default_cg_eps() -> f64 {
    DEFAULT_CG_EPS
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub method: Method,
    pub eta: f64,
    #[serde(default = "default_sga_lambda")]
    pub sga_lambda: f64,
    #[serde(default = "default_cg_eps")]
    pub cg_eps: f64,
    /// `None` means `10·d` capped at 500.
    #[serde(default)]
    pub cg_max_iter: Option<usize>,
    #[serde(default = "default_true")]
    pub warm_start: bool,
}

impl OptimizerConfig {
    pub fn new(method: Method, eta: f64) -> Self {
        Self {
            method,
            eta,
            sga_lambda: default_sga_lambda(),
            cg_eps: DEFAULT_CG_EPS,
            cg_max_iter: None,
            warm_start: true,
        }
    }

    pub fn with_cg(mut self, eps: f64, max_iter: Option<usize>) -> Self {
        self.cg_eps = eps;
        self.cg_max_iter = max_iter;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0) || !self.eta.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "step size eta must be positive and finite, got {}",
                self.eta
            )));
        }
        if !self.sga_lambda.is_finite() {
            return Err(Error::InvalidArgument("sga_lambda must be finite".into()));
        }
        if !(self.cg_eps > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "cg_eps must be positive, got {}",
                self.cg_eps
            )));
        }
        if self.cg_max_iter == Some(0) {
            return Err(Error::InvalidArgument("cg_max_iter must be at least 1".into()));
        }
        Ok(())
    }
}

/// State carried between steps of one optimizer.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepState {
    /// Last inner solution `x` of `(I+ηH_o)x = ξ`; empty before the first
    /// PCGD step.
    pub previous_solution: Vec<f64>,
    pub step: u64,
}

/// What happened during one optimizer step.
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateReport {
    pub step: u64,
    /// Per-player losses at the pre-step iterate.
    pub losses: Vec<f64>,
    pub grad_norm: f64,
    pub step_norm: f64,
    pub cg: Option<CgReport>,
    pub eta: f64,
    /// Norm of the post-step iterate.
    pub theta_norm: f64,
}

impl UpdateReport {
    pub fn cg_iterations(&self) -> usize {
        self.cg.map_or(0, |c| c.iterations)
    }

    pub fn cg_residual(&self) -> f64 {
        self.cg.map_or(0.0, |c| c.relative_residual)
    }

    pub fn cg_converged(&self) -> bool {
        self.cg.is_none_or(|c| c.converged)
    }
}

fn finish(
    theta: &FlatParams,
    next: Vec<f64>,
    losses: Vec<f64>,
    xi: &[f64],
    eta: f64,
    cg: Option<CgReport>,
    step: u64,
) -> Result<(FlatParams, UpdateReport)> {
    if let Some(block) = theta.partition().first_non_finite_block(&next) {
        return Err(Error::NonFinite {
            what: "updated parameters",
            block,
        });
    }
    let step_norm = linalg::norm(&linalg::sub(&next, theta.values()));
    let next = theta.with_values(next)?;
    let report = UpdateReport {
        step,
        losses,
        grad_norm: linalg::norm(xi),
        step_norm,
        cg,
        eta,
        theta_norm: next.norm(),
    };
    Ok((next, report))
}

fn check_eta(eta: f64) -> Result<()> {
    if !(eta > 0.0) || !eta.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "step size eta must be positive and finite, got {eta}"
        )));
    }
    Ok(())
}

/// Gradient first, losses second: sample-based games fill their cache on the
/// gradient call and serve losses from it.
fn gradient_and_losses(game: &dyn Game, theta: &FlatParams) -> Result<(FlatParams, Vec<f64>)> {
    let xi = simultaneous_gradient(game, theta)?;
    let losses = game.losses(theta.values())?;
    Ok((xi, losses))
}

/// `θ' = θ − η·ξ(θ)`.
pub fn simgd_step(game: &dyn Game, theta: &FlatParams, eta: f64) -> Result<(FlatParams, UpdateReport)> {
    check_eta(eta)?;
    let (xi, losses) = gradient_and_losses(game, theta)?;
    let mut next = theta.values().to_vec();
    linalg::axpy(-eta, xi.values(), &mut next);
    finish(theta, next, losses, xi.values(), eta, None, 0)
}

/// The operator `M = I + ηH_o(θ)` with its transpose.
pub struct PcgdOperator<'a> {
    game: &'a dyn Game,
    theta: &'a [f64],
    eta: f64,
}

impl<'a> PcgdOperator<'a> {
    pub fn new(game: &'a dyn Game, theta: &'a [f64], eta: f64) -> Self {
        Self { game, theta, eta }
    }
}

impl LinearOperator for PcgdOperator<'_> {
    fn dim(&self) -> usize {
        self.theta.len()
    }

    fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        let mut out = self.game.offdiag_hvp(self.theta, v)?;
        for (o, vi) in out.iter_mut().zip(v) {
            *o = vi + self.eta * *o;
        }
        Ok(out)
    }

    fn apply_transpose(&self, v: &[f64]) -> Result<Vec<f64>> {
        let mut out = self.game.offdiag_hvp_transpose(self.theta, v)?;
        for (o, vi) in out.iter_mut().zip(v) {
            *o = vi + self.eta * *o;
        }
        Ok(out)
    }
}

/// `θ' = θ − η(I + ηH_o)⁻¹ξ`, the inner system solved by CG on the normal
/// equations. A non-converged solve still applies the best iterate; the
/// report carries the flag.
pub fn pcgd_step(
    game: &dyn Game,
    theta: &FlatParams,
    config: &OptimizerConfig,
    state: &mut StepState,
) -> Result<(FlatParams, UpdateReport)> {
    config.validate()?;
    let eta = config.eta;
    let (xi, losses) = gradient_and_losses(game, theta)?;
    let d = theta.len();
    let op = PcgdOperator::new(game, theta.values(), eta);
    let warm = (config.warm_start && state.previous_solution.len() == d)
        .then_some(state.previous_solution.as_slice());
    let max_iter = config.cg_max_iter.unwrap_or_else(|| default_cg_max_iter(d));
    let (x, report) = conjugate_gradient_normal(&op, xi.values(), warm, config.cg_eps, max_iter)?;
    let mut next = theta.values().to_vec();
    linalg::axpy(-eta, &x, &mut next);
    let out = finish(theta, next, losses, xi.values(), eta, Some(report), state.step)?;
    state.previous_solution = x;
    Ok(out)
}

/// `θ_half = θ − ηξ(θ)`, `θ' = θ − ηξ(θ_half)`.
pub fn extragradient_step(
    game: &dyn Game,
    theta: &FlatParams,
    eta: f64,
) -> Result<(FlatParams, UpdateReport)> {
    check_eta(eta)?;
    let (xi, losses) = gradient_and_losses(game, theta)?;
    let mut half = theta.values().to_vec();
    linalg::axpy(-eta, xi.values(), &mut half);
    let half = theta.with_values(half)?;
    let xi_half = simultaneous_gradient(game, &half)?;
    let mut next = theta.values().to_vec();
    linalg::axpy(-eta, xi_half.values(), &mut next);
    finish(theta, next, losses, xi.values(), eta, None, 0)
}

/// `θ' = θ − η(ξ + λAᵀξ)` with `A = (H − Hᵀ)/2`.
///
/// The diagonal blocks of `H` are symmetric Hessians, so they cancel in
/// `Aᵀξ = ½(Hᵀξ − Hξ)` and only off-diagonal products are needed.
pub fn sga_step(
    game: &dyn Game,
    theta: &FlatParams,
    eta: f64,
    lambda: f64,
) -> Result<(FlatParams, UpdateReport)> {
    check_eta(eta)?;
    let (xi, losses) = gradient_and_losses(game, theta)?;
    let mut adjusted = xi.values().to_vec();
    if lambda != 0.0 {
        let ht_xi = game.offdiag_hvp_transpose(theta.values(), xi.values())?;
        let h_xi = game.offdiag_hvp(theta.values(), xi.values())?;
        for ((a, t), h) in adjusted.iter_mut().zip(&ht_xi).zip(&h_xi) {
            *a += lambda * 0.5 * (t - h);
        }
    }
    let mut next = theta.values().to_vec();
    linalg::axpy(-eta, &adjusted, &mut next);
    finish(theta, next, losses, xi.values(), eta, None, 0)
}

/// A configured optimizer with its carried state.
#[derive(Debug, Clone)]
pub struct Optimizer {
    config: OptimizerConfig,
    state: StepState,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            state: StepState::default(),
        })
    }

    pub fn with_state(config: OptimizerConfig, state: StepState) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, state })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn state(&self) -> &StepState {
        &self.state
    }

    pub fn step(&mut self, game: &dyn Game, theta: &FlatParams) -> Result<(FlatParams, UpdateReport)> {
        let c = &self.config;
        let (next, mut report) = match c.method {
            Method::SimGd => simgd_step(game, theta, c.eta)?,
            Method::Pcgd => pcgd_step(game, theta, c, &mut self.state)?,
            Method::Extragradient => extragradient_step(game, theta, c.eta)?,
            Method::Sga => sga_step(game, theta, c.eta, c.sga_lambda)?,
        };
        report.step = self.state.step;
        self.state.step += 1;
        Ok((next, report))
    }
}
