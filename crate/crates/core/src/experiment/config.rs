//! Declarative experiment configuration in TOML.
//!
//! Every table rejects unknown keys. The `[experiment].kind` key picks the
//! verb the file is meant for; the other tables are read as that kind needs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::Activation;
use crate::envs::{MarketConfig, ScriptedMdpSpec, SoccerConfig};
use crate::error::{Error, Result};
use crate::marl::MarlSettings;
use crate::optimizers::{Method, OptimizerConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    /// Optimizer run on an analytic benchmark game.
    Bench,
    /// Local-convergence verdicts over a family of random games.
    AnalysisSweep,
    /// Policy-gradient training in a multi-agent environment.
    Marl,
    /// Evaluation of trained populations against each other.
    Tournament,
    /// Merge of metric files into long-format plot data.
    Plot,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Bench => "bench",
            Self::AnalysisSweep => "analysis-sweep",
            Self::Marl => "marl",
            Self::Tournament => "tournament",
            Self::Plot => "plot",
        }
    }
}

fn default_checkpoint_every() -> u64 {
    100
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    pub kind: ExperimentKind,
    #[serde(default)]
    pub name: Option<String>,
    /// Optimizer steps (bench) or training epochs (marl).
    #[serde(default)]
    pub epochs: Option<u64>,
    #[serde(default)]
    pub seed: u64,
    /// Output directory, relative to the output root unless absolute.
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: u64,
    /// Stop the run when an inner CG solve misses its tolerance.
    #[serde(default)]
    pub halt_on_cg_failure: bool,
    /// Explicit starting point for bench runs; a seeded random unit vector
    /// otherwise.
    #[serde(default)]
    pub initial: Option<Vec<f64>>,
}

/// Analytic benchmark games.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum GameConfig {
    Bilinear {
        #[serde(default = "one")]
        gamma: f64,
    },
    FourPlayer,
    RandomQuadratic(QuadraticFamily),
    PairwiseZeroSum(QuadraticFamily),
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuadraticFamily {
    pub dims: Vec<usize>,
    #[serde(default = "one")]
    pub s_scale: f64,
    #[serde(default = "one")]
    pub a_scale: f64,
    #[serde(default)]
    pub game_seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScriptedPreset {
    TwoState,
    MatchingPennies,
}

impl ScriptedPreset {
    pub fn spec(self) -> ScriptedMdpSpec {
        match self {
            Self::TwoState => ScriptedMdpSpec::two_state_game(),
            Self::MatchingPennies => ScriptedMdpSpec::matching_pennies(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptedEnvConfig {
    pub preset: ScriptedPreset,
}

/// Multi-agent environments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EnvConfig {
    Soccer(SoccerConfig),
    Market(MarketConfig),
    Scripted(ScriptedEnvConfig),
}

fn default_hidden() -> Vec<usize> {
    vec![64, 32]
}

fn default_activation() -> Activation {
    Activation::Tanh
}

fn default_sigma() -> f64 {
    25.0
}

/// Policy network shape; input and output sizes follow the environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyConfig {
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    /// Fixed standard deviation of Gaussian policies.
    #[serde(default = "default_sigma")]
    pub sigma: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            hidden: default_hidden(),
            activation: default_activation(),
            sigma: default_sigma(),
        }
    }
}

fn default_methods() -> Vec<Method> {
    vec![Method::Pcgd]
}

fn default_seed_count() -> u64 {
    100
}

/// Family of random quadratic games and the step sizes to classify.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    #[serde(default = "default_seed_count")]
    pub seeds: u64,
    #[serde(default)]
    pub first_seed: u64,
    pub dims: Vec<usize>,
    #[serde(default = "one")]
    pub s_scale: f64,
    pub a_scales: Vec<f64>,
    /// Absolute step sizes.
    #[serde(default)]
    pub etas: Vec<f64>,
    /// Step sizes as fractions of each game's certified bound `1/(4‖S‖)`.
    #[serde(default)]
    pub bound_fractions: Vec<f64>,
    /// Update maps to classify: `pcgd` and/or `simgd`.
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
}

/// One seat-filling agent of a tournament population.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AgentSpec {
    /// Player `player`'s policy from a training checkpoint.
    Checkpoint {
        path: PathBuf,
        #[serde(default)]
        player: usize,
    },
    /// Uniformly random discrete actions.
    Random,
    /// Always the soccer `stand` move.
    Stand,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PopulationSpec {
    pub label: String,
    pub agent: AgentSpec,
}

fn default_episodes() -> u64 {
    2000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TournamentConfig {
    pub focal: PopulationSpec,
    pub opponent: PopulationSpec,
    /// Seats taken by the focal population in each matchup.
    pub compositions: Vec<usize>,
    #[serde(default = "default_episodes")]
    pub episodes: u64,
    /// Hidden layers of checkpointed policies.
    #[serde(default)]
    pub policy: PolicyConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlotInput {
    pub label: String,
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlotConfig {
    pub inputs: Vec<PlotInput>,
    /// Columns to emit; every metric column when empty.
    #[serde(default)]
    pub metrics: Vec<String>,
    /// Trailing moving-average window.
    #[serde(default)]
    pub window: Option<usize>,
    /// Output file name inside the output directory.
    #[serde(default)]
    pub output: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    #[serde(default)]
    pub game: Option<GameConfig>,
    #[serde(default)]
    pub optimizer: Option<OptimizerConfig>,
    #[serde(default)]
    pub env: Option<EnvConfig>,
    #[serde(default)]
    pub policy: Option<PolicyConfig>,
    #[serde(default)]
    pub marl: Option<MarlSettings>,
    #[serde(default)]
    pub sweep: Option<SweepConfig>,
    #[serde(default)]
    pub tournament: Option<TournamentConfig>,
    #[serde(default)]
    pub plot: Option<PlotConfig>,
}

fn missing(kind: ExperimentKind, table: &str) -> Error {
    Error::Config(format!("a {} experiment needs a [{table}] table", kind.name()))
}

impl ExperimentConfig {
    /// Parse and validate TOML text. Errors carry the line and column.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn kind(&self) -> ExperimentKind {
        self.experiment.kind
    }

    pub fn epochs(&self) -> Result<u64> {
        self.experiment
            .epochs
            .ok_or_else(|| Error::Config(format!("a {} experiment needs experiment.epochs", self.kind().name())))
    }

    pub fn optimizer(&self) -> Result<&OptimizerConfig> {
        self.optimizer.as_ref().ok_or_else(|| missing(self.kind(), "optimizer"))
    }

    pub fn game(&self) -> Result<&GameConfig> {
        self.game.as_ref().ok_or_else(|| missing(self.kind(), "game"))
    }

    pub fn env(&self) -> Result<&EnvConfig> {
        self.env.as_ref().ok_or_else(|| missing(self.kind(), "env"))
    }

    pub fn marl(&self) -> Result<&MarlSettings> {
        self.marl.as_ref().ok_or_else(|| missing(self.kind(), "marl"))
    }

    pub fn sweep(&self) -> Result<&SweepConfig> {
        self.sweep.as_ref().ok_or_else(|| missing(self.kind(), "sweep"))
    }

    pub fn tournament(&self) -> Result<&TournamentConfig> {
        self.tournament.as_ref().ok_or_else(|| missing(self.kind(), "tournament"))
    }

    pub fn plot(&self) -> Result<&PlotConfig> {
        self.plot.as_ref().ok_or_else(|| missing(self.kind(), "plot"))
    }

    pub fn validate(&self) -> Result<()> {
        let config = |e: Error| Error::Config(e.to_string());
        if let Some(opt) = &self.optimizer {
            opt.validate().map_err(config)?;
        }
        if let Some(m) = &self.marl {
            m.validate().map_err(config)?;
        }
        if self.experiment.checkpoint_every == 0 {
            return Err(Error::Config("experiment.checkpoint_every must be at least 1".into()));
        }
        match self.kind() {
            ExperimentKind::Bench => {
                self.game()?;
                self.optimizer()?;
                if self.epochs()? == 0 {
                    return Err(Error::Config("experiment.epochs must be at least 1".into()));
                }
            }
            ExperimentKind::Marl => {
                self.env()?;
                self.optimizer()?;
                self.marl()?;
                if self.epochs()? == 0 {
                    return Err(Error::Config("experiment.epochs must be at least 1".into()));
                }
            }
            ExperimentKind::AnalysisSweep => {
                let s = self.sweep()?;
                if s.dims.is_empty() || s.dims.contains(&0) {
                    return Err(Error::Config("sweep.dims must list positive block sizes".into()));
                }
                if s.etas.iter().chain(&s.bound_fractions).any(|e| !(*e > 0.0 && e.is_finite())) {
                    return Err(Error::Config("sweep step sizes must be positive and finite".into()));
                }
                if s.methods.iter().any(|m| !matches!(m, Method::Pcgd | Method::SimGd)) {
                    return Err(Error::Config("sweep.methods supports pcgd and simgd".into()));
                }
            }
            ExperimentKind::Tournament => {
                let t = self.tournament()?;
                self.env()?;
                if t.episodes == 0 {
                    return Err(Error::Config("tournament.episodes must be at least 1".into()));
                }
                if t.compositions.is_empty() {
                    return Err(Error::Config("tournament.compositions is empty".into()));
                }
            }
            ExperimentKind::Plot => {
                let p = self.plot()?;
                if p.inputs.is_empty() {
                    return Err(Error::Config("plot.inputs is empty".into()));
                }
                if p.window == Some(0) {
                    return Err(Error::Config("plot.window must be at least 1".into()));
                }
                if p.inputs.iter().any(|i| i.label.contains([',', '"', '\n'])) {
                    return Err(Error::Config("plot labels may not contain commas, quotes or newlines".into()));
                }
            }
        }
        Ok(())
    }
}

/// Read, parse and validate a config file.
pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    ExperimentConfig::from_toml_str(&text).map_err(|e| match e {
        Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL_BENCH: &str = r#"
[experiment]
kind = "bench"
epochs = 1000

[game]
kind = "four_player"

[optimizer]
method = "pcgd"
eta = 1.0
"#;

    #[test]
    fn minimal_bench_config_is_valid() {
        let cfg = ExperimentConfig::from_toml_str(MINIMAL_BENCH).unwrap();
        assert_eq!(cfg.kind(), ExperimentKind::Bench);
        assert_eq!(cfg.game, Some(GameConfig::FourPlayer));
        assert_eq!(cfg.optimizer().unwrap().eta, 1.0);
        assert_eq!(cfg.epochs().unwrap(), 1000);
    }

    #[test]
    fn negative_eta_rejected() {
        let text = MINIMAL_BENCH.replace("eta = 1.0", "eta = -1.0");
        let err = ExperimentConfig::from_toml_str(&text).unwrap_err().to_string();
        assert!(err.contains("eta"), "{err}");
    }

    #[test]
    fn unknown_keys_rejected_with_name_and_line() {
        let text = MINIMAL_BENCH.replace("eta = 1.0", "eta = 1.0\nmomentum = 0.9");
        let err = ExperimentConfig::from_toml_str(&text).unwrap_err().to_string();
        assert!(err.contains("momentum"), "{err}");
        assert!(err.contains("line"), "{err}");
        let text = "[experiment]\nkind = \"marl\"\nepochs = 1\n[env]\nkind = \"soccer\"\nwidht = 4\n";
        let err = ExperimentConfig::from_toml_str(text).unwrap_err().to_string();
        assert!(err.contains("widht"), "{err}");
    }

    #[test]
    fn missing_tables_reported() {
        let err = ExperimentConfig::from_toml_str("[experiment]\nkind = \"bench\"\nepochs = 3\n")
            .unwrap_err()
            .to_string();
        assert!(err.contains("[game]"), "{err}");
        let text = MINIMAL_BENCH.replace("epochs = 1000", "epochs = 0");
        assert!(ExperimentConfig::from_toml_str(&text).is_err());
    }

    #[test]
    fn round_trips_through_toml() {
        let cfg = ExperimentConfig::from_toml_str(MINIMAL_BENCH).unwrap();
        let back = ExperimentConfig::from_toml_str(&cfg.to_toml_string().unwrap()).unwrap();
        assert_eq!(cfg, back);
    }
}
