//! Training loops: benchmark games and multi-agent environments, with
//! metric logging, periodic checkpoints and resume.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::checkpoint::Checkpoint;
use super::config::{EnvConfig, ExperimentConfig, ExperimentKind, GameConfig, PolicyConfig};
use super::metrics::{MetricsWriter, METRICS_FILE};
use crate::autodiff::{MlpPolicy, PolicyHead};
use crate::bench::{bilinear_game, four_player_example, pairwise_zero_sum_quadratic, random_quadratic_polymatrix};
use crate::envs::{ActionSpace, Environment, Market, ScriptedMdp, Soccer};
use crate::error::{Error, Result};
use crate::game::{FlatParams, Game};
use crate::linalg;
use crate::marl::{derive_seed, PolicySet, RlGame};
use crate::optimizers::{Optimizer, StepState};

/// Environment variable overriding the root that relative output
/// directories are resolved against.
pub const OUTPUT_ROOT_ENV: &str = "PCGD_OUTPUT_ROOT";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const CONFIG_ECHO_FILE: &str = "config.toml";

/// Command-line overrides.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunOptions {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    /// Sampling threads; `0` or `1` runs on the calling thread.
    pub workers: usize,
    pub resume: Option<PathBuf>,
}

pub fn output_root() -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_ENV).map_or_else(|| PathBuf::from("."), PathBuf::from)
}

/// Resolve the output directory (`--out`, then the config, then
/// `runs/<name>`) against the output root and create it.
pub fn prepare_output_dir(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<PathBuf> {
    let rel = opts.out.clone().or_else(|| cfg.experiment.output_dir.clone()).unwrap_or_else(|| {
        PathBuf::from("runs").join(cfg.experiment.name.clone().unwrap_or_else(|| cfg.kind().name().to_string()))
    });
    let dir = if rel.is_absolute() { rel } else { output_root().join(rel) };
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

pub fn effective_seed(cfg: &ExperimentConfig, opts: &RunOptions) -> u64 {
    opts.seed.unwrap_or(cfg.experiment.seed)
}

/// Outcome of a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub output_dir: PathBuf,
    pub metrics_path: PathBuf,
    pub checkpoint_path: PathBuf,
    /// Optimizer steps completed, including those before a resume.
    pub steps: u64,
    pub final_params: Vec<f64>,
    pub final_theta_norm: f64,
    /// Sampling passes of a multi-agent run (0 for benchmark games).
    pub sampling_passes: u64,
    pub total_cg_iterations: u64,
    /// Set when the run stopped early on an inner-solve failure.
    pub halted: Option<String>,
}

/// Run a `bench` or `marl` experiment.
pub fn run_experiment(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<RunSummary> {
    cfg.validate()?;
    match cfg.kind() {
        ExperimentKind::Bench => run_bench(cfg, opts),
        ExperimentKind::Marl => run_marl(cfg, opts),
        other => Err(Error::Config(format!(
            "`run` handles bench and marl experiments, not {}",
            other.name()
        ))),
    }
}

/// Benchmark game and its descriptor.
pub fn build_game(cfg: &GameConfig) -> Result<(Box<dyn Game>, String)> {
    Ok(match cfg {
        GameConfig::Bilinear { gamma } => (Box::new(bilinear_game(*gamma)?), format!("bilinear(gamma={gamma:?})")),
        GameConfig::FourPlayer => (Box::new(four_player_example()), "four_player".to_string()),
        GameConfig::RandomQuadratic(f) => (
            Box::new(random_quadratic_polymatrix(f.game_seed, &f.dims, f.s_scale, f.a_scale)?),
            format!("random_quadratic{:?}(s={:?},a={:?},seed={})", f.dims, f.s_scale, f.a_scale, f.game_seed),
        ),
        GameConfig::PairwiseZeroSum(f) => (
            Box::new(pairwise_zero_sum_quadratic(f.game_seed, &f.dims, f.s_scale, f.a_scale)?),
            format!("pairwise_zero_sum{:?}(s={:?},a={:?},seed={})", f.dims, f.s_scale, f.a_scale, f.game_seed),
        ),
    })
}

/// Seeded random starting point of unit norm.
pub fn random_unit_start(d: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let n = linalg::norm(&v);
        if n > 0.0 {
            return v.iter().map(|x| x / n).collect();
        }
    }
}

/// Checkpointable state a game keeps outside the parameters.
trait AuxState {
    fn aux(&self) -> (u64, Vec<f64>);
    fn restore_aux(&self, passes: u64, state: &[f64]) -> Result<()>;
}

struct NoAux;

impl AuxState for NoAux {
    fn aux(&self) -> (u64, Vec<f64>) {
        (0, Vec::new())
    }

    fn restore_aux(&self, _: u64, state: &[f64]) -> Result<()> {
        if state.is_empty() {
            Ok(())
        } else {
            Err(Error::Checkpoint("unexpected baseline state for a benchmark game".into()))
        }
    }
}

impl<E: Environment> AuxState for RlGame<E> {
    fn aux(&self) -> (u64, Vec<f64>) {
        (self.sampling_passes(), self.baseline_state())
    }

    fn restore_aux(&self, passes: u64, state: &[f64]) -> Result<()> {
        self.restore(passes, state)
    }
}

fn run_bench(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<RunSummary> {
    let seed = effective_seed(cfg, opts);
    let (game, arch) = build_game(cfg.game()?)?;
    let partition = game.partition().clone();
    let start = match &cfg.experiment.initial {
        Some(v) => v.clone(),
        None => random_unit_start(partition.total(), derive_seed(seed, 0)),
    };
    let theta = FlatParams::new(partition, start)?;
    train(cfg, opts, game.as_ref(), &NoAux, theta, &format!("bench:{arch}"))
}

/// Input, hidden and output sizes of the policies for `env`.
pub fn build_policies<E: Environment>(env: &E, cfg: &PolicyConfig) -> Result<PolicySet> {
    let (out, head) = match env.action_space() {
        ActionSpace::Discrete(n) => (n, PolicyHead::Categorical),
        ActionSpace::Continuous => (1, PolicyHead::Gaussian { sigma: cfg.sigma }),
    };
    let mut sizes = vec![env.observation_dim()];
    sizes.extend(&cfg.hidden);
    sizes.push(out);
    let policies = (0..env.num_players())
        .map(|_| MlpPolicy::new(sizes.clone(), cfg.activation, head))
        .collect::<Result<Vec<_>>>()?;
    PolicySet::new(policies)
}

/// Code generic over the environment type, dispatched from an [`EnvConfig`].
pub trait EnvVisitor {
    type Output;
    fn visit<E: Environment + 'static>(self, env: E) -> Result<Self::Output>;
}

pub fn visit_env<V: EnvVisitor>(cfg: &EnvConfig, visitor: V) -> Result<V::Output> {
    match cfg {
        EnvConfig::Soccer(c) => visitor.visit(Soccer::new(c.clone())?),
        EnvConfig::Market(c) => visitor.visit(Market::new(c.clone())?),
        EnvConfig::Scripted(c) => visitor.visit(ScriptedMdp::new(c.preset.spec())?),
    }
}

struct MarlRun<'a> {
    cfg: &'a ExperimentConfig,
    opts: &'a RunOptions,
}

impl EnvVisitor for MarlRun<'_> {
    type Output = RunSummary;

    fn visit<E: Environment + 'static>(self, env: E) -> Result<RunSummary> {
        let seed = effective_seed(self.cfg, self.opts);
        let policies = build_policies(&env, &self.cfg.policy.clone().unwrap_or_default())?;
        let arch = format!("{}:{}", env.name(), policies.architecture());
        let theta = FlatParams::new(policies.partition().clone(), policies.init_params(derive_seed(seed, 1)))?;
        let game = RlGame::new(env, policies, self.cfg.marl()?.clone(), derive_seed(seed, 2), self.opts.workers)?;
        train(self.cfg, self.opts, &game, &game, theta, &arch)
    }
}

fn run_marl(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<RunSummary> {
    visit_env(cfg.env()?, MarlRun { cfg, opts })
}

fn train(
    cfg: &ExperimentConfig,
    opts: &RunOptions,
    game: &dyn Game,
    aux: &dyn AuxState,
    mut theta: FlatParams,
    arch: &str,
) -> Result<RunSummary> {
    let seed = effective_seed(cfg, opts);
    let epochs = cfg.epochs()?;
    let opt_cfg = cfg.optimizer()?.clone();
    let dir = prepare_output_dir(cfg, opts)?;
    let metrics_path = dir.join(METRICS_FILE);
    let checkpoint_path = dir.join(CHECKPOINT_FILE);
    let dims = theta.partition().dims().to_vec();
    let n = dims.len();

    let (mut state, mut writer, wall_offset) = match &opts.resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            ck.check_compatible(&dims, arch)?;
            if ck.method != opt_cfg.method.name() || ck.seed != seed {
                return Err(Error::Checkpoint(format!(
                    "checkpoint was written by {} with seed {}, the run uses {} with seed {seed}",
                    ck.method,
                    ck.seed,
                    opt_cfg.method.name()
                )));
            }
            theta = theta.with_values(ck.params)?;
            aux.restore_aux(ck.sampling_passes, &ck.baseline_state)?;
            let (w, wall) = MetricsWriter::resume(&metrics_path, n, ck.step)?;
            (StepState { previous_solution: ck.previous_solution, step: ck.step }, w, wall)
        }
        None => (StepState::default(), MetricsWriter::create(&metrics_path, n)?, 0.0),
    };
    std::fs::write(dir.join(CONFIG_ECHO_FILE), cfg.to_toml_string()?).map_err(|e| Error::io(&dir, e))?;

    let save = |theta: &FlatParams, state: &StepState| -> Result<()> {
        let (sampling_passes, baseline_state) = aux.aux();
        Checkpoint {
            dims: dims.clone(),
            architecture: arch.to_string(),
            method: opt_cfg.method.name().to_string(),
            seed,
            step: state.step,
            params: theta.values().to_vec(),
            previous_solution: state.previous_solution.clone(),
            baseline_state,
            sampling_passes,
        }
        .save(&checkpoint_path)
    };

    let clock = Instant::now();
    let mut total_cg = 0u64;
    let mut halted = None;
    let mut opt = Optimizer::with_state(opt_cfg.clone(), std::mem::take(&mut state))?;
    while opt.state().step < epochs {
        let (next, report) = opt.step(game, &theta)?;
        total_cg += report.cg_iterations() as u64;
        writer.write(&report, wall_offset + clock.elapsed().as_secs_f64() * 1e3)?;
        theta = next;
        let done = opt.state().step;
        let cg_failed = !report.cg_converged();
        if done % cfg.experiment.checkpoint_every == 0 || done == epochs || (cg_failed && cfg.experiment.halt_on_cg_failure) {
            save(&theta, opt.state())?;
        }
        if cg_failed && cfg.experiment.halt_on_cg_failure {
            halted = Some(format!(
                "inner solve stopped at relative residual {:e} on step {done}",
                report.cg_residual()
            ));
            break;
        }
    }
    // a resumed run that was already complete still leaves a checkpoint
    if !checkpoint_path.exists() {
        save(&theta, opt.state())?;
    }
    Ok(RunSummary {
        output_dir: dir,
        metrics_path,
        checkpoint_path,
        steps: opt.state().step,
        final_theta_norm: theta.norm(),
        final_params: theta.into_values(),
        sampling_passes: aux.aux().0,
        total_cg_iterations: total_cg,
        halted,
    })
}

/// Load the policy parameters of one player from a training checkpoint.
pub fn load_player_policy<E: Environment>(
    path: &Path,
    env: &E,
    policy: &PolicyConfig,
    player: usize,
) -> Result<(MlpPolicy, Vec<f64>)> {
    let set = build_policies(env, policy)?;
    let ck = Checkpoint::load(path)?;
    ck.check_compatible(set.partition().dims(), &format!("{}:{}", env.name(), set.architecture()))?;
    let range = set.partition().range(player)?;
    Ok((set.policies()[player].clone(), ck.params[range].to_vec()))
}
