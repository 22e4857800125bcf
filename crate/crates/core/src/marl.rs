//! Multi-agent policy-gradient harness: trajectory sampling, advantage
//! estimation, the score-function estimators of the simultaneous gradient
//! and of off-diagonal Hessian products, and an adapter exposing an RL
//! problem as a [`Game`].

use std::collections::BTreeMap;
use std::sync::Mutex;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use rayon::ThreadPool;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Action, Activation, MlpPolicy, PolicyHead, Tape};
use crate::envs::{Environment, ScriptedMdp, ScriptedMdpSpec};
use crate::error::{Error, Result};
use crate::game::{BlockPartition, Game};
use crate::linalg::DenseMatrix;

/// Independent, reproducible sub-seed number `index` of `master`.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut z = master ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Episodes longer than this are treated as an environment fault.
pub const MAX_EPISODE_STEPS: usize = 100_000;
/// Attempts per episode before a persistent fault becomes an error.
pub const MAX_EPISODE_ATTEMPTS: u64 = 8;

/// One policy per player; player `i` owns block `i` of the flat parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicySet {
    policies: Vec<MlpPolicy>,
    partition: BlockPartition,
}

impl PolicySet {
    pub fn new(policies: Vec<MlpPolicy>) -> Result<Self> {
        let partition = BlockPartition::new(policies.iter().map(|p| p.num_params()).collect())?;
        Ok(Self { policies, partition })
    }

    pub fn policies(&self) -> &[MlpPolicy] {
        &self.policies
    }

    pub fn partition(&self) -> &BlockPartition {
        &self.partition
    }

    pub fn len(&self) -> usize {
        self.policies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.policies.is_empty()
    }

    /// Fresh parameters for all players, drawn in player order.
    pub fn init_params(&self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.policies.iter().flat_map(|p| p.init_params(&mut rng)).collect()
    }

    fn block<'a>(&self, theta: &'a [f64], i: usize) -> &'a [f64] {
        let r = self.partition.range(i).expect("player index");
        &theta[r]
    }

    /// `;`-joined architecture descriptors.
    pub fn architecture(&self) -> String {
        self.policies.iter().map(|p| p.architecture()).collect::<Vec<_>>().join(";")
    }

    /// Check the policies fit an environment's observations and actions.
    pub fn check_env<E: Environment>(&self, env: &E) -> Result<()> {
        if self.policies.len() != env.num_players() {
            return Err(Error::DimensionMismatch {
                expected: env.num_players(),
                got: self.policies.len(),
            });
        }
        for p in &self.policies {
            if p.input_dim() != env.observation_dim() {
                return Err(Error::DimensionMismatch {
                    expected: env.observation_dim(),
                    got: p.input_dim(),
                });
            }
            let ok = match (env.action_space(), p.head()) {
                (crate::envs::ActionSpace::Discrete(n), PolicyHead::Categorical) => p.output_dim() == n,
                (crate::envs::ActionSpace::Continuous, PolicyHead::Gaussian { .. }) => true,
                _ => false,
            };
            if !ok {
                return Err(Error::InvalidArgument(format!(
                    "policy {} does not match the {} action space",
                    p.architecture(),
                    env.name()
                )));
            }
        }
        Ok(())
    }
}

/// One sampled episode. Per-step arrays are indexed `[t][player]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub observations: Vec<Vec<Vec<f64>>>,
    pub state_keys: Vec<Option<usize>>,
    pub actions: Vec<Vec<Action>>,
    pub log_probs: Vec<Vec<f64>>,
    pub rewards: Vec<Vec<f64>>,
    pub values: Vec<Vec<f64>>,
    /// Score vectors `∇ log π` of each player, flattened `T × dᵢ`.
    scores: Vec<Vec<f64>>,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    /// `∇_{θⁱ} log π_{θⁱ}(aⁱ_t | s_t)`.
    pub fn score(&self, player: usize, t: usize) -> &[f64] {
        let d = self.scores[player].len() / self.len();
        &self.scores[player][t * d..(t + 1) * d]
    }

    /// `Σ_t γᵗ rⁱ_t` per player.
    pub fn discounted_returns(&self, gamma: f64) -> Vec<f64> {
        let n = self.rewards.first().map_or(0, |r| r.len());
        let mut out = vec![0.0; n];
        let mut disc = 1.0;
        for r in &self.rewards {
            for (o, ri) in out.iter_mut().zip(r) {
                *o += disc * ri;
            }
            disc *= gamma;
        }
        out
    }
}

/// A batch of on-policy episodes.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryBuffer {
    pub episodes: Vec<Episode>,
    pub num_players: usize,
    /// Episodes discarded after an environment fault and sampled again.
    pub resampled: usize,
}

impl TrajectoryBuffer {
    pub fn total_steps(&self) -> usize {
        self.episodes.iter().map(Episode::len).sum()
    }

    pub fn mean_length(&self) -> f64 {
        self.total_steps() as f64 / self.episodes.len().max(1) as f64
    }
}

fn run_episode<E: Environment>(
    env: &E,
    policies: &PolicySet,
    theta: &[f64],
    seed: u64,
) -> Result<Episode> {
    let n = policies.len();
    let mut env = env.clone();
    env.reset(derive_seed(seed, 0))?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 1));
    let mut ep = Episode {
        observations: Vec::new(),
        state_keys: Vec::new(),
        actions: Vec::new(),
        log_probs: Vec::new(),
        rewards: Vec::new(),
        values: Vec::new(),
        scores: vec![Vec::new(); n],
    };
    loop {
        if ep.len() >= MAX_EPISODE_STEPS {
            return Err(Error::Environment(format!("episode exceeded {MAX_EPISODE_STEPS} steps")));
        }
        let obs = (0..n).map(|i| env.observe(i)).collect::<Result<Vec<_>>>()?;
        let mut acts = Vec::with_capacity(n);
        let mut lps = Vec::with_capacity(n);
        for (i, policy) in policies.policies.iter().enumerate() {
            let params = policies.block(theta, i);
            let a = policy.sample(params, &obs[i], &mut rng)?;
            let (lp, score) = policy.log_prob_and_score(params, &obs[i], a)?;
            ep.scores[i].extend_from_slice(&score);
            acts.push(a);
            lps.push(lp);
        }
        ep.state_keys.push(env.state_key());
        let out = env.step(&acts)?;
        if out.rewards.len() != n || out.rewards.iter().any(|r| !r.is_finite()) {
            return Err(Error::Environment("environment returned malformed rewards".into()));
        }
        ep.observations.push(obs);
        ep.actions.push(acts);
        ep.log_probs.push(lps);
        ep.rewards.push(out.rewards);
        ep.values.push(vec![0.0; n]);
        if out.done {
            return Ok(ep);
        }
    }
}

/// Run `f` on `pool` when given, otherwise on the calling thread.
fn on_pool<T: Send>(pool: Option<&ThreadPool>, f: impl FnOnce() -> T + Send) -> T {
    match pool {
        Some(p) => p.install(f),
        None => f(),
    }
}

/// Sample `batch` episodes. Episode `k` uses sub-seed `derive_seed(seed, k)`
/// and results are merged in episode order, so parallel and serial sampling
/// agree bit for bit. An environment fault discards the episode and samples
/// it again from the next attempt's sub-seed.
pub fn sample_trajectories<E: Environment>(
    env: &E,
    policies: &PolicySet,
    theta: &[f64],
    batch: usize,
    seed: u64,
    pool: Option<&ThreadPool>,
) -> Result<TrajectoryBuffer> {
    if batch == 0 {
        return Err(Error::InvalidArgument("batch must be at least 1".into()));
    }
    policies.partition().check(theta.len())?;
    policies.check_env(env)?;
    let one = |k: usize| -> Result<(Episode, usize)> {
        let base = derive_seed(seed, k as u64);
        let mut last = None;
        for attempt in 0..MAX_EPISODE_ATTEMPTS {
            match run_episode(env, policies, theta, derive_seed(base, attempt)) {
                Ok(ep) => return Ok((ep, attempt as usize)),
                Err(Error::Environment(msg)) => last = Some(msg),
                Err(e) => return Err(e),
            }
        }
        Err(Error::Environment(format!(
            "episode {k} failed {MAX_EPISODE_ATTEMPTS} times: {}",
            last.unwrap_or_default()
        )))
    };
    let results: Vec<Result<(Episode, usize)>> = match pool {
        Some(p) => p.install(|| (0..batch).into_par_iter().map(one).collect()),
        None => (0..batch).map(one).collect(),
    };
    let mut episodes = Vec::with_capacity(batch);
    let mut resampled = 0;
    for r in results {
        let (ep, faults) = r?;
        resampled += faults;
        episodes.push(ep);
    }
    Ok(TrajectoryBuffer {
        episodes,
        num_players: policies.len(),
        resampled,
    })
}

/// Per-player advantages and value targets, indexed `[episode][t][player]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdvantageTable {
    pub advantages: Vec<Vec<Vec<f64>>>,
    pub targets: Vec<Vec<Vec<f64>>>,
}

fn check_discounts(gamma: f64, lambda: f64) -> Result<()> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::InvalidArgument(format!("gamma must lie in (0, 1], got {gamma}")));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidArgument(format!("lambda must lie in [0, 1], got {lambda}")));
    }
    Ok(())
}

/// Generalized advantage estimation through the λ-return recursion
/// `G_t = r_t + γ((1−λ)V_{t+1} + λG_{t+1})`, `A_t = G_t − V_t`, with value
/// and return zero past the last step. With `λ = 1, γ = 1` this is the
/// return-to-go minus the baseline; with `λ = 0` the one-step TD residual.
pub fn gae_advantages(buffer: &TrajectoryBuffer, gamma: f64, lambda: f64) -> Result<AdvantageTable> {
    check_discounts(gamma, lambda)?;
    let n = buffer.num_players;
    let mut advantages = Vec::with_capacity(buffer.episodes.len());
    let mut targets = Vec::with_capacity(buffer.episodes.len());
    for ep in &buffer.episodes {
        let t_len = ep.len();
        let mut adv = vec![vec![0.0; n]; t_len];
        let mut ret = vec![vec![0.0; n]; t_len];
        for i in 0..n {
            let rewards: Vec<f64> = ep.rewards.iter().map(|r| r[i]).collect();
            let values: Vec<f64> = ep.values.iter().map(|v| v[i]).collect();
            let (a, g) = lambda_return_advantages(&rewards, &values, gamma, lambda);
            for t in 0..t_len {
                adv[t][i] = a[t];
                ret[t][i] = g[t];
            }
        }
        advantages.push(adv);
        targets.push(ret);
    }
    Ok(AdvantageTable { advantages, targets })
}

/// Advantages and λ-returns of one reward/value series (see
/// [`gae_advantages`]); the series ends after its last entry.
pub fn lambda_return_advantages(rewards: &[f64], values: &[f64], gamma: f64, lambda: f64) -> (Vec<f64>, Vec<f64>) {
    let t_len = rewards.len().min(values.len());
    let mut adv = vec![0.0; t_len];
    let mut ret = vec![0.0; t_len];
    let mut g_next = 0.0;
    let mut v_next = 0.0;
    for t in (0..t_len).rev() {
        let g = rewards[t] + gamma * ((1.0 - lambda) * v_next + lambda * g_next);
        ret[t] = g;
        adv[t] = g - values[t];
        g_next = g;
        v_next = values[t];
    }
    (adv, ret)
}

/// Discounted return-to-go `Σ_{l≥t} γ^{l−t} r_l`, indexed `[episode][t][player]`.
pub fn returns_to_go(buffer: &TrajectoryBuffer, gamma: f64) -> Vec<Vec<Vec<f64>>> {
    buffer
        .episodes
        .iter()
        .map(|ep| {
            let mut out = vec![vec![0.0; buffer.num_players]; ep.len()];
            let mut acc = vec![0.0; buffer.num_players];
            for t in (0..ep.len()).rev() {
                for i in 0..buffer.num_players {
                    acc[i] = ep.rewards[t][i] + gamma * acc[i];
                    out[t][i] = acc[i];
                }
            }
            out
        })
        .collect()
}

fn check_estimator_inputs(buffer: &TrajectoryBuffer, adv: &AdvantageTable, partition: &BlockPartition) -> Result<()> {
    if buffer.episodes.is_empty() {
        return Err(Error::InvalidArgument("empty trajectory buffer".into()));
    }
    if adv.advantages.len() != buffer.episodes.len() {
        return Err(Error::DimensionMismatch {
            expected: buffer.episodes.len(),
            got: adv.advantages.len(),
        });
    }
    if partition.num_players() != buffer.num_players {
        return Err(Error::DimensionMismatch {
            expected: buffer.num_players,
            got: partition.num_players(),
        });
    }
    Ok(())
}

/// Sum per-episode vectors in episode order and divide by the count.
fn ordered_mean(parts: Vec<Vec<f64>>, d: usize) -> Vec<f64> {
    let count = parts.len() as f64;
    let mut out = vec![0.0; d];
    for p in parts {
        for (o, x) in out.iter_mut().zip(&p) {
            *o += x;
        }
    }
    out.iter_mut().for_each(|x| *x /= count);
    out
}

fn add_scaled(dst: &mut [f64], w: f64, src: &[f64]) {
    if w != 0.0 {
        for (d, s) in dst.iter_mut().zip(src) {
            *d += w * s;
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Policy-gradient estimate of `∇_{θⁱ}Jⁱ` for every player: the sample
/// mean of `Σ_t γᵗ Aⁱ_t ∇ log π(aⁱ_t|s_t)`, i.e. the gradient of the
/// pseudo-objective `Σ_t γᵗ log π · A` with advantages held constant.
pub fn estimate_xi(
    buffer: &TrajectoryBuffer,
    adv: &AdvantageTable,
    partition: &BlockPartition,
    gamma: f64,
    pool: Option<&ThreadPool>,
) -> Result<Vec<f64>> {
    check_estimator_inputs(buffer, adv, partition)?;
    let d = partition.total();
    let per_episode = |(ep, a): (&Episode, &Vec<Vec<f64>>)| -> Vec<f64> {
        let mut out = vec![0.0; d];
        for i in 0..buffer.num_players {
            let r = partition.range(i).expect("player");
            let mut disc = 1.0;
            for t in 0..ep.len() {
                add_scaled(&mut out[r.clone()], disc * a[t][i], ep.score(i, t));
                disc *= gamma;
            }
        }
        out
    };
    let parts: Vec<Vec<f64>> = on_pool(pool, || {
        buffer
            .episodes
            .par_iter()
            .zip(adv.advantages.par_iter())
            .map(per_episode)
            .collect()
    });
    Ok(ordered_mean(parts, d))
}

/// `cʲ_t = ∇ log πʲ_t · vʲ` for every player and step.
fn contractions(ep: &Episode, partition: &BlockPartition, v: &[f64]) -> Vec<Vec<f64>> {
    (0..partition.num_players())
        .map(|j| {
            let vj = &v[partition.range(j).expect("player")];
            (0..ep.len()).map(|t| dot(ep.score(j, t), vj)).collect()
        })
        .collect()
}

/// Mixed-derivative estimate of `H_o·v` for the reward functions `Jⁱ`.
///
/// Block `i` is the sample mean of
/// `Σ_t γᵗ Aⁱ_t Σ_{j≠i} [gⁱ_t(gʲ_t·vʲ) + Gⁱ_{<t}(gʲ_t·vʲ) + gⁱ_t(Gʲ_{<t}·vʲ)]`
/// with `g` the per-step score and `G_{<t}` its prefix sum. Expanding the
/// prefix sums turns this into one weighted sum of stored score vectors per
/// player, so only first-order quantities are needed.
pub fn estimate_offdiag_hvp(
    buffer: &TrajectoryBuffer,
    adv: &AdvantageTable,
    partition: &BlockPartition,
    gamma: f64,
    v: &[f64],
    pool: Option<&ThreadPool>,
) -> Result<Vec<f64>> {
    check_estimator_inputs(buffer, adv, partition)?;
    partition.check(v.len())?;
    let n = buffer.num_players;
    let d = partition.total();
    let per_episode = |(ep, a): (&Episode, &Vec<Vec<f64>>)| -> Vec<f64> {
        let t_len = ep.len();
        let c = contractions(ep, partition, v);
        let total: Vec<f64> = (0..t_len).map(|t| (0..n).map(|j| c[j][t]).sum()).collect();
        let mut out = vec![0.0; d];
        for i in 0..n {
            let r = partition.range(i).expect("player");
            // s_t = Σ_{j≠i} cʲ_t and P_t = Σ_{l<t} s_l
            let s: Vec<f64> = (0..t_len).map(|t| total[t] - c[i][t]).collect();
            let mut disc = vec![1.0; t_len];
            for t in 1..t_len {
                disc[t] = disc[t - 1] * gamma;
            }
            let mut later = 0.0; // Σ_{t>l} γᵗ Aⁱ_t s_t
            let mut weights = vec![0.0; t_len];
            for l in (0..t_len).rev() {
                weights[l] = later;
                later += disc[l] * a[l][i] * s[l];
            }
            let mut prefix = 0.0;
            for l in 0..t_len {
                weights[l] += disc[l] * a[l][i] * (s[l] + prefix);
                prefix += s[l];
            }
            for (l, w) in weights.iter().enumerate() {
                add_scaled(&mut out[r.clone()], *w, ep.score(i, l));
            }
        }
        out
    };
    let parts: Vec<Vec<f64>> = on_pool(pool, || {
        buffer
            .episodes
            .par_iter()
            .zip(adv.advantages.par_iter())
            .map(per_episode)
            .collect()
    });
    Ok(ordered_mean(parts, d))
}

/// Transposed product `H_oᵀ·v` with the same estimator: block `j` collects
/// `(∇_{ji}Jⁱ)ᵀ vⁱ` over `i ≠ j`, each weighted by player `i`'s advantage.
pub fn estimate_offdiag_hvp_transpose(
    buffer: &TrajectoryBuffer,
    adv: &AdvantageTable,
    partition: &BlockPartition,
    gamma: f64,
    v: &[f64],
    pool: Option<&ThreadPool>,
) -> Result<Vec<f64>> {
    check_estimator_inputs(buffer, adv, partition)?;
    partition.check(v.len())?;
    let n = buffer.num_players;
    let d = partition.total();
    let per_episode = |(ep, a): (&Episode, &Vec<Vec<f64>>)| -> Vec<f64> {
        let t_len = ep.len();
        let c = contractions(ep, partition, v);
        // prefix sums Cⁱ_{<t}
        let prefix: Vec<Vec<f64>> = c
            .iter()
            .map(|ci| {
                let mut acc = 0.0;
                ci.iter()
                    .map(|x| {
                        let p = acc;
                        acc += x;
                        p
                    })
                    .collect()
            })
            .collect();
        let mut disc = vec![1.0; t_len];
        for t in 1..t_len {
            disc[t] = disc[t - 1] * gamma;
        }
        let mut out = vec![0.0; d];
        for j in 0..n {
            let r = partition.range(j).expect("player");
            // α_t = Σ_{i≠j} Aⁱ_t (cⁱ_t + Cⁱ_{<t}),  β_t = Σ_{i≠j} Aⁱ_t cⁱ_t
            let alpha: Vec<f64> = (0..t_len)
                .map(|t| (0..n).filter(|&i| i != j).map(|i| a[t][i] * (c[i][t] + prefix[i][t])).sum())
                .collect();
            let beta: Vec<f64> = (0..t_len)
                .map(|t| (0..n).filter(|&i| i != j).map(|i| a[t][i] * c[i][t]).sum())
                .collect();
            let mut later = 0.0;
            for l in (0..t_len).rev() {
                let w = disc[l] * alpha[l] + later;
                later += disc[l] * beta[l];
                add_scaled(&mut out[r.clone()], w, ep.score(j, l));
            }
        }
        out
    };
    let parts: Vec<Vec<f64>> = on_pool(pool, || {
        buffer
            .episodes
            .par_iter()
            .zip(adv.advantages.par_iter())
            .map(per_episode)
            .collect()
    });
    Ok(ordered_mean(parts, d))
}

// ------------------------------------------------------------ enumeration --

/// Cap on the number of trajectories an exact oracle may enumerate.
pub const ENUMERATION_CAP: usize = 10_000;
const ENUMERATION_FD_STEP: f64 = 1e-5;

/// Exact expected discounted returns, gradients and game Hessian of a
/// scripted Markov game.
#[derive(Debug, Clone, PartialEq)]
pub struct EnumerationOracle {
    pub returns: Vec<f64>,
    /// Block `i` is `∇_{θⁱ}Jⁱ`.
    pub xi: Vec<f64>,
    /// Row block `i` holds `∇_{θⁱ}∇_θ Jⁱ`.
    pub hessian: DenseMatrix,
}

impl EnumerationOracle {
    /// `H_o·v` from the exact Hessian.
    pub fn offdiag_hvp(&self, partition: &BlockPartition, v: &[f64]) -> Result<Vec<f64>> {
        let (_, _, _, ho) = crate::analysis::decompose(&self.hessian, partition)?;
        ho.matvec(v)
    }

    pub fn offdiag_hvp_transpose(&self, partition: &BlockPartition, v: &[f64]) -> Result<Vec<f64>> {
        let (_, _, _, ho) = crate::analysis::decompose(&self.hessian, partition)?;
        ho.transpose_matvec(v)
    }
}

/// Number of distinct trajectories of a scripted game.
pub fn trajectory_count(spec: &ScriptedMdpSpec) -> usize {
    let per_step = spec.num_states.saturating_mul(spec.joint_actions());
    (0..spec.horizon).fold(spec.num_states, |acc, _| acc.saturating_mul(per_step))
}

/// `Jⁱ(θ) = Σ_τ P(τ; θ) Σ_t γᵗ rⁱ_t` by summing over every trajectory.
/// Action probabilities come from the plain (tape-free) network forward.
pub fn exact_returns(spec: &ScriptedMdpSpec, policies: &PolicySet, theta: &[f64], gamma: f64) -> Result<Vec<f64>> {
    let count = trajectory_count(spec);
    if count > ENUMERATION_CAP {
        return Err(Error::CapExceeded {
            what: "enumerated trajectories",
            size: count,
            cap: ENUMERATION_CAP,
        });
    }
    let mdp = ScriptedMdp::new(spec.clone())?;
    policies.check_env(&mdp)?;
    policies.partition().check(theta.len())?;
    let n = spec.num_players;
    // action probabilities per (t, state, player)
    let mut probs = vec![vec![Vec::new(); spec.num_states]; spec.horizon];
    for (t, per_t) in probs.iter_mut().enumerate() {
        for (s, per_s) in per_t.iter_mut().enumerate() {
            let obs = mdp.observation_of(s, t);
            *per_s = (0..n)
                .map(|i| policies.policies[i].probabilities(policies.block(theta, i), &obs))
                .collect::<Result<Vec<_>>>()?;
        }
    }
    let mut total = vec![0.0; n];
    #[allow(clippy::too_many_arguments)]
    fn walk(
        spec: &ScriptedMdpSpec,
        probs: &[Vec<Vec<Vec<f64>>>],
        gamma: f64,
        s: usize,
        t: usize,
        p: f64,
        acc: &mut Vec<f64>,
        total: &mut [f64],
    ) {
        if t == spec.horizon {
            for (tot, a) in total.iter_mut().zip(acc.iter()) {
                *tot += p * a;
            }
            return;
        }
        let n = spec.num_players;
        let disc = gamma.powi(t as i32);
        let mut acts = vec![0; n];
        for j in 0..spec.joint_actions() {
            let mut rem = j;
            let mut pa = 1.0;
            for (i, a) in acts.iter_mut().enumerate() {
                *a = rem % spec.num_actions;
                rem /= spec.num_actions;
                pa *= probs[t][s][i][*a];
            }
            for (x, r) in acc.iter_mut().zip(&spec.rewards[s][j]) {
                *x += disc * r;
            }
            for (s2, &ps) in spec.transitions[s][j].iter().enumerate() {
                if ps > 0.0 {
                    walk(spec, probs, gamma, s2, t + 1, p * pa * ps, acc, total);
                }
            }
            for (x, r) in acc.iter_mut().zip(&spec.rewards[s][j]) {
                *x -= disc * r;
            }
        }
    }
    for (s0, &p0) in spec.initial.iter().enumerate() {
        if p0 > 0.0 {
            let mut acc = vec![0.0; n];
            walk(spec, &probs, gamma, s0, 0, p0, &mut acc, &mut total);
        }
    }
    Ok(total)
}

/// Exact returns plus `ξ` and `H` by central finite differences
/// (step `1e-5`) of the enumerated returns.
pub fn exact_gradients_by_enumeration(
    spec: &ScriptedMdpSpec,
    policies: &PolicySet,
    theta: &[f64],
    gamma: f64,
) -> Result<EnumerationOracle> {
    let returns = exact_returns(spec, policies, theta, gamma)?;
    let p = policies.partition();
    let d = p.total();
    let h = ENUMERATION_FD_STEP;
    let eval = |shifts: &[(usize, f64)]| -> Result<Vec<f64>> {
        let mut t = theta.to_vec();
        for &(k, dx) in shifts {
            t[k] += dx;
        }
        exact_returns(spec, policies, &t, gamma)
    };
    let mut xi = vec![0.0; d];
    for (k, x) in xi.iter_mut().enumerate() {
        let i = p.owner(k).expect("in range");
        *x = (eval(&[(k, h)])?[i] - eval(&[(k, -h)])?[i]) / (2.0 * h);
    }
    let mut hessian = DenseMatrix::zeros(d, d);
    for r in 0..d {
        let i = p.owner(r).expect("in range");
        for c in 0..d {
            let pp = eval(&[(r, h), (c, h)])?[i];
            let pm = eval(&[(r, h), (c, -h)])?[i];
            let mp = eval(&[(r, -h), (c, h)])?[i];
            let mm = eval(&[(r, -h), (c, -h)])?[i];
            hessian[(r, c)] = (pp - pm - mp + mm) / (4.0 * h * h);
        }
    }
    Ok(EnumerationOracle { returns, xi, hessian })
}

// -------------------------------------------------------------- baselines --

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaselineKind {
    /// `V ≡ 0`.
    None,
    /// Mean observed return per discrete state, from earlier batches.
    Tabular,
    /// Small per-player value network fitted by least squares.
    Mlp,
}

/// Hidden width of the value networks.
pub const BASELINE_HIDDEN: usize = 32;
pub const BASELINE_LR: f64 = 1e-3;
pub const BASELINE_EPOCHS: usize = 5;

/// Independent value baselines, one per player.
#[derive(Debug, Clone, PartialEq)]
pub struct Baselines {
    kind: BaselineKind,
    num_players: usize,
    tables: Vec<BTreeMap<usize, (f64, f64)>>,
    net: Option<MlpPolicy>,
    net_params: Vec<Vec<f64>>,
}

impl Baselines {
    pub fn new(kind: BaselineKind, num_players: usize, obs_dim: usize, seed: u64) -> Result<Self> {
        let (net, net_params) = if kind == BaselineKind::Mlp {
            let net = MlpPolicy::new(vec![obs_dim, BASELINE_HIDDEN, 1], Activation::Tanh, PolicyHead::Categorical)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let params = (0..num_players).map(|_| net.init_params(&mut rng)).collect();
            (Some(net), params)
        } else {
            (None, Vec::new())
        };
        Ok(Self {
            kind,
            num_players,
            tables: vec![BTreeMap::new(); num_players],
            net,
            net_params,
        })
    }

    pub fn kind(&self) -> BaselineKind {
        self.kind
    }

    /// Fill `values` of every episode.
    pub fn assign_values(&self, buffer: &mut TrajectoryBuffer) -> Result<()> {
        for ep in &mut buffer.episodes {
            for t in 0..ep.len() {
                for i in 0..self.num_players {
                    ep.values[t][i] = match self.kind {
                        BaselineKind::None => 0.0,
                        BaselineKind::Tabular => {
                            let key = ep.state_keys[t].ok_or_else(|| {
                                Error::Unsupported("tabular baseline needs a discrete state key".into())
                            })?;
                            self.tables[i].get(&key).map_or(0.0, |(s, c)| s / c)
                        }
                        BaselineKind::Mlp => {
                            let net = self.net.as_ref().expect("mlp baseline");
                            net.forward(&self.net_params[i], &ep.observations[t][i])?[0]
                        }
                    };
                }
            }
        }
        Ok(())
    }

    /// Fit to the observed returns `targets[episode][t][player]`.
    pub fn update(&mut self, buffer: &TrajectoryBuffer, targets: &[Vec<Vec<f64>>]) -> Result<()> {
        match self.kind {
            BaselineKind::None => {}
            BaselineKind::Tabular => {
                for (ep, tg) in buffer.episodes.iter().zip(targets) {
                    for t in 0..ep.len() {
                        let Some(key) = ep.state_keys[t] else {
                            return Err(Error::Unsupported("tabular baseline needs a discrete state key".into()));
                        };
                        for i in 0..self.num_players {
                            let e = self.tables[i].entry(key).or_insert((0.0, 0.0));
                            e.0 += tg[t][i];
                            e.1 += 1.0;
                        }
                    }
                }
            }
            BaselineKind::Mlp => {
                let net = self.net.as_ref().expect("mlp baseline");
                let samples = buffer.total_steps() as f64;
                for i in 0..self.num_players {
                    for _ in 0..BASELINE_EPOCHS {
                        let mut grad = vec![0.0; net.num_params()];
                        for (ep, tg) in buffer.episodes.iter().zip(targets) {
                            for t in 0..ep.len() {
                                let mut tape = Tape::with_params(&self.net_params[i]);
                                let out = net.forward_tape(&mut tape, 0, &ep.observations[t][i])?;
                                let target = tape.constant(vec![tg[t][i]]);
                                let diff = tape.sub(out, target)?;
                                let sq = tape.mul(diff, diff)?;
                                let half = tape.scale(sq, 0.5)?;
                                let g = tape.backward(half)?;
                                add_scaled(&mut grad, 1.0, &g);
                            }
                        }
                        for (p, g) in self.net_params[i].iter_mut().zip(&grad) {
                            *p -= BASELINE_LR * g / samples;
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Flat serialization for checkpoints.
    pub fn state(&self) -> Vec<f64> {
        match self.kind {
            BaselineKind::None => Vec::new(),
            BaselineKind::Tabular => {
                let mut out = Vec::new();
                for table in &self.tables {
                    out.push(table.len() as f64);
                    for (&k, &(s, c)) in table {
                        out.extend([k as f64, s, c]);
                    }
                }
                out
            }
            BaselineKind::Mlp => self.net_params.concat(),
        }
    }

    pub fn load_state(&mut self, state: &[f64]) -> Result<()> {
        let bad = || Error::Checkpoint("baseline state does not match the configured baseline".into());
        match self.kind {
            BaselineKind::None => {
                if !state.is_empty() {
                    return Err(bad());
                }
            }
            BaselineKind::Tabular => {
                let mut it = state.iter();
                let mut tables = Vec::with_capacity(self.num_players);
                for _ in 0..self.num_players {
                    let len = *it.next().ok_or_else(bad)? as usize;
                    let mut table = BTreeMap::new();
                    for _ in 0..len {
                        let k = *it.next().ok_or_else(bad)? as usize;
                        let s = *it.next().ok_or_else(bad)?;
                        let c = *it.next().ok_or_else(bad)?;
                        table.insert(k, (s, c));
                    }
                    tables.push(table);
                }
                if it.next().is_some() {
                    return Err(bad());
                }
                self.tables = tables;
            }
            BaselineKind::Mlp => {
                let per = self.net.as_ref().expect("mlp baseline").num_params();
                if state.len() != per * self.num_players {
                    return Err(bad());
                }
                self.net_params = state.chunks(per).map(|c| c.to_vec()).collect();
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------- adapter --

fn default_gamma() -> f64 {
    0.99
}

fn default_lambda() -> f64 {
    0.95
}

fn default_baseline() -> BaselineKind {
    BaselineKind::None
}

/// Sampling and estimation settings of an RL game.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarlSettings {
    pub batch: usize,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_baseline")]
    pub baseline: BaselineKind,
}

impl MarlSettings {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::InvalidArgument("batch must be at least 1".into()));
        }
        check_discounts(self.gamma, self.lambda)
    }
}

/// Summary of the latest sampling pass.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PassStats {
    pub mean_length: f64,
    pub mean_returns: Vec<f64>,
    pub resampled: usize,
}

struct Cache {
    theta: Vec<f64>,
    buffer: TrajectoryBuffer,
    adv: AdvantageTable,
    losses: Vec<f64>,
}

struct Inner {
    cache: Option<Cache>,
    passes: u64,
    baselines: Baselines,
    stats: PassStats,
}

/// An RL problem seen as a differentiable game with losses `−Jⁱ`.
///
/// The first oracle call at a new `θ` samples one batch (pass `k` uses seed
/// `derive_seed(master_seed, k)`); every other oracle call at the same `θ`
/// reuses it, so a PCGD step costs one sampling pass however many CG
/// iterations it takes.
pub struct RlGame<E: Environment> {
    env: E,
    policies: PolicySet,
    settings: MarlSettings,
    master_seed: u64,
    pool: Option<ThreadPool>,
    zero_interactions: bool,
    inner: Mutex<Inner>,
}

impl<E: Environment> RlGame<E> {
    pub fn new(env: E, policies: PolicySet, settings: MarlSettings, master_seed: u64, workers: usize) -> Result<Self> {
        settings.validate()?;
        policies.check_env(&env)?;
        if settings.baseline == BaselineKind::Tabular && env.state_key().is_none() {
            return Err(Error::InvalidArgument(format!(
                "the {} environment has no discrete states for a tabular baseline",
                env.name()
            )));
        }
        let pool = if workers > 1 {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(workers)
                    .build()
                    .map_err(|e| Error::InvalidArgument(format!("worker pool: {e}")))?,
            )
        } else {
            None
        };
        let baselines = Baselines::new(
            settings.baseline,
            policies.len(),
            env.observation_dim(),
            derive_seed(master_seed, u64::MAX),
        )?;
        Ok(Self {
            env,
            policies,
            settings,
            master_seed,
            pool,
            zero_interactions: false,
            inner: Mutex::new(Inner {
                cache: None,
                passes: 0,
                baselines,
                stats: PassStats::default(),
            }),
        })
    }

    /// Report `H_o = 0`, turning PCGD into plain policy-gradient steps.
    pub fn with_zero_interactions(mut self, on: bool) -> Self {
        self.zero_interactions = on;
        self
    }

    pub fn policies(&self) -> &PolicySet {
        &self.policies
    }

    pub fn settings(&self) -> &MarlSettings {
        &self.settings
    }

    pub fn env(&self) -> &E {
        &self.env
    }

    /// Sampling passes performed so far.
    pub fn sampling_passes(&self) -> u64 {
        self.inner.lock().expect("adapter lock").passes
    }

    pub fn last_stats(&self) -> PassStats {
        self.inner.lock().expect("adapter lock").stats.clone()
    }

    pub fn baseline_state(&self) -> Vec<f64> {
        self.inner.lock().expect("adapter lock").baselines.state()
    }

    /// Restore the pass counter and baselines from a checkpoint.
    pub fn restore(&self, passes: u64, baseline_state: &[f64]) -> Result<()> {
        let mut inner = self.inner.lock().expect("adapter lock");
        inner.baselines.load_state(baseline_state)?;
        inner.passes = passes;
        inner.cache = None;
        Ok(())
    }

    fn with_cache<T>(&self, theta: &[f64], f: impl FnOnce(&Cache, Option<&ThreadPool>) -> Result<T>) -> Result<T> {
        self.policies.partition().check(theta.len())?;
        let mut inner = self.inner.lock().expect("adapter lock");
        let fresh = inner.cache.as_ref().is_some_and(|c| c.theta == theta);
        if !fresh {
            let seed = derive_seed(self.master_seed, inner.passes);
            let mut buffer =
                sample_trajectories(&self.env, &self.policies, theta, self.settings.batch, seed, self.pool.as_ref())?;
            inner.passes += 1;
            inner.baselines.assign_values(&mut buffer)?;
            let adv = gae_advantages(&buffer, self.settings.gamma, self.settings.lambda)?;
            let rtg = returns_to_go(&buffer, self.settings.gamma);
            inner.baselines.update(&buffer, &rtg)?;
            let n = self.policies.len();
            let mut mean_returns = vec![0.0; n];
            for ep in &buffer.episodes {
                for (m, r) in mean_returns.iter_mut().zip(ep.discounted_returns(self.settings.gamma)) {
                    *m += r;
                }
            }
            let count = buffer.episodes.len() as f64;
            mean_returns.iter_mut().for_each(|m| *m /= count);
            inner.stats = PassStats {
                mean_length: buffer.mean_length(),
                mean_returns: mean_returns.clone(),
                resampled: buffer.resampled,
            };
            inner.cache = Some(Cache {
                theta: theta.to_vec(),
                buffer,
                adv,
                losses: mean_returns.iter().map(|r| -r).collect(),
            });
        }
        f(inner.cache.as_ref().expect("cache filled"), self.pool.as_ref())
    }
}

fn negate(mut v: Vec<f64>) -> Vec<f64> {
    v.iter_mut().for_each(|x| *x = -*x);
    v
}

impl<E: Environment> Game for RlGame<E> {
    fn partition(&self) -> &BlockPartition {
        self.policies.partition()
    }

    fn losses(&self, theta: &[f64]) -> Result<Vec<f64>> {
        self.with_cache(theta, |c, _| Ok(c.losses.clone()))
    }

    fn gradient(&self, theta: &[f64]) -> Result<Vec<f64>> {
        let p = self.policies.partition();
        let g = self.settings.gamma;
        self.with_cache(theta, |c, pool| estimate_xi(&c.buffer, &c.adv, p, g, pool).map(negate))
    }

    fn offdiag_hvp(&self, theta: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        let p = self.policies.partition();
        p.check(v.len())?;
        if self.zero_interactions {
            return self.with_cache(theta, |_, _| Ok(vec![0.0; v.len()]));
        }
        let g = self.settings.gamma;
        self.with_cache(theta, |c, pool| estimate_offdiag_hvp(&c.buffer, &c.adv, p, g, v, pool).map(negate))
    }

    fn offdiag_hvp_transpose(&self, theta: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        let p = self.policies.partition();
        p.check(v.len())?;
        if self.zero_interactions {
            return self.with_cache(theta, |_, _| Ok(vec![0.0; v.len()]));
        }
        let g = self.settings.gamma;
        self.with_cache(theta, |c, pool| {
            estimate_offdiag_hvp_transpose(&c.buffer, &c.adv, p, g, v, pool).map(negate)
        })
    }

    fn is_pure(&self) -> bool {
        false
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{Market, MarketConfig, Soccer, SoccerConfig, StepOutcome};
    use crate::game::FlatParams;
    use crate::optimizers::{Method, Optimizer, OptimizerConfig};

    fn scripted_policies(spec: &ScriptedMdpSpec, hidden: bool) -> PolicySet {
        let obs = spec.num_states + spec.horizon;
        let sizes = if hidden { vec![obs, 3, spec.num_actions] } else { vec![obs, spec.num_actions] };
        PolicySet::new(
            (0..spec.num_players)
                .map(|_| MlpPolicy::new(sizes.clone(), Activation::Tanh, PolicyHead::Categorical).unwrap())
                .collect(),
        )
        .unwrap()
    }

    fn buffer_from_rewards(rewards: Vec<Vec<f64>>, values: Vec<Vec<f64>>) -> TrajectoryBuffer {
        let t = rewards.len();
        let n = rewards[0].len();
        TrajectoryBuffer {
            episodes: vec![Episode {
                observations: vec![vec![vec![]; n]; t],
                state_keys: vec![None; t],
                actions: vec![vec![Action::Discrete(0); n]; t],
                log_probs: vec![vec![0.0; n]; t],
                rewards,
                values,
                scores: vec![vec![0.0; t]; n],
            }],
            num_players: n,
            resampled: 0,
        }
    }

    #[test]
    fn seeds_are_distinct_and_stable() {
        assert_eq!(derive_seed(1, 2), derive_seed(1, 2));
        assert_ne!(derive_seed(1, 2), derive_seed(1, 3));
        assert_ne!(derive_seed(1, 2), derive_seed(2, 2));
    }

    #[test]
    fn scripted_buffer_matches_script() {
        let spec = ScriptedMdpSpec {
            num_states: 1,
            num_players: 1,
            num_actions: 1,
            horizon: 3,
            initial: vec![1.0],
            rewards: vec![vec![vec![2.0]]],
            transitions: vec![vec![vec![1.0]]],
        };
        let env = ScriptedMdp::new(spec.clone()).unwrap();
        let pol = scripted_policies(&spec, false);
        let theta = pol.init_params(0);
        let buf = sample_trajectories(&env, &pol, &theta, 4, 9, None).unwrap();
        for ep in &buf.episodes {
            assert_eq!(ep.len(), 3);
            assert_eq!(ep.rewards, vec![vec![2.0]; 3]);
            // a single action has log-probability 0 and zero score
            assert!(ep.log_probs.iter().all(|l| l[0] == 0.0));
        }
    }

    #[test]
    fn sampling_is_deterministic_across_workers() {
        let env = Soccer::new(SoccerConfig { width: 4, height: 4, step_cap: 30, ..SoccerConfig::default() }).unwrap();
        let pol = PolicySet::new(
            (0..4)
                .map(|_| MlpPolicy::new(vec![56, 8, 5], Activation::Tanh, PolicyHead::Categorical).unwrap())
                .collect(),
        )
        .unwrap();
        let theta = pol.init_params(1);
        let a = sample_trajectories(&env, &pol, &theta, 6, 77, None).unwrap();
        let b = sample_trajectories(&env, &pol, &theta, 6, 77, None).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let c = sample_trajectories(&env, &pol, &theta, 6, 77, Some(&pool)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, c);
    }

    #[derive(Clone)]
    struct Flaky(ScriptedMdp, bool);

    impl Environment for Flaky {
        fn num_players(&self) -> usize {
            self.0.num_players()
        }
        fn observation_dim(&self) -> usize {
            self.0.observation_dim()
        }
        fn action_space(&self) -> crate::envs::ActionSpace {
            self.0.action_space()
        }
        fn reset(&mut self, seed: u64) -> Result<()> {
            self.1 = seed.is_multiple_of(3);
            self.0.reset(seed)
        }
        fn observe(&self, p: usize) -> Result<Vec<f64>> {
            self.0.observe(p)
        }
        fn step(&mut self, a: &[Action]) -> Result<StepOutcome> {
            if self.1 {
                return Err(Error::Environment("injected fault".into()));
            }
            self.0.step(a)
        }
        fn name(&self) -> &'static str {
            "flaky"
        }
    }

    #[test]
    fn faulty_episodes_are_resampled() {
        let spec = ScriptedMdpSpec::two_state_game();
        let env = Flaky(ScriptedMdp::new(spec.clone()).unwrap(), false);
        let pol = scripted_policies(&spec, false);
        let theta = pol.init_params(0);
        let buf = sample_trajectories(&env, &pol, &theta, 60, 5, None).unwrap();
        assert_eq!(buf.episodes.len(), 60);
        assert!(buf.resampled > 0);
    }

    #[test]
    fn gae_exact_cases() {
        let rewards = vec![vec![1.0], vec![-2.5], vec![0.75], vec![3.0]];
        let values = vec![vec![0.3], vec![-1.0], vec![2.0], vec![0.1]];
        let buf = buffer_from_rewards(rewards.clone(), values.clone());
        let adv = gae_advantages(&buf, 1.0, 1.0).unwrap();
        let mut rtg = 0.0;
        for t in (0..4).rev() {
            rtg += rewards[t][0];
            assert_eq!(adv.advantages[0][t][0], rtg - values[t][0]);
        }
        let gamma = 0.9;
        let adv = gae_advantages(&buf, gamma, 0.0).unwrap();
        for t in 0..4 {
            let v_next = if t + 1 < 4 { values[t + 1][0] } else { 0.0 };
            assert_eq!(adv.advantages[0][t][0], rewards[t][0] + gamma * v_next - values[t][0]);
        }
        let one = buffer_from_rewards(vec![vec![5.0]], vec![vec![0.0]]);
        assert_eq!(gae_advantages(&one, 0.5, 0.7).unwrap().advantages[0][0][0], 5.0);
        assert!(gae_advantages(&one, 0.0, 0.5).is_err());
    }

    #[test]
    fn gae_matches_td_recursion() {
        let rewards = vec![vec![1.0], vec![0.5], vec![-1.0]];
        let values = vec![vec![0.2], vec![0.4], vec![-0.3]];
        let (g, l) = (0.9, 0.7);
        let adv = gae_advantages(&buffer_from_rewards(rewards.clone(), values.clone()), g, l).unwrap();
        let mut a_next = 0.0;
        for t in (0..3).rev() {
            let v_next = if t + 1 < 3 { values[t + 1][0] } else { 0.0 };
            let delta = rewards[t][0] + g * v_next - values[t][0];
            let a = delta + g * l * a_next;
            assert!((adv.advantages[0][t][0] - a).abs() < 1e-14);
            a_next = a;
        }
    }

    #[test]
    fn one_step_bandit_estimators_by_hand() {
        // single step, two players, two actions: the history terms vanish
        let spec = ScriptedMdpSpec::matching_pennies();
        let env = ScriptedMdp::new(spec.clone()).unwrap();
        let pol = scripted_policies(&spec, false);
        let theta = pol.init_params(3);
        let mut buf = sample_trajectories(&env, &pol, &theta, 1, 0, None).unwrap();
        Baselines::new(BaselineKind::None, 2, 2, 0).unwrap().assign_values(&mut buf).unwrap();
        let adv = gae_advantages(&buf, 1.0, 1.0).unwrap();
        let ep = &buf.episodes[0];
        let p = pol.partition();
        let xi = estimate_xi(&buf, &adv, p, 1.0, None).unwrap();
        for i in 0..2 {
            let expect: Vec<f64> = ep.score(i, 0).iter().map(|g| g * ep.rewards[0][i]).collect();
            assert_eq!(&xi[p.range(i).unwrap()], expect.as_slice());
        }
        let v: Vec<f64> = (0..p.total()).map(|k| (k as f64 * 0.37).sin()).collect();
        let hv = estimate_offdiag_hvp(&buf, &adv, p, 1.0, &v, None).unwrap();
        for (i, j) in [(0, 1), (1, 0)] {
            let c = dot(ep.score(j, 0), &v[p.range(j).unwrap()]);
            let expect: Vec<f64> = ep.score(i, 0).iter().map(|g| g * c * ep.rewards[0][i]).collect();
            let got = &hv[p.range(i).unwrap()];
            for (a, b) in got.iter().zip(&expect) {
                assert!((a - b).abs() < 1e-15);
            }
        }
        assert!(estimate_offdiag_hvp(&buf, &adv, p, 1.0, &vec![0.0; p.total()], None)
            .unwrap()
            .iter()
            .all(|&x| x == 0.0));
        let zero_adv = AdvantageTable {
            advantages: vec![vec![vec![0.0; 2]]],
            targets: adv.targets.clone(),
        };
        assert!(estimate_xi(&buf, &zero_adv, p, 1.0, None).unwrap().iter().all(|&x| x == 0.0));
    }

    /// `⟨u, H_o v⟩ = ⟨H_oᵀ u, v⟩` holds sample by sample.
    #[test]
    fn transpose_estimator_is_adjoint() {
        let spec = ScriptedMdpSpec::two_state_game();
        let env = ScriptedMdp::new(spec.clone()).unwrap();
        let pol = scripted_policies(&spec, true);
        let theta = pol.init_params(5);
        let buf = sample_trajectories(&env, &pol, &theta, 50, 1, None).unwrap();
        let adv = gae_advantages(&buf, 0.9, 1.0).unwrap();
        let p = pol.partition();
        let u: Vec<f64> = (0..p.total()).map(|k| (k as f64 * 1.3).cos()).collect();
        let v: Vec<f64> = (0..p.total()).map(|k| (k as f64 * 0.7).sin()).collect();
        let hv = estimate_offdiag_hvp(&buf, &adv, p, 0.9, &v, None).unwrap();
        let htu = estimate_offdiag_hvp_transpose(&buf, &adv, p, 0.9, &u, None).unwrap();
        let (a, b) = (dot(&u, &hv), dot(&htu, &v));
        assert!((a - b).abs() < 1e-12 * (1.0 + a.abs()), "{a} vs {b}");
    }

    #[test]
    fn enumeration_closed_form_bandit() {
        // one player, two actions with rewards 3 and 1: J = 3π₀ + π₁
        let spec = ScriptedMdpSpec::bandit(1, 2, vec![vec![3.0], vec![1.0]]).unwrap();
        let pol = scripted_policies(&spec, false);
        let theta = pol.init_params(2);
        let or = exact_gradients_by_enumeration(&spec, &pol, &theta, 1.0).unwrap();
        let obs = [1.0, 1.0];
        let pi = pol.policies()[0].probabilities(&theta, &obs).unwrap();
        assert!((or.returns[0] - (3.0 * pi[0] + pi[1])).abs() < 1e-14);
        // d/dlogit_k of Σ_a π_a r_a = π_k (r_k − J); logits = W·obs + b
        for k in 0..2 {
            let dlogit = pi[k] * ([3.0, 1.0][k] - or.returns[0]);
            for c in 0..2 {
                assert!((or.xi[k * 2 + c] - dlogit * obs[c]).abs() < 1e-8);
            }
            assert!((or.xi[4 + k] - dlogit).abs() < 1e-8);
        }
        // uniform policy and symmetric rewards give a zero gradient
        let sym = ScriptedMdpSpec::bandit(1, 2, vec![vec![1.0], vec![1.0]]).unwrap();
        let zero = exact_gradients_by_enumeration(&sym, &pol, &[0.0; 6], 1.0).unwrap();
        assert!(zero.xi.iter().all(|x| x.abs() < 1e-9));
    }

    #[test]
    fn enumeration_cap_enforced() {
        let mut spec = ScriptedMdpSpec::two_state_game();
        spec.horizon = 6;
        let pol = scripted_policies(&spec, false);
        let theta = pol.init_params(0);
        assert!(matches!(
            exact_returns(&spec, &pol, &theta, 1.0),
            Err(Error::CapExceeded { .. })
        ));
    }

    fn mean_and_se(samples: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
        let m = samples.len() as f64;
        let d = samples[0].len();
        let mean: Vec<f64> = (0..d).map(|k| samples.iter().map(|s| s[k]).sum::<f64>() / m).collect();
        let se = (0..d)
            .map(|k| (samples.iter().map(|s| (s[k] - mean[k]).powi(2)).sum::<f64>() / (m - 1.0) / m).sqrt())
            .collect();
        (mean, se)
    }

    #[test]
    fn estimators_are_unbiased_small_scale() {
        let spec = ScriptedMdpSpec::two_state_game();
        let env = ScriptedMdp::new(spec.clone()).unwrap();
        let pol = scripted_policies(&spec, true);
        let theta = pol.init_params(21);
        let gamma = 0.9;
        let oracle = exact_gradients_by_enumeration(&spec, &pol, &theta, gamma).unwrap();
        let p = pol.partition();
        let v: Vec<f64> = (0..p.total()).map(|k| ((k * 7 % 11) as f64 - 5.0) / 5.0).collect();
        let exact_hv = oracle.offdiag_hvp(p, &v).unwrap();
        let exact_htv = oracle.offdiag_hvp_transpose(p, &v).unwrap();
        let (mut xs, mut hs, mut ts) = (Vec::new(), Vec::new(), Vec::new());
        for b in 0..40 {
            let buf = sample_trajectories(&env, &pol, &theta, 2000, derive_seed(99, b), None).unwrap();
            let adv = gae_advantages(&buf, gamma, 1.0).unwrap();
            xs.push(estimate_xi(&buf, &adv, p, gamma, None).unwrap());
            hs.push(estimate_offdiag_hvp(&buf, &adv, p, gamma, &v, None).unwrap());
            ts.push(estimate_offdiag_hvp_transpose(&buf, &adv, p, gamma, &v, None).unwrap());
        }
        for (samples, exact) in [(&xs, &oracle.xi), (&hs, &exact_hv), (&ts, &exact_htv)] {
            let (mean, se) = mean_and_se(samples);
            for k in 0..mean.len() {
                assert!(
                    (mean[k] - exact[k]).abs() <= 4.5 * se[k] + 1e-9,
                    "component {k}: {} vs {} (se {})",
                    mean[k],
                    exact[k],
                    se[k]
                );
            }
        }
    }

    fn market_game(seed: u64, batch: usize) -> RlGame<Market> {
        let env = Market::new(MarketConfig::default()).unwrap();
        let pol = PolicySet::new(
            (0..3)
                .map(|_| {
                    MlpPolicy::new(vec![6, 8, 1], Activation::Tanh, PolicyHead::Gaussian { sigma: 25.0 }).unwrap()
                })
                .collect(),
        )
        .unwrap();
        let settings = MarlSettings { batch, gamma: 1.0, lambda: 1.0, baseline: BaselineKind::Mlp };
        RlGame::new(env, pol, settings, seed, 1).unwrap()
    }

    #[test]
    fn adapter_caches_one_pass_per_theta() {
        let game = market_game(3, 8);
        let theta = game.policies().init_params(0);
        let d = theta.len();
        let v1 = vec![1.0; d];
        let v2: Vec<f64> = (0..d).map(|k| k as f64).collect();
        game.offdiag_hvp(&theta, &v1).unwrap();
        game.offdiag_hvp(&theta, &v2).unwrap();
        game.gradient(&theta).unwrap();
        assert_eq!(game.sampling_passes(), 1);
        let mut moved = theta.clone();
        moved[0] += 1e-3;
        game.gradient(&moved).unwrap();
        assert_eq!(game.sampling_passes(), 2);
    }

    #[test]
    fn adapter_pcgd_takes_one_pass_per_step() {
        let game = market_game(4, 8);
        let p = game.partition().clone();
        let mut theta = FlatParams::new(p, game.policies().init_params(1)).unwrap();
        let mut opt = Optimizer::new(OptimizerConfig::new(Method::Pcgd, 1e-3)).unwrap();
        for k in 1..=3 {
            let (next, rep) = opt.step(&game, &theta).unwrap();
            assert!(rep.cg_iterations() >= 1);
            assert_eq!(game.sampling_passes(), k);
            theta = next;
        }
    }

    #[test]
    fn zero_interactions_reduce_pcgd_to_gradient_ascent() {
        let a = market_game(5, 4).with_zero_interactions(true);
        let b = market_game(5, 4);
        let p = a.partition().clone();
        let theta = FlatParams::new(p, a.policies().init_params(2)).unwrap();
        let (x, _) = Optimizer::new(OptimizerConfig::new(Method::Pcgd, 1e-3)).unwrap().step(&a, &theta).unwrap();
        let (y, _) = Optimizer::new(OptimizerConfig::new(Method::SimGd, 1e-3)).unwrap().step(&b, &theta).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn adapter_runs_are_reproducible() {
        let run = || {
            let game = market_game(8, 4);
            let p = game.partition().clone();
            let mut theta = FlatParams::new(p, game.policies().init_params(3)).unwrap();
            let mut opt = Optimizer::new(OptimizerConfig::new(Method::Pcgd, 1e-3)).unwrap();
            let mut trace = Vec::new();
            for _ in 0..3 {
                let (next, rep) = opt.step(&game, &theta).unwrap();
                trace.push((rep.cg_iterations(), rep.losses));
                theta = next;
            }
            (theta, trace)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn baseline_state_round_trips() {
        let game = market_game(9, 4);
        let theta = game.policies().init_params(0);
        game.gradient(&theta).unwrap();
        let s = game.baseline_state();
        let other = market_game(9, 4);
        other.restore(1, &s).unwrap();
        assert_eq!(other.baseline_state(), s);
        assert_eq!(other.sampling_passes(), 1);
        assert!(other.restore(1, &[1.0]).is_err());

        let mut tab = Baselines::new(BaselineKind::Tabular, 2, 4, 0).unwrap();
        let spec = ScriptedMdpSpec::two_state_game();
        let env = ScriptedMdp::new(spec.clone()).unwrap();
        let pol = scripted_policies(&spec, false);
        let buf = sample_trajectories(&env, &pol, &pol.init_params(0), 10, 0, None).unwrap();
        tab.update(&buf, &returns_to_go(&buf, 1.0)).unwrap();
        let st = tab.state();
        let mut back = Baselines::new(BaselineKind::Tabular, 2, 4, 0).unwrap();
        back.load_state(&st).unwrap();
        assert_eq!(back, tab);
    }
}
