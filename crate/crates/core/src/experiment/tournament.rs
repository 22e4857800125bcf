//! Evaluation of two agent populations against each other.
//!
//! Each matchup seats `k` focal agents and `n − k` opponents, shuffling the
//! seats every episode. The agent with the highest undiscounted episode
//! reward wins; tied agents share the win equally, so the wins of a matchup
//! always sum to the episode count.

use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::config::{AgentSpec, ExperimentConfig, ExperimentKind, PolicyConfig, TournamentConfig};
use super::metrics::{fmt_f64, write_csv};
use super::runner::{effective_seed, load_player_policy, prepare_output_dir, visit_env, EnvVisitor, RunOptions};
use crate::autodiff::{Action, MlpPolicy};
use crate::envs::{ActionSpace, Environment, Move};
use crate::error::{Error, Result};
use crate::marl::{derive_seed, MAX_EPISODE_STEPS};

pub const TOURNAMENT_FILE: &str = "tournament.csv";
pub const TOURNAMENT_HEADER: [&str; 6] = ["focal_seats", "population", "seats", "wins", "win_rate", "per_agent_win_rate"];

/// A resolved agent able to act in any seat.
#[derive(Debug, Clone)]
pub enum Agent {
    Policy { policy: MlpPolicy, params: Vec<f64> },
    Random { actions: usize },
    Fixed(Action),
}

impl Agent {
    pub fn resolve<E: Environment>(spec: &AgentSpec, env: &E, policy: &PolicyConfig) -> Result<Self> {
        match spec {
            AgentSpec::Checkpoint { path, player } => {
                let (policy, params) = load_player_policy(path, env, policy, *player)?;
                Ok(Agent::Policy { policy, params })
            }
            AgentSpec::Random => match env.action_space() {
                ActionSpace::Discrete(n) => Ok(Agent::Random { actions: n }),
                ActionSpace::Continuous => Err(Error::Unsupported("random agents need discrete actions".into())),
            },
            AgentSpec::Stand => {
                if env.name() != "soccer" {
                    return Err(Error::Unsupported("the stand agent only plays soccer".into()));
                }
                let idx = Move::ALL.iter().position(|m| *m == Move::Stand).expect("stand move");
                Ok(Agent::Fixed(Action::Discrete(idx)))
            }
        }
    }

    fn act(&self, obs: &[f64], rng: &mut ChaCha8Rng) -> Result<Action> {
        match self {
            Agent::Policy { policy, params } => policy.sample(params, obs, rng),
            Agent::Random { actions } => Ok(Action::Discrete(rng.random_range(0..*actions))),
            Agent::Fixed(a) => Ok(*a),
        }
    }
}

/// Wins of one population in one matchup.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchupRow {
    pub focal_seats: usize,
    pub population: String,
    pub seats: usize,
    pub wins: f64,
    pub episodes: u64,
}

impl MatchupRow {
    pub fn win_rate(&self) -> f64 {
        self.wins / self.episodes as f64
    }

    pub fn per_agent_win_rate(&self) -> f64 {
        if self.seats == 0 {
            0.0
        } else {
            self.win_rate() / self.seats as f64
        }
    }

    pub fn record(&self) -> Vec<String> {
        vec![
            self.focal_seats.to_string(),
            self.population.clone(),
            self.seats.to_string(),
            fmt_f64(self.wins),
            fmt_f64(self.win_rate()),
            fmt_f64(self.per_agent_win_rate()),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TournamentReport {
    pub path: Option<PathBuf>,
    pub rows: Vec<MatchupRow>,
}

/// Fractional wins of each seat in one episode.
fn play_episode<E: Environment>(env: &E, seats: &[&Agent], seed: u64) -> Result<Vec<f64>> {
    let mut env = env.clone();
    env.reset(derive_seed(seed, 0))?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 1));
    let mut totals = vec![0.0; seats.len()];
    for _ in 0..MAX_EPISODE_STEPS {
        let actions = seats
            .iter()
            .enumerate()
            .map(|(p, agent)| agent.act(&env.observe(p)?, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let out = env.step(&actions)?;
        for (t, r) in totals.iter_mut().zip(&out.rewards) {
            *t += r;
        }
        if out.done {
            let best = totals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let winners = totals.iter().filter(|&&t| t == best).count() as f64;
            return Ok(totals.iter().map(|&t| if t == best { 1.0 / winners } else { 0.0 }).collect());
        }
    }
    Err(Error::Environment(format!("tournament episode exceeded {MAX_EPISODE_STEPS} steps")))
}

/// Play every matchup of `cfg` in `env`. Episode `e` of matchup `k` uses
/// sub-seed `derive_seed(derive_seed(seed, k), e)`, so results do not depend
/// on how episodes are spread over threads.
pub fn play_tournament<E: Environment>(
    env: &E,
    focal: (&str, &Agent),
    opponent: (&str, &Agent),
    compositions: &[usize],
    episodes: u64,
    seed: u64,
) -> Result<Vec<MatchupRow>> {
    let n = env.num_players();
    let mut rows = Vec::new();
    for (m, &k) in compositions.iter().enumerate() {
        if k > n {
            return Err(Error::InvalidArgument(format!("{k} focal seats in a {n}-player game")));
        }
        let match_seed = derive_seed(seed, m as u64);
        let per_episode: Vec<Result<f64>> = (0..episodes)
            .into_par_iter()
            .map(|e| {
                let ep_seed = derive_seed(match_seed, e);
                let mut is_focal: Vec<bool> = (0..n).map(|s| s < k).collect();
                is_focal.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(ep_seed, 2)));
                let seats: Vec<&Agent> = is_focal.iter().map(|&f| if f { focal.1 } else { opponent.1 }).collect();
                let wins = play_episode(env, &seats, ep_seed)?;
                Ok(wins.iter().zip(&is_focal).filter(|(_, f)| **f).map(|(w, _)| w).sum())
            })
            .collect();
        let mut focal_wins = 0.0;
        for w in per_episode {
            focal_wins += w?;
        }
        rows.push(MatchupRow {
            focal_seats: k,
            population: focal.0.to_string(),
            seats: k,
            wins: focal_wins,
            episodes,
        });
        rows.push(MatchupRow {
            focal_seats: k,
            population: opponent.0.to_string(),
            seats: n - k,
            wins: episodes as f64 - focal_wins,
            episodes,
        });
    }
    Ok(rows)
}

struct TournamentRun<'a> {
    cfg: &'a TournamentConfig,
    seed: u64,
}

impl EnvVisitor for TournamentRun<'_> {
    type Output = Vec<MatchupRow>;

    fn visit<E: Environment + 'static>(self, env: E) -> Result<Vec<MatchupRow>> {
        let t = self.cfg;
        let focal = Agent::resolve(&t.focal.agent, &env, &t.policy)?;
        let opponent = Agent::resolve(&t.opponent.agent, &env, &t.policy)?;
        play_tournament(
            &env,
            (&t.focal.label, &focal),
            (&t.opponent.label, &opponent),
            &t.compositions,
            t.episodes,
            self.seed,
        )
    }
}

/// Run a `tournament` experiment and write its CSV.
pub fn run_tournament(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<TournamentReport> {
    cfg.validate()?;
    if cfg.kind() != ExperimentKind::Tournament {
        return Err(Error::Config(format!(
            "`tournament` handles tournament experiments, not {}",
            cfg.kind().name()
        )));
    }
    let t = cfg.tournament()?;
    let run = TournamentRun { cfg: t, seed: effective_seed(cfg, opts) };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.workers.max(1))
        .build()
        .map_err(|e| Error::InvalidArgument(format!("worker pool: {e}")))?;
    let rows = pool.install(|| visit_env(cfg.env()?, run))?;
    let dir = prepare_output_dir(cfg, opts)?;
    let path = dir.join(TOURNAMENT_FILE);
    write_csv(&path, &TOURNAMENT_HEADER, rows.iter().map(MatchupRow::record))?;
    Ok(TournamentReport { path: Some(path), rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{Soccer, SoccerConfig};

    #[test]
    fn identical_agents_split_wins_evenly() {
        let env = Soccer::new(SoccerConfig::default()).unwrap();
        let a = Agent::Random { actions: 5 };
        let episodes = 2000;
        let rows = play_tournament(&env, ("a", &a), ("b", &a), &[1, 2, 3], episodes, 11).unwrap();
        let p = 0.25f64;
        let sigma = (p * (1.0 - p) / episodes as f64).sqrt();
        for pair in rows.chunks(2) {
            assert!((pair[0].wins + pair[1].wins - episodes as f64).abs() < 1e-9);
            for r in pair {
                assert!((r.per_agent_win_rate() - p).abs() < 3.0 * sigma, "{r:?}");
            }
        }
    }

    #[test]
    fn standing_agent_rarely_wins() {
        let env = Soccer::new(SoccerConfig::default()).unwrap();
        let stand = Agent::Fixed(Action::Discrete(4));
        let random = Agent::Random { actions: 5 };
        let rows = play_tournament(&env, ("stand", &stand), ("random", &random), &[1], 1000, 3).unwrap();
        assert!(rows[0].win_rate() < 0.1, "{rows:?}");
    }

    #[test]
    fn results_independent_of_thread_count() {
        let env = Soccer::new(SoccerConfig { width: 4, height: 4, ..SoccerConfig::default() }).unwrap();
        let a = Agent::Random { actions: 5 };
        let b = Agent::Fixed(Action::Discrete(4));
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| play_tournament(&env, ("a", &a), ("b", &b), &[2], 200, 5).unwrap())
        };
        assert_eq!(run(1), run(4));
    }
}
