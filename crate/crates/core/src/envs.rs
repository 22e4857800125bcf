//! Game environments: four-player grid soccer, a merit-order electricity
//! market, and small scripted Markov games for estimator oracles.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Action;
use crate::error::{Error, Result};

/// Shape of each player's action set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActionSpace {
    Discrete(usize),
    /// One real-valued action.
    Continuous,
}

/// Outcome of one environment transition.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub rewards: Vec<f64>,
    pub done: bool,
}

/// A multi-player episodic environment.
///
/// All randomness inside the environment comes from the stream seeded by
/// [`Environment::reset`], so a seed fixes the dynamics of an episode.
pub trait Environment: Clone + Send + Sync {
    fn num_players(&self) -> usize;
    fn observation_dim(&self) -> usize;
    fn action_space(&self) -> ActionSpace;
    fn reset(&mut self, seed: u64) -> Result<()>;
    fn observe(&self, player: usize) -> Result<Vec<f64>>;
    fn step(&mut self, actions: &[Action]) -> Result<StepOutcome>;

    /// Index of the current state for tabular baselines, when the state
    /// space is small and discrete.
    fn state_key(&self) -> Option<usize> {
        None
    }

    fn name(&self) -> &'static str;
}

fn check_actions(actions: &[Action], n: usize) -> Result<()> {
    if actions.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: actions.len(),
        });
    }
    Ok(())
}

// ---------------------------------------------------------------- soccer --

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SoccerRewards {
    /// Scorer +1, scored-on −1, the two others −0.25.
    Appendix,
    /// Scorer +1, every other player −1.
    MainText,
}

fn default_grid() -> usize {
    8
}

fn default_step_cap() -> usize {
    200
}

fn default_soccer_rewards() -> SoccerRewards {
    SoccerRewards::Appendix
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SoccerConfig {
    #[serde(default = "default_grid")]
    pub width: usize,
    #[serde(default = "default_grid")]
    pub height: usize,
    #[serde(default = "default_step_cap")]
    pub step_cap: usize,
    #[serde(default = "default_soccer_rewards")]
    pub rewards: SoccerRewards,
}

impl Default for SoccerConfig {
    fn default() -> Self {
        Self {
            width: default_grid(),
            height: default_grid(),
            step_cap: default_step_cap(),
            rewards: SoccerRewards::Appendix,
        }
    }
}

/// Soccer moves, in action-index order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Move {
    Up,
    Down,
    Left,
    Right,
    Stand,
}

impl Move {
    pub const ALL: [Move; 5] = [Move::Up, Move::Down, Move::Left, Move::Right, Move::Stand];

    pub fn from_index(k: usize) -> Result<Self> {
        Self::ALL
            .get(k)
            .copied()
            .ok_or(Error::IndexOutOfRange { index: k, len: 5 })
    }

    fn delta(self) -> (i64, i64) {
        match self {
            Move::Up => (0, -1),
            Move::Down => (0, 1),
            Move::Left => (-1, 0),
            Move::Right => (1, 0),
            Move::Stand => (0, 0),
        }
    }
}

/// Ball location: loose on a cell or held by a player.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ball {
    Free(usize, usize),
    Held(usize),
}

pub const SOCCER_PLAYERS: usize = 4;
pub const SOCCER_OBS_PER_PLAYER: usize = 14;

/// Four-player soccer. Player 0 owns the top goal, 1 the right, 2 the
/// bottom and 3 the left one. Coordinates: `x` grows rightward, `y` grows
/// downward; observation offsets are `target − self`.
#[derive(Debug, Clone)]
pub struct Soccer {
    config: SoccerConfig,
    positions: [(usize, usize); SOCCER_PLAYERS],
    ball: Ball,
    steps: usize,
    done: bool,
    rng: ChaCha8Rng,
}

impl Soccer {
    pub fn new(config: SoccerConfig) -> Result<Self> {
        if config.width < 2 || config.height < 2 || config.width * config.height < SOCCER_PLAYERS {
            return Err(Error::InvalidArgument(format!(
                "soccer grid {}x{} is too small",
                config.width, config.height
            )));
        }
        if config.step_cap == 0 {
            return Err(Error::InvalidArgument("soccer step cap must be positive".into()));
        }
        let mut env = Self {
            config,
            positions: [(0, 0); SOCCER_PLAYERS],
            ball: Ball::Held(0),
            steps: 0,
            done: false,
            rng: ChaCha8Rng::seed_from_u64(0),
        };
        env.reset(0)?;
        Ok(env)
    }

    pub fn config(&self) -> &SoccerConfig {
        &self.config
    }

    pub fn positions(&self) -> &[(usize, usize); SOCCER_PLAYERS] {
        &self.positions
    }

    pub fn ball(&self) -> Ball {
        self.ball
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Place players and ball explicitly (tests and scripted scenarios).
    pub fn set_layout(&mut self, positions: [(usize, usize); SOCCER_PLAYERS], ball: Ball) -> Result<()> {
        for (i, &(x, y)) in positions.iter().enumerate() {
            if x >= self.config.width || y >= self.config.height {
                return Err(Error::InvalidArgument(format!("player {i} off the grid")));
            }
            if positions[..i].contains(&(x, y)) {
                return Err(Error::InvalidArgument(format!("player {i} shares a cell")));
            }
        }
        let ball = match ball {
            Ball::Free(x, y) => match positions.iter().position(|&p| p == (x, y)) {
                Some(p) => Ball::Held(p),
                None if x < self.config.width && y < self.config.height => Ball::Free(x, y),
                None => return Err(Error::InvalidArgument("ball off the grid".into())),
            },
            Ball::Held(p) if p < SOCCER_PLAYERS => Ball::Held(p),
            Ball::Held(p) => return Err(Error::IndexOutOfRange { index: p, len: SOCCER_PLAYERS }),
        };
        self.positions = positions;
        self.ball = ball;
        self.steps = 0;
        self.done = false;
        Ok(())
    }

    /// Half-open span of cells along an edge that forms the goal mouth.
    fn span(len: usize) -> (usize, usize) {
        let lo = len / 4;
        let hi = (3 * len).div_ceil(4).max(lo + 1);
        (lo, hi)
    }

    /// Goal centre of `owner`, one cell outside the field.
    pub fn goal_position(&self, owner: usize) -> (f64, f64) {
        let (w, h) = (self.config.width, self.config.height);
        let (xl, xh) = Self::span(w);
        let (yl, yh) = Self::span(h);
        let cx = (xl + xh - 1) as f64 / 2.0;
        let cy = (yl + yh - 1) as f64 / 2.0;
        match owner {
            0 => (cx, -1.0),
            1 => (w as f64, cy),
            2 => (cx, h as f64),
            _ => (-1.0, cy),
        }
    }

    /// Goal entered when stepping from `(x, y)` to the off-grid `(tx, ty)`.
    fn goal_crossed(&self, x: usize, y: usize, tx: i64, ty: i64) -> Option<usize> {
        let (w, h) = (self.config.width as i64, self.config.height as i64);
        let (xl, xh) = Self::span(self.config.width);
        let (yl, yh) = Self::span(self.config.height);
        let in_x = (xl..xh).contains(&x);
        let in_y = (yl..yh).contains(&y);
        if ty < 0 && in_x {
            Some(0)
        } else if tx >= w && in_y {
            Some(1)
        } else if ty >= h && in_x {
            Some(2)
        } else if tx < 0 && in_y {
            Some(3)
        } else {
            None
        }
    }

    fn score_rewards(&self, scorer: usize, owner: usize) -> Vec<f64> {
        let mut r = vec![0.0; SOCCER_PLAYERS];
        if scorer == owner {
            r[scorer] = -1.0;
            return r;
        }
        for (p, rp) in r.iter_mut().enumerate() {
            *rp = if p == scorer {
                1.0
            } else if p == owner {
                -1.0
            } else {
                match self.config.rewards {
                    SoccerRewards::Appendix => -0.25,
                    SoccerRewards::MainText => -1.0,
                }
            };
        }
        r
    }

    fn ball_position(&self) -> (usize, usize) {
        match self.ball {
            Ball::Free(x, y) => (x, y),
            Ball::Held(p) => self.positions[p],
        }
    }

    /// The 14-value local state of `p`: three opponent goals, the ball and
    /// three opponents, each as an `(x, y)` offset in rotation order.
    fn local_state(&self, p: usize) -> [f64; SOCCER_OBS_PER_PLAYER] {
        let (px, py) = (self.positions[p].0 as f64, self.positions[p].1 as f64);
        let mut out = [0.0; SOCCER_OBS_PER_PLAYER];
        for k in 1..4 {
            let (gx, gy) = self.goal_position((p + k) % 4);
            out[2 * (k - 1)] = gx - px;
            out[2 * (k - 1) + 1] = gy - py;
        }
        let (bx, by) = self.ball_position();
        out[6] = bx as f64 - px;
        out[7] = by as f64 - py;
        for k in 1..4 {
            let (ox, oy) = self.positions[(p + k) % 4];
            out[6 + 2 * k] = ox as f64 - px;
            out[7 + 2 * k] = oy as f64 - py;
        }
        out
    }
}

impl Environment for Soccer {
    fn num_players(&self) -> usize {
        SOCCER_PLAYERS
    }

    fn observation_dim(&self) -> usize {
        SOCCER_PLAYERS * SOCCER_OBS_PER_PLAYER
    }

    fn action_space(&self) -> ActionSpace {
        ActionSpace::Discrete(Move::ALL.len())
    }

    fn reset(&mut self, seed: u64) -> Result<()> {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        let (w, h) = (self.config.width, self.config.height);
        let cells: Vec<usize> = rand::seq::index::sample(&mut self.rng, w * h, SOCCER_PLAYERS).into_vec();
        for (p, c) in cells.iter().enumerate() {
            self.positions[p] = (c % w, c / w);
        }
        let b = self.rng.random_range(0..w * h);
        let bpos = (b % w, b / w);
        self.ball = match self.positions.iter().position(|&q| q == bpos) {
            Some(p) => Ball::Held(p),
            None => Ball::Free(bpos.0, bpos.1),
        };
        self.steps = 0;
        self.done = false;
        Ok(())
    }

    /// `O_P = [S_P, S_{P+1}, S_{P+2}, S_{P+3}]`.
    fn observe(&self, player: usize) -> Result<Vec<f64>> {
        if player >= SOCCER_PLAYERS {
            return Err(Error::IndexOutOfRange {
                index: player,
                len: SOCCER_PLAYERS,
            });
        }
        Ok((0..4).flat_map(|k| self.local_state((player + k) % 4)).collect())
    }

    fn step(&mut self, actions: &[Action]) -> Result<StepOutcome> {
        check_actions(actions, SOCCER_PLAYERS)?;
        if self.done {
            return Err(Error::Environment("soccer step after the episode ended".into()));
        }
        let moves = actions
            .iter()
            .map(|a| a.discrete().and_then(Move::from_index))
            .collect::<Result<Vec<_>>>()?;
        let mut order: Vec<usize> = (0..SOCCER_PLAYERS).collect();
        order.shuffle(&mut self.rng);
        let (w, h) = (self.config.width as i64, self.config.height as i64);
        for p in order {
            let (dx, dy) = moves[p].delta();
            if (dx, dy) == (0, 0) {
                continue;
            }
            let (x, y) = self.positions[p];
            let (tx, ty) = (x as i64 + dx, y as i64 + dy);
            if tx < 0 || ty < 0 || tx >= w || ty >= h {
                if self.ball == Ball::Held(p) {
                    if let Some(owner) = self.goal_crossed(x, y, tx, ty) {
                        self.done = true;
                        self.steps += 1;
                        return Ok(StepOutcome {
                            rewards: self.score_rewards(p, owner),
                            done: true,
                        });
                    }
                }
                continue;
            }
            let target = (tx as usize, ty as usize);
            if let Some(q) = self.positions.iter().position(|&c| c == target) {
                if self.ball == Ball::Held(q) {
                    self.ball = Ball::Held(p);
                }
                continue;
            }
            self.positions[p] = target;
            if self.ball == Ball::Free(target.0, target.1) {
                self.ball = Ball::Held(p);
            }
        }
        self.steps += 1;
        self.done = self.steps >= self.config.step_cap;
        Ok(StepOutcome {
            rewards: vec![0.0; SOCCER_PLAYERS],
            done: self.done,
        })
    }

    fn name(&self) -> &'static str {
        "soccer"
    }
}

// ---------------------------------------------------------------- market --

/// One dispatchable unit offered to the market.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    /// 1-based bus index.
    pub bus: usize,
    pub cost: f64,
    /// Offered capacity (MW).
    pub capacity: f64,
    pub learning: bool,
}

/// Copperplate merit-order clearing.
///
/// Units are dispatched in ascending cost; units sharing a cost level are
/// split pro rata to capacity. The price is the cost of the last level
/// that is dispatched; zero demand gives zero dispatch and price 0.
pub fn market_clearing(units: &[GeneratorSpec], demand: f64) -> Result<(Vec<f64>, f64)> {
    if !(demand >= 0.0) || !demand.is_finite() {
        return Err(Error::InvalidArgument(format!("demand must be finite and non-negative, got {demand}")));
    }
    for (k, u) in units.iter().enumerate() {
        if !(u.cost >= 0.0) || !(u.capacity >= 0.0) || !u.cost.is_finite() || !u.capacity.is_finite() {
            return Err(Error::InvalidArgument(format!("generator {k} has invalid cost or capacity")));
        }
    }
    let capacity: f64 = units.iter().map(|u| u.capacity).sum();
    if demand > capacity {
        return Err(Error::Infeasible { demand, capacity });
    }
    let mut dispatch = vec![0.0; units.len()];
    if demand == 0.0 {
        return Ok((dispatch, 0.0));
    }
    let mut order: Vec<usize> = (0..units.len()).collect();
    order.sort_by(|&a, &b| units[a].cost.total_cmp(&units[b].cost).then(a.cmp(&b)));
    let mut remaining = demand;
    let mut price = 0.0;
    let mut start = 0;
    while start < order.len() && remaining > 0.0 {
        let cost = units[order[start]].cost;
        let end = start + order[start..].iter().take_while(|&&k| units[k].cost == cost).count();
        let level = &order[start..end];
        let level_cap: f64 = level.iter().map(|&k| units[k].capacity).sum();
        if level_cap > 0.0 {
            price = cost;
            if level_cap <= remaining {
                for &k in level {
                    dispatch[k] = units[k].capacity;
                }
                remaining -= level_cap;
            } else {
                let frac = remaining / level_cap;
                for &k in level {
                    dispatch[k] = units[k].capacity * frac;
                }
                remaining = 0.0;
            }
        }
        start = end;
    }
    Ok((dispatch, price))
}

fn default_base_demands() -> Vec<f64> {
    vec![150.0, 300.0, 280.0, 250.0, 200.0, 300.0]
}

fn default_thresholds() -> Vec<f64> {
    vec![25.0, 25.0, 25.0, 35.0, 30.0, 25.0]
}

fn default_baseline_cost() -> f64 {
    35.0
}

fn default_baseline_capacity() -> f64 {
    1000.0
}

fn default_learner_costs() -> Vec<f64> {
    vec![20.0, 22.0, 24.0]
}

fn default_learner_buses() -> Vec<usize> {
    vec![1, 3, 5]
}

fn default_bid_cap() -> f64 {
    10000.0
}

fn default_end_probability() -> f64 {
    0.2
}

fn default_reward_scale() -> f64 {
    50.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarketConfig {
    #[serde(default = "default_base_demands")]
    pub base_demands: Vec<f64>,
    #[serde(default = "default_thresholds")]
    pub thresholds: Vec<f64>,
    #[serde(default = "default_baseline_cost")]
    pub baseline_cost: f64,
    #[serde(default = "default_baseline_capacity")]
    pub baseline_capacity: f64,
    #[serde(default = "default_learner_costs")]
    pub learner_costs: Vec<f64>,
    #[serde(default = "default_learner_buses")]
    pub learner_buses: Vec<usize>,
    #[serde(default = "default_bid_cap")]
    pub bid_cap: f64,
    #[serde(default = "default_end_probability")]
    pub end_probability: f64,
    #[serde(default = "default_reward_scale")]
    pub reward_scale: f64,
}

impl Default for MarketConfig {
    fn default() -> Self {
        Self {
            base_demands: default_base_demands(),
            thresholds: default_thresholds(),
            baseline_cost: default_baseline_cost(),
            baseline_capacity: default_baseline_capacity(),
            learner_costs: default_learner_costs(),
            learner_buses: default_learner_buses(),
            bid_cap: default_bid_cap(),
            end_probability: default_end_probability(),
            reward_scale: default_reward_scale(),
        }
    }
}

/// Capacity-bidding electricity market over a copperplate network.
#[derive(Debug, Clone)]
pub struct Market {
    config: MarketConfig,
    flags: Vec<bool>,
    last_price: f64,
    rng: ChaCha8Rng,
}

impl Market {
    pub fn new(config: MarketConfig) -> Result<Self> {
        let buses = config.base_demands.len();
        if buses == 0 || config.thresholds.len() != buses {
            return Err(Error::InvalidArgument(
                "market needs one threshold per bus and at least one bus".into(),
            ));
        }
        if config.learner_costs.is_empty() || config.learner_costs.len() != config.learner_buses.len() {
            return Err(Error::InvalidArgument(
                "market needs one bus per learner cost and at least one learner".into(),
            ));
        }
        if config.learner_buses.iter().any(|&b| b == 0 || b > buses) {
            return Err(Error::InvalidArgument("learner bus index out of range".into()));
        }
        if config.base_demands.iter().any(|d| !(*d >= 0.0))
            || config.learner_costs.iter().any(|c| !(*c >= 0.0))
            || !(config.baseline_cost >= 0.0)
            || !(config.baseline_capacity >= 0.0)
            || !(config.bid_cap >= 0.0)
            || !(config.reward_scale > 0.0)
            || !(0.0..=1.0).contains(&config.end_probability)
        {
            return Err(Error::InvalidArgument("market config has out-of-range values".into()));
        }
        let flags = vec![false; buses];
        Ok(Self {
            config,
            flags,
            last_price: 0.0,
            rng: ChaCha8Rng::seed_from_u64(0),
        })
    }

    pub fn config(&self) -> &MarketConfig {
        &self.config
    }

    pub fn flags(&self) -> &[bool] {
        &self.flags
    }

    pub fn set_flags(&mut self, flags: &[bool]) -> Result<()> {
        if flags.len() != self.flags.len() {
            return Err(Error::DimensionMismatch {
                expected: self.flags.len(),
                got: flags.len(),
            });
        }
        self.flags.copy_from_slice(flags);
        Ok(())
    }

    pub fn last_price(&self) -> f64 {
        self.last_price
    }

    /// Demand per bus: base, halved where the load flag is set.
    pub fn demands(&self) -> Vec<f64> {
        self.config
            .base_demands
            .iter()
            .zip(&self.flags)
            .map(|(d, &f)| if f { d / 2.0 } else { *d })
            .collect()
    }

    /// Learner units with the given (clamped) capacity bids, followed by one
    /// baseline unit per bus.
    pub fn generators(&self, bids: &[f64]) -> Vec<GeneratorSpec> {
        let mut units: Vec<GeneratorSpec> = self
            .config
            .learner_costs
            .iter()
            .zip(&self.config.learner_buses)
            .zip(bids)
            .map(|((&cost, &bus), &bid)| GeneratorSpec {
                bus,
                cost,
                capacity: bid.clamp(0.0, self.config.bid_cap),
                learning: true,
            })
            .collect();
        units.extend((1..=self.flags.len()).map(|bus| GeneratorSpec {
            bus,
            cost: self.config.baseline_cost,
            capacity: self.config.baseline_capacity,
            learning: false,
        }));
        units
    }

    /// Clear the market for raw capacity bids without advancing the episode.
    pub fn clear(&self, bids: &[f64]) -> Result<(Vec<f64>, f64)> {
        let n = self.config.learner_costs.len();
        if bids.len() != n {
            return Err(Error::DimensionMismatch { expected: n, got: bids.len() });
        }
        if let Some(k) = bids.iter().position(|b| !b.is_finite()) {
            return Err(Error::Environment(format!("non-finite bid from learner {k}")));
        }
        let units = self.generators(bids);
        let demand: f64 = self.demands().iter().sum();
        market_clearing(&units, demand)
    }
}

impl Environment for Market {
    fn num_players(&self) -> usize {
        self.config.learner_costs.len()
    }

    fn observation_dim(&self) -> usize {
        self.flags.len()
    }

    fn action_space(&self) -> ActionSpace {
        ActionSpace::Continuous
    }

    fn reset(&mut self, seed: u64) -> Result<()> {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        for f in self.flags.iter_mut() {
            *f = self.rng.random::<bool>();
        }
        self.last_price = 0.0;
        Ok(())
    }

    fn observe(&self, player: usize) -> Result<Vec<f64>> {
        if player >= self.num_players() {
            return Err(Error::IndexOutOfRange {
                index: player,
                len: self.num_players(),
            });
        }
        Ok(self.flags.iter().map(|&f| if f { 1.0 } else { 0.0 }).collect())
    }

    fn step(&mut self, actions: &[Action]) -> Result<StepOutcome> {
        check_actions(actions, self.num_players())?;
        let bids = actions.iter().map(|a| a.continuous()).collect::<Result<Vec<_>>>()?;
        let (dispatch, price) = self.clear(&bids)?;
        let rewards = self
            .config
            .learner_costs
            .iter()
            .zip(&dispatch)
            .map(|(c, p)| (p * price - c * p) / self.config.reward_scale)
            .collect();
        for (f, t) in self.flags.iter_mut().zip(&self.config.thresholds) {
            *f = price > *t;
        }
        self.last_price = price;
        let done = self.rng.random::<f64>() < self.config.end_probability;
        Ok(StepOutcome { rewards, done })
    }

    fn state_key(&self) -> Option<usize> {
        Some(self.flags.iter().enumerate().map(|(k, &f)| (f as usize) << k).sum())
    }

    fn name(&self) -> &'static str {
        "market"
    }
}

// ------------------------------------------------------- scripted Markov --

/// A finite Markov game with a fixed horizon.
///
/// Joint actions are indexed in mixed radix with player 0 least
/// significant. Observations are `onehot(state) ++ onehot(t)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptedMdpSpec {
    pub num_states: usize,
    pub num_players: usize,
    pub num_actions: usize,
    pub horizon: usize,
    /// Initial state distribution.
    pub initial: Vec<f64>,
    /// `rewards[state][joint_action][player]`.
    pub rewards: Vec<Vec<Vec<f64>>>,
    /// `transitions[state][joint_action][next_state]`.
    pub transitions: Vec<Vec<Vec<f64>>>,
}

impl ScriptedMdpSpec {
    pub fn joint_actions(&self) -> usize {
        self.num_actions.pow(self.num_players as u32)
    }

    pub fn joint_index(&self, actions: &[usize]) -> usize {
        actions.iter().rev().fold(0, |acc, &a| acc * self.num_actions + a)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("scripted mdp: {m}")));
        if self.num_states == 0 || self.num_players == 0 || self.num_actions == 0 || self.horizon == 0 {
            return bad("all sizes must be positive");
        }
        let ja = self.joint_actions();
        let dist_ok = |p: &[f64], n: usize| {
            p.len() == n && p.iter().all(|x| *x >= 0.0 && x.is_finite()) && (p.iter().sum::<f64>() - 1.0).abs() < 1e-12
        };
        if !dist_ok(&self.initial, self.num_states) {
            return bad("initial distribution malformed");
        }
        if self.rewards.len() != self.num_states || self.transitions.len() != self.num_states {
            return bad("one reward and transition table per state");
        }
        for s in 0..self.num_states {
            if self.rewards[s].len() != ja || self.transitions[s].len() != ja {
                return bad("one entry per joint action");
            }
            for j in 0..ja {
                if self.rewards[s][j].len() != self.num_players || self.rewards[s][j].iter().any(|r| !r.is_finite()) {
                    return bad("one finite reward per player");
                }
                if !dist_ok(&self.transitions[s][j], self.num_states) {
                    return bad("transition distribution malformed");
                }
            }
        }
        Ok(())
    }

    /// One state, one step, fixed reward table.
    pub fn bandit(num_players: usize, num_actions: usize, rewards: Vec<Vec<f64>>) -> Result<Self> {
        let spec = Self {
            num_states: 1,
            num_players,
            num_actions,
            horizon: 1,
            initial: vec![1.0],
            transitions: vec![vec![vec![1.0]; rewards.len()]],
            rewards: vec![rewards],
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Two-player matching pennies as a one-step game.
    pub fn matching_pennies() -> Self {
        // joint index = a0 + 2·a1
        let r = vec![vec![1.0, -1.0], vec![-1.0, 1.0], vec![-1.0, 1.0], vec![1.0, -1.0]];
        Self::bandit(2, 2, r).expect("valid")
    }

    /// Two states, two players with two actions, horizon 2, stochastic
    /// transitions and general-sum rewards.
    pub fn two_state_game() -> Self {
        let rewards = vec![
            vec![vec![1.0, -0.5], vec![-1.0, 2.0], vec![0.5, 0.0], vec![2.0, -1.0]],
            vec![vec![-0.5, 1.0], vec![1.5, 0.5], vec![0.0, -1.5], vec![-1.0, 1.0]],
        ];
        let transitions = vec![
            vec![vec![0.8, 0.2], vec![0.3, 0.7], vec![0.5, 0.5], vec![0.1, 0.9]],
            vec![vec![0.6, 0.4], vec![0.2, 0.8], vec![0.9, 0.1], vec![0.4, 0.6]],
        ];
        Self {
            num_states: 2,
            num_players: 2,
            num_actions: 2,
            horizon: 2,
            initial: vec![0.6, 0.4],
            rewards,
            transitions,
        }
    }
}

/// Executable form of a [`ScriptedMdpSpec`].
#[derive(Debug, Clone)]
pub struct ScriptedMdp {
    spec: ScriptedMdpSpec,
    state: usize,
    t: usize,
    rng: ChaCha8Rng,
}

fn draw(p: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (k, pk) in p.iter().enumerate() {
        acc += pk;
        if u < acc {
            return k;
        }
    }
    p.iter().rposition(|&x| x > 0.0).unwrap_or(0)
}

impl ScriptedMdp {
    pub fn new(spec: ScriptedMdpSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self {
            spec,
            state: 0,
            t: 0,
            rng: ChaCha8Rng::seed_from_u64(0),
        })
    }

    pub fn spec(&self) -> &ScriptedMdpSpec {
        &self.spec
    }

    pub fn state(&self) -> usize {
        self.state
    }

    pub fn time(&self) -> usize {
        self.t
    }

    /// Observation of `(state, t)`, shared by all players.
    pub fn observation_of(&self, state: usize, t: usize) -> Vec<f64> {
        let mut o = vec![0.0; self.spec.num_states + self.spec.horizon];
        o[state] = 1.0;
        o[self.spec.num_states + t] = 1.0;
        o
    }
}

impl Environment for ScriptedMdp {
    fn num_players(&self) -> usize {
        self.spec.num_players
    }

    fn observation_dim(&self) -> usize {
        self.spec.num_states + self.spec.horizon
    }

    fn action_space(&self) -> ActionSpace {
        ActionSpace::Discrete(self.spec.num_actions)
    }

    fn reset(&mut self, seed: u64) -> Result<()> {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self.state = draw(&self.spec.initial, &mut self.rng);
        self.t = 0;
        Ok(())
    }

    fn observe(&self, player: usize) -> Result<Vec<f64>> {
        if player >= self.spec.num_players {
            return Err(Error::IndexOutOfRange {
                index: player,
                len: self.spec.num_players,
            });
        }
        Ok(self.observation_of(self.state, self.t))
    }

    fn step(&mut self, actions: &[Action]) -> Result<StepOutcome> {
        check_actions(actions, self.spec.num_players)?;
        if self.t >= self.spec.horizon {
            return Err(Error::Environment("scripted mdp stepped past its horizon".into()));
        }
        let acts = actions.iter().map(|a| a.discrete()).collect::<Result<Vec<_>>>()?;
        if let Some(&a) = acts.iter().find(|&&a| a >= self.spec.num_actions) {
            return Err(Error::IndexOutOfRange {
                index: a,
                len: self.spec.num_actions,
            });
        }
        let j = self.spec.joint_index(&acts);
        let rewards = self.spec.rewards[self.state][j].clone();
        self.state = draw(&self.spec.transitions[self.state][j], &mut self.rng);
        self.t += 1;
        Ok(StepOutcome {
            rewards,
            done: self.t >= self.spec.horizon,
        })
    }

    fn state_key(&self) -> Option<usize> {
        Some(self.t * self.spec.num_states + self.state)
    }

    fn name(&self) -> &'static str {
        "scripted"
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn moves(m: [Move; 4]) -> Vec<Action> {
        m.iter()
            .map(|mv| Action::Discrete(Move::ALL.iter().position(|x| x == mv).unwrap()))
            .collect()
    }

    fn soccer() -> Soccer {
        Soccer::new(SoccerConfig::default()).unwrap()
    }

    fn legal(env: &Soccer) {
        let p = env.positions();
        for i in 0..4 {
            assert!(p[i].0 < 8 && p[i].1 < 8);
            for j in 0..i {
                assert_ne!(p[i], p[j]);
            }
        }
        if let Ball::Free(x, y) = env.ball() {
            assert!(!p.contains(&(x, y)));
        }
    }

    #[test]
    fn soccer_reset_is_deterministic_and_legal() {
        let mut a = soccer();
        let mut b = soccer();
        for seed in 0..200 {
            a.reset(seed).unwrap();
            b.reset(seed).unwrap();
            assert_eq!(a.positions(), b.positions());
            assert_eq!(a.ball(), b.ball());
            legal(&a);
        }
        // over many seeds the ball sometimes spawns on a player
        let held = (0..2000)
            .filter(|&s| {
                a.reset(s).unwrap();
                matches!(a.ball(), Ball::Held(_))
            })
            .count();
        assert!(held > 0 && held < 2000);
    }

    #[test]
    fn soccer_scoring_rewards() {
        let mut env = soccer();
        // player 0 holds the ball on the right edge inside the goal mouth
        env.set_layout([(7, 3), (0, 0), (0, 7), (5, 5)], Ball::Held(0)).unwrap();
        let out = env.step(&moves([Move::Right, Move::Stand, Move::Stand, Move::Stand])).unwrap();
        assert!(out.done);
        assert_eq!(out.rewards, vec![1.0, -1.0, -0.25, -0.25]);
        assert_eq!(out.rewards.iter().sum::<f64>(), -0.5);
        assert!(env.step(&moves([Move::Stand; 4])).is_err());

        // outside the goal mouth the move is a no-op
        env.set_layout([(7, 0), (0, 0), (0, 7), (5, 5)], Ball::Held(0)).unwrap();
        let out = env.step(&moves([Move::Right, Move::Stand, Move::Stand, Move::Stand])).unwrap();
        assert!(!out.done);
        assert_eq!(env.positions()[0], (7, 0));

        // own goal: player 0 owns the top goal
        env.set_layout([(3, 0), (0, 0), (0, 7), (5, 5)], Ball::Held(0)).unwrap();
        let out = env.step(&moves([Move::Up, Move::Stand, Move::Stand, Move::Stand])).unwrap();
        assert!(out.done);
        assert_eq!(out.rewards, vec![-1.0, 0.0, 0.0, 0.0]);

        let mut main = Soccer::new(SoccerConfig {
            rewards: SoccerRewards::MainText,
            ..SoccerConfig::default()
        })
        .unwrap();
        main.set_layout([(0, 4), (1, 1), (7, 7), (5, 5)], Ball::Held(0)).unwrap();
        let out = main.step(&moves([Move::Left, Move::Stand, Move::Stand, Move::Stand])).unwrap();
        assert_eq!(out.rewards, vec![1.0, -1.0, -1.0, -1.0]);
    }

    #[test]
    fn soccer_standing_changes_nothing() {
        let mut env = soccer();
        env.reset(5).unwrap();
        let (p, b) = (*env.positions(), env.ball());
        let out = env.step(&moves([Move::Stand; 4])).unwrap();
        assert_eq!((out.rewards, out.done), (vec![0.0; 4], false));
        assert_eq!((*env.positions(), env.ball()), (p, b));
    }

    #[test]
    fn soccer_steals_and_pickup() {
        let mut env = soccer();
        // holder 0 at (3,3); players 1 and 2 both move into it
        let mut last = std::collections::BTreeSet::new();
        for seed in 0..64 {
            env.reset(seed).unwrap();
            env.set_layout([(3, 3), (4, 3), (3, 4), (7, 7)], Ball::Held(0)).unwrap();
            env.step(&moves([Move::Stand, Move::Left, Move::Up, Move::Stand])).unwrap();
            assert_eq!(env.positions()[..3], [(3, 3), (4, 3), (3, 4)]);
            match env.ball() {
                Ball::Held(h) => {
                    assert!(h == 1 || h == 2);
                    last.insert(h);
                }
                Ball::Free(..) => panic!("ball dropped"),
            }
        }
        // either processing order occurs
        assert_eq!(last.len(), 2);

        env.set_layout([(0, 0), (7, 7), (7, 0), (0, 7)], Ball::Free(1, 0)).unwrap();
        env.step(&moves([Move::Right, Move::Stand, Move::Stand, Move::Stand])).unwrap();
        assert_eq!(env.ball(), Ball::Held(0));
        // moving into a non-holder is a no-op
        env.set_layout([(0, 0), (1, 0), (7, 0), (0, 7)], Ball::Free(5, 5)).unwrap();
        env.step(&moves([Move::Right, Move::Stand, Move::Stand, Move::Stand])).unwrap();
        assert_eq!(env.positions()[0], (0, 0));
    }

    #[test]
    fn soccer_observation_layout() {
        let mut env = soccer();
        env.set_layout([(3, 3), (0, 0), (7, 7), (6, 1)], Ball::Free(5, 4)).unwrap();
        let o = env.observe(0).unwrap();
        assert_eq!(o.len(), 56);
        assert_eq!(&o[6..8], &[2.0, 1.0]);
        // S_A lists goals of B, C, D: right goal centre (8, 3.5)
        assert_eq!(&o[0..2], &[5.0, 0.5]);
        // opponents B, C, D
        assert_eq!(&o[8..14], &[-3.0, -3.0, 4.0, 4.0, 3.0, -2.0]);
        let ob = env.observe(1).unwrap();
        assert_eq!(&ob[0..14], &o[14..28]);
        assert_eq!(&ob[42..56], &o[0..14]);
        env.set_layout([(3, 3), (0, 0), (7, 7), (6, 1)], Ball::Held(0)).unwrap();
        assert_eq!(&env.observe(0).unwrap()[6..8], &[0.0, 0.0]);
    }

    #[test]
    fn soccer_random_play_stays_legal_and_conserves() {
        let mut env = Soccer::new(SoccerConfig {
            width: 4,
            height: 4,
            step_cap: 50,
            ..SoccerConfig::default()
        })
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut scored = 0;
        for ep in 0..300 {
            env.reset(ep).unwrap();
            loop {
                let acts: Vec<Action> = (0..4).map(|_| Action::Discrete(rng.random_range(0..5))).collect();
                let out = env.step(&acts).unwrap();
                let s: f64 = out.rewards.iter().sum();
                if out.rewards.iter().any(|&r| r != 0.0) {
                    assert!(out.done);
                    assert!(s == -0.5 || s == -1.0);
                    scored += 1;
                }
                let p = env.positions();
                for i in 0..4 {
                    assert!(p[i].0 < 4 && p[i].1 < 4);
                    for j in 0..i {
                        assert_ne!(p[i], p[j]);
                    }
                }
                if out.done {
                    break;
                }
            }
        }
        assert!(scored > 0);
    }

    fn unit(cost: f64, capacity: f64) -> GeneratorSpec {
        GeneratorSpec { bus: 1, cost, capacity, learning: false }
    }

    #[test]
    fn clearing_examples() {
        let (d, p) = market_clearing(&[unit(10.0, 100.0), unit(35.0, 1000.0)], 150.0).unwrap();
        assert_eq!((d, p), (vec![100.0, 50.0], 35.0));
        let (d, p) = market_clearing(&[unit(10.0, 100.0)], 0.0).unwrap();
        assert_eq!((d, p), (vec![0.0], 0.0));
        assert!(matches!(market_clearing(&[unit(10.0, 100.0)], 101.0), Err(Error::Infeasible { .. })));
        // tie: pro rata
        let (d, p) = market_clearing(&[unit(5.0, 100.0), unit(5.0, 300.0)], 200.0).unwrap();
        assert_eq!((d, p), (vec![50.0, 150.0], 5.0));
    }

    #[test]
    fn market_learner_example() {
        let mut m = Market::new(MarketConfig {
            learner_costs: vec![20.0],
            learner_buses: vec![1],
            ..MarketConfig::default()
        })
        .unwrap();
        m.set_flags(&[false; 6]).unwrap();
        assert_eq!(m.demands().iter().sum::<f64>(), 1480.0);
        let (d, price) = m.clear(&[200.0]).unwrap();
        assert_eq!((d[0], price), (200.0, 35.0));
        m.reset(0).unwrap();
        m.set_flags(&[false; 6]).unwrap();
        let out = m.step(&[Action::Continuous(200.0)]).unwrap();
        assert_eq!(out.rewards, vec![3000.0 / 50.0]);
    }

    #[test]
    fn market_zero_bids_and_flags() {
        let mut m = Market::new(MarketConfig::default()).unwrap();
        m.reset(3).unwrap();
        let out = m.step(&[Action::Continuous(0.0); 3]).unwrap();
        assert_eq!(out.rewards, vec![0.0; 3]);
        assert_eq!(m.last_price(), 35.0);
        assert_eq!(m.flags(), &[true, true, true, false, true, true]);
        // negative and oversized bids are clamped
        let (d, _) = m.clear(&[-5.0, 20000.0, 1.0]).unwrap();
        assert_eq!(d[0], 0.0);
        assert!(d[1] <= 10000.0);
        assert!(m.clear(&[f64::NAN, 0.0, 0.0]).is_err());
    }

    #[test]
    fn market_positive_profit_when_dispatched() {
        let mut m = Market::new(MarketConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for s in 0..200 {
            m.reset(s).unwrap();
            let bids: Vec<Action> = (0..3).map(|_| Action::Continuous(rng.random_range(0.0..800.0))).collect();
            let out = m.step(&bids).unwrap();
            for r in out.rewards {
                assert!(r >= 0.0);
            }
        }
    }

    #[test]
    fn market_episode_length() {
        let mut m = Market::new(MarketConfig::default()).unwrap();
        let n = 10_000;
        let mut lens = Vec::with_capacity(n);
        for ep in 0..n {
            m.reset(ep as u64).unwrap();
            let mut len = 0;
            loop {
                len += 1;
                if m.step(&[Action::Continuous(100.0); 3]).unwrap().done {
                    break;
                }
            }
            lens.push(len as f64);
        }
        let mean = lens.iter().sum::<f64>() / n as f64;
        let var = lens.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let se = (var / n as f64).sqrt();
        assert!((mean - 5.0).abs() < 3.0 * se, "mean {mean} se {se}");
    }

    #[test]
    fn merit_order_is_cost_minimal() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let units: Vec<GeneratorSpec> = (0..3)
                .map(|_| unit(rng.random_range(0..5) as f64 * 10.0, rng.random_range(1..8) as f64 * 10.0))
                .collect();
            let cap: f64 = units.iter().map(|u| u.capacity).sum();
            let demand = (rng.random_range(0.0..cap) / 10.0).floor() * 10.0;
            let (d, _) = market_clearing(&units, demand).unwrap();
            assert!((d.iter().sum::<f64>() - demand).abs() < 1e-9);
            let cost: f64 = d.iter().zip(&units).map(|(p, u)| p * u.cost).sum();
            let mut best = f64::INFINITY;
            let steps = |u: &GeneratorSpec| (u.capacity / 10.0) as usize;
            for a in 0..=steps(&units[0]) {
                for b in 0..=steps(&units[1]) {
                    let rest = demand - 10.0 * (a + b) as f64;
                    if rest < 0.0 || rest > units[2].capacity {
                        continue;
                    }
                    let c = 10.0 * (a as f64 * units[0].cost + b as f64 * units[1].cost) + rest * units[2].cost;
                    best = best.min(c);
                }
            }
            assert!((cost - best).abs() < 1e-9, "{cost} vs {best}");
        }
    }

    #[test]
    fn scripted_mdp_behaviour() {
        let spec = ScriptedMdpSpec::bandit(1, 2, vec![vec![5.0], vec![1.0]]).unwrap();
        let mut env = ScriptedMdp::new(spec).unwrap();
        env.reset(0).unwrap();
        let out = env.step(&[Action::Discrete(0)]).unwrap();
        assert_eq!(out, StepOutcome { rewards: vec![5.0], done: true });

        let mp = ScriptedMdpSpec::matching_pennies();
        for row in &mp.rewards[0] {
            assert_eq!(row[0] + row[1], 0.0);
        }

        let mut a = ScriptedMdp::new(ScriptedMdpSpec::two_state_game()).unwrap();
        let mut b = a.clone();
        let trace = |env: &mut ScriptedMdp| {
            env.reset(42).unwrap();
            let mut s = vec![env.state()];
            while !env.step(&[Action::Discrete(1), Action::Discrete(0)]).unwrap().done {
                s.push(env.state());
            }
            s
        };
        assert_eq!(trace(&mut a), trace(&mut b));

        let mut bad = ScriptedMdpSpec::two_state_game();
        bad.transitions[0][0] = vec![0.5, 0.4];
        assert!(ScriptedMdp::new(bad).is_err());
    }
}
