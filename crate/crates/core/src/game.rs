//! Differentiable games over a block-partitioned parameter vector.
//!
//! Every optimizer in this crate works on one flat vector `θ = (θ¹, …, θⁿ)`
//! together with a [`BlockPartition`] recording how many coordinates belong
//! to each player. A [`Game`] exposes the oracles the optimizers need: the
//! per-player losses, the simultaneous gradient `ξ` and products with the
//! block-off-diagonal part `H_o` of the game Hessian.

use crate::error::{Error, Result};
use crate::linalg;

/// Per-player parameter counts and their prefix offsets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockPartition {
    dims: Vec<usize>,
    offsets: Vec<usize>,
}

impl BlockPartition {
    pub fn new(dims: Vec<usize>) -> Result<Self> {
        if dims.is_empty() {
            return Err(Error::InvalidArgument("partition needs at least one player".into()));
        }
        if let Some(i) = dims.iter().position(|&d| d == 0) {
            return Err(Error::InvalidArgument(format!("player {i} has zero parameters")));
        }
        let mut offsets = Vec::with_capacity(dims.len() + 1);
        offsets.push(0);
        for d in &dims {
            offsets.push(offsets.last().unwrap() + d);
        }
        Ok(Self { dims, offsets })
    }

    /// `n` players with one scalar parameter each.
    pub fn scalar_players(n: usize) -> Result<Self> {
        Self::new(vec![1; n])
    }

    pub fn num_players(&self) -> usize {
        self.dims.len()
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn total(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    pub fn range(&self, player: usize) -> Result<std::ops::Range<usize>> {
        if player >= self.dims.len() {
            return Err(Error::IndexOutOfRange {
                index: player,
                len: self.dims.len(),
            });
        }
        Ok(self.offsets[player]..self.offsets[player + 1])
    }

    /// Player owning flat coordinate `k`.
    pub fn owner(&self, k: usize) -> Option<usize> {
        if k >= self.total() {
            return None;
        }
        Some(self.offsets.partition_point(|&o| o <= k) - 1)
    }

    pub fn check(&self, len: usize) -> Result<()> {
        if len != self.total() {
            return Err(Error::DimensionMismatch {
                expected: self.total(),
                got: len,
            });
        }
        Ok(())
    }

    /// Index of the first block containing a non-finite value.
    pub fn first_non_finite_block(&self, values: &[f64]) -> Option<usize> {
        values
            .iter()
            .position(|x| !x.is_finite())
            .and_then(|k| self.owner(k))
    }
}

/// The combined parameter vector of all players.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatParams {
    partition: BlockPartition,
    values: Vec<f64>,
}

impl FlatParams {
    pub fn new(partition: BlockPartition, values: Vec<f64>) -> Result<Self> {
        partition.check(values.len())?;
        Ok(Self { partition, values })
    }

    pub fn zeros(partition: BlockPartition) -> Self {
        let values = vec![0.0; partition.total()];
        Self { partition, values }
    }

    pub fn partition(&self) -> &BlockPartition {
        &self.partition
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Contiguous parameters of one player.
    pub fn block(&self, player: usize) -> Result<&[f64]> {
        let r = self.partition.range(player)?;
        Ok(&self.values[r])
    }

    pub fn block_mut(&mut self, player: usize) -> Result<&mut [f64]> {
        let r = self.partition.range(player)?;
        Ok(&mut self.values[r])
    }

    pub fn blocks(&self) -> impl Iterator<Item = &[f64]> {
        self.partition
            .offsets
            .windows(2)
            .map(move |w| &self.values[w[0]..w[1]])
    }

    pub fn norm(&self) -> f64 {
        linalg::norm(&self.values)
    }

    /// Same partition, new values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        Self::new(self.partition.clone(), values)
    }
}

/// Oracle interface of an `n`-player differentiable game.
///
/// All vectors are flat and conform to [`Game::partition`]. Sign convention:
/// every player minimizes its own loss.
pub trait Game {
    fn partition(&self) -> &BlockPartition;

    /// `(L¹(θ), …, Lⁿ(θ))`.
    fn losses(&self, theta: &[f64]) -> Result<Vec<f64>>;

    /// Simultaneous gradient `ξ(θ)`; block `i` is `∇_{θⁱ} Lⁱ(θ)`.
    fn gradient(&self, theta: &[f64]) -> Result<Vec<f64>>;

    /// `H_o(θ)·v`; block `i` is `Σ_{j≠i} ∇_{ij}Lⁱ(θ)·vʲ`.
    fn offdiag_hvp(&self, theta: &[f64], v: &[f64]) -> Result<Vec<f64>>;

    /// `H_o(θ)ᵀ·v`, needed by the normal-equation solve and by SGA.
    fn offdiag_hvp_transpose(&self, _theta: &[f64], _v: &[f64]) -> Result<Vec<f64>> {
        Err(Error::Unsupported(
            "game does not provide transposed off-diagonal Hessian products".into(),
        ))
    }

    /// Full game-Hessian product `H(θ)·v`, available for analytic games.
    fn hvp(&self, _theta: &[f64], _v: &[f64]) -> Result<Vec<f64>> {
        Err(Error::Unsupported("game does not provide full Hessian products".into()))
    }

    /// Pure oracles may be called concurrently; sample-based ones may not.
    fn is_pure(&self) -> bool {
        true
    }
}

impl<G: Game + ?Sized> Game for &G {
    fn partition(&self) -> &BlockPartition {
        (**self).partition()
    }
    fn losses(&self, theta: &[f64]) -> Result<Vec<f64>> {
        (**self).losses(theta)
    }
    fn gradient(&self, theta: &[f64]) -> Result<Vec<f64>> {
        (**self).gradient(theta)
    }
    fn offdiag_hvp(&self, theta: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        (**self).offdiag_hvp(theta, v)
    }
    fn offdiag_hvp_transpose(&self, theta: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        (**self).offdiag_hvp_transpose(theta, v)
    }
    fn hvp(&self, theta: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        (**self).hvp(theta, v)
    }
    fn is_pure(&self) -> bool {
        (**self).is_pure()
    }
}

fn conform(game: &dyn Game, p: &FlatParams) -> Result<()> {
    if p.partition() != game.partition() {
        return Err(Error::DimensionMismatch {
            expected: game.partition().total(),
            got: p.len(),
        });
    }
    Ok(())
}

fn finite(game: &dyn Game, what: &'static str, values: Vec<f64>) -> Result<Vec<f64>> {
    game.partition().check(values.len())?;
    match game.partition().first_non_finite_block(&values) {
        Some(block) => Err(Error::NonFinite { what, block }),
        None => Ok(values),
    }
}

pub fn eval_losses(game: &dyn Game, theta: &FlatParams) -> Result<Vec<f64>> {
    conform(game, theta)?;
    let losses = game.losses(theta.values())?;
    if losses.len() != game.partition().num_players() {
        return Err(Error::DimensionMismatch {
            expected: game.partition().num_players(),
            got: losses.len(),
        });
    }
    Ok(losses)
}

pub fn simultaneous_gradient(game: &dyn Game, theta: &FlatParams) -> Result<FlatParams> {
    conform(game, theta)?;
    let xi = finite(game, "simultaneous gradient", game.gradient(theta.values())?)?;
    theta.with_values(xi)
}

pub fn offdiag_hvp(game: &dyn Game, theta: &FlatParams, v: &FlatParams) -> Result<FlatParams> {
    conform(game, theta)?;
    conform(game, v)?;
    let out = finite(
        game,
        "off-diagonal Hessian product",
        game.offdiag_hvp(theta.values(), v.values())?,
    )?;
    theta.with_values(out)
}

pub fn offdiag_hvp_transpose(
    game: &dyn Game,
    theta: &FlatParams,
    v: &FlatParams,
) -> Result<FlatParams> {
    conform(game, theta)?;
    conform(game, v)?;
    let out = finite(
        game,
        "transposed off-diagonal Hessian product",
        game.offdiag_hvp_transpose(theta.values(), v.values())?,
    )?;
    theta.with_values(out)
}

/// Block view of player `i`.
pub fn block_view(theta: &FlatParams, i: usize) -> Result<&[f64]> {
    theta.block(i)
}

/// Zero the diagonal blocks of `v` in place.
pub fn zero_diagonal_blocks(partition: &BlockPartition, v: &mut [f64]) {
    for w in partition.offsets.windows(2) {
        v[w[0]..w[1]].iter_mut().for_each(|x| *x = 0.0);
    }
}
