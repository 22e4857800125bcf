//! Analytic benchmark games with known equilibria.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::game::{BlockPartition, Game};
use crate::linalg::DenseMatrix;

fn check2(theta: &[f64], v: Option<&[f64]>, n: usize) -> Result<()> {
    if theta.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: theta.len(),
        });
    }
    if let Some(v) = v {
        if v.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: v.len(),
            });
        }
    }
    Ok(())
}

/// `L¹ = γxy`, `L² = −γxy`.
#[derive(Debug, Clone)]
pub struct BilinearGame {
    gamma: f64,
    partition: BlockPartition,
}

pub fn bilinear_game(gamma: f64) -> Result<BilinearGame> {
    if gamma == 0.0 || !gamma.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "bilinear coupling must be finite and non-zero, got {gamma}"
        )));
    }
    Ok(BilinearGame {
        gamma,
        partition: BlockPartition::scalar_players(2)?,
    })
}

impl BilinearGame {
    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn hessian(&self) -> DenseMatrix {
        DenseMatrix::from_fn(2, 2, |r, c| match (r, c) {
            (0, 1) => self.gamma,
            (1, 0) => -self.gamma,
            _ => 0.0,
        })
    }
}

impl Game for BilinearGame {
    fn partition(&self) -> &BlockPartition {
        &self.partition
    }

    fn losses(&self, theta: &[f64]) -> Result<Vec<f64>> {
        check2(theta, None, 2)?;
        let l = self.gamma * theta[0] * theta[1];
        Ok(vec![l, -l])
    }

    fn gradient(&self, theta: &[f64]) -> Result<Vec<f64>> {
        check2(theta, None, 2)?;
        Ok(vec![self.gamma * theta[1], -self.gamma * theta[0]])
    }

    fn offdiag_hvp(&self, theta: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        check2(theta, Some(v), 2)?;
        Ok(vec![self.gamma * v[1], -self.gamma * v[0]])
    }

    fn offdiag_hvp_transpose(&self, theta: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        check2(theta, Some(v), 2)?;
        Ok(vec![-self.gamma * v[1], self.gamma * v[0]])
    }

    fn hvp(&self, theta: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        self.offdiag_hvp(theta, v)
    }
}

/// Four-player multilinear game with pairwise zero-sum interactions:
/// player `i` gains `θⁱθʲ` against every later player `j` and pays it to
/// every earlier one.
#[derive(Debug, Clone)]
pub struct FourPlayerExample {
    partition: BlockPartition,
}

pub fn four_player_example() -> FourPlayerExample {
    FourPlayerExample {
        partition: BlockPartition::scalar_players(4).expect("four players"),
    }
}

impl FourPlayerExample {
    /// The constant game Hessian: `+1` above the diagonal, `−1` below.
    pub fn hessian(&self) -> DenseMatrix {
        DenseMatrix::from_fn(4, 4, |r, c| match r.cmp(&c) {
            std::cmp::Ordering::Less => 1.0,
            std::cmp::Ordering::Greater => -1.0,
            std::cmp::Ordering::Equal => 0.0,
        })
    }
}

impl Game for FourPlayerExample {
    fn partition(&self) -> &BlockPartition {
        &self.partition
    }

    fn losses(&self, t: &[f64]) -> Result<Vec<f64>> {
        check2(t, None, 4)?;
        Ok((0..4)
            .map(|i| {
                (0..4)
                    .filter(|&j| j != i)
                    .map(|j| if j > i { t[i] * t[j] } else { -t[i] * t[j] })
                    .sum()
            })
            .collect())
    }

    fn gradient(&self, t: &[f64]) -> Result<Vec<f64>> {
        check2(t, None, 4)?;
        self.hessian().matvec(t)
    }

    fn offdiag_hvp(&self, t: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        check2(t, Some(v), 4)?;
        self.hessian().matvec(v)
    }

    fn offdiag_hvp_transpose(&self, t: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        check2(t, Some(v), 4)?;
        self.hessian().transpose_matvec(v)
    }

    fn hvp(&self, t: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        self.offdiag_hvp(t, v)
    }
}

/// `Lⁱ(θ) = ½θⁱᵀB_iiθⁱ + Σ_{j≠i} θⁱᵀB_ijθʲ`, stored as the block matrix `B`.
///
/// The simultaneous gradient is `Bθ` and the game Hessian is `B` itself, so
/// `θ = 0` is always a stationary point.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticPolymatrixGame {
    partition: BlockPartition,
    blocks: DenseMatrix,
    offdiag: DenseMatrix,
}

impl QuadraticPolymatrixGame {
    /// `blocks` is the full `d×d` matrix of `B_ij`; diagonal blocks must be
    /// symmetric.
    pub fn from_blocks(partition: BlockPartition, blocks: DenseMatrix) -> Result<Self> {
        let d = partition.total();
        if blocks.rows() != d || blocks.cols() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: blocks.rows(),
            });
        }
        for r in partition.offsets().windows(2) {
            for a in r[0]..r[1] {
                for b in r[0]..r[1] {
                    if blocks[(a, b)] != blocks[(b, a)] {
                        return Err(Error::InvalidArgument(
                            "diagonal blocks of a quadratic game must be symmetric".into(),
                        ));
                    }
                }
            }
        }
        let offdiag = offdiag_part(&partition, &blocks);
        Ok(Self {
            partition,
            blocks,
            offdiag,
        })
    }

    pub fn hessian(&self) -> &DenseMatrix {
        &self.blocks
    }

    /// Same diagonal blocks, all interactions removed.
    pub fn with_offdiag_zeroed(&self) -> Self {
        let blocks = self.blocks.sub(&self.offdiag).expect("same shape");
        Self::from_blocks(self.partition.clone(), blocks).expect("diagonal blocks unchanged")
    }
}

/// `H_o`: copy of `h` with the diagonal blocks cleared.
pub fn offdiag_part(partition: &BlockPartition, h: &DenseMatrix) -> DenseMatrix {
    let mut out = h.clone();
    for w in partition.offsets().windows(2) {
        for a in w[0]..w[1] {
            for b in w[0]..w[1] {
                out[(a, b)] = 0.0;
            }
        }
    }
    out
}

impl Game for QuadraticPolymatrixGame {
    fn partition(&self) -> &BlockPartition {
        &self.partition
    }

    fn losses(&self, theta: &[f64]) -> Result<Vec<f64>> {
        self.partition.check(theta.len())?;
        // Lⁱ = θⁱᵀ(½B_iiθⁱ + Σ_{j≠i}B_ijθʲ)
        let hd_theta = self.blocks.sub(&self.offdiag)?.matvec(theta)?;
        let ho_theta = self.offdiag.matvec(theta)?;
        Ok(self
            .partition
            .offsets()
            .windows(2)
            .map(|w| {
                (w[0]..w[1])
                    .map(|k| theta[k] * (0.5 * hd_theta[k] + ho_theta[k]))
                    .sum()
            })
            .collect())
    }

    fn gradient(&self, theta: &[f64]) -> Result<Vec<f64>> {
        self.blocks.matvec(theta)
    }

    fn offdiag_hvp(&self, theta: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        self.partition.check(theta.len())?;
        self.offdiag.matvec(v)
    }

    fn offdiag_hvp_transpose(&self, theta: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        self.partition.check(theta.len())?;
        self.offdiag.transpose_matvec(v)
    }

    fn hvp(&self, theta: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        self.partition.check(theta.len())?;
        self.blocks.matvec(v)
    }
}

const GENERATOR_RETRIES: usize = 10;

/// Seeded random quadratic polymatrix game with a strict local Nash
/// equilibrium at the origin.
///
/// The symmetric part of the Hessian is drawn as
/// `S = s_scale·(GᵀG/d + 0.1·I)`, so every diagonal block `B_ii = S_ii` is
/// positive definite and `S` itself is positive definite. The antisymmetric
/// part is `a_scale·(K − Kᵀ)/2` restricted to off-diagonal blocks. For a
/// fixed seed the draws of `G` and `K` do not depend on the scales, so games
/// that differ only in `a_scale` share `S` and the direction of `A`.
pub fn random_quadratic_polymatrix(
    seed: u64,
    dims: &[usize],
    s_scale: f64,
    a_scale: f64,
) -> Result<QuadraticPolymatrixGame> {
    if !(s_scale >= 0.0) || !a_scale.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "scales must satisfy s_scale >= 0 and finite a_scale (got {s_scale}, {a_scale})"
        )));
    }
    let partition = BlockPartition::new(dims.to_vec())?;
    let d = partition.total();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..GENERATOR_RETRIES {
        let g = DenseMatrix::from_fn(d, d, |_, _| StandardNormal.sample(&mut rng));
        let k = DenseMatrix::from_fn(d, d, |_, _| StandardNormal.sample(&mut rng));
        let gtg = g.transpose().matmul(&g)?;
        let s = DenseMatrix::from_fn(d, d, |r, c| {
            let base = gtg[(r, c)] / d as f64 + if r == c { 0.1 } else { 0.0 };
            s_scale * base
        });
        let skew = offdiag_part(&partition, &k.sub(&k.transpose())?.scale(0.5 * a_scale));
        let h = s.add(&skew)?;
        if h.lu().is_ok() {
            return QuadraticPolymatrixGame::from_blocks(partition, h);
        }
    }
    Err(Error::Singular(format!(
        "no invertible game Hessian after {GENERATOR_RETRIES} draws (seed {seed})"
    )))
}

/// Pairwise zero-sum quadratic game: `B_ii` positive definite, `B_ji = −B_ijᵀ`.
pub fn pairwise_zero_sum_quadratic(
    seed: u64,
    dims: &[usize],
    s_scale: f64,
    a_scale: f64,
) -> Result<QuadraticPolymatrixGame> {
    let partition = BlockPartition::new(dims.to_vec())?;
    let base = random_quadratic_polymatrix(seed, dims, s_scale, a_scale)?;
    let h = base.hessian();
    let mut diag = h.sub(&offdiag_part(&partition, h))?;
    let anti = {
        let a = h.sub(&h.transpose())?.scale(0.5);
        offdiag_part(&partition, &a)
    };
    diag = diag.add(&anti)?;
    QuadraticPolymatrixGame::from_blocks(partition, diag)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::game::{eval_losses, offdiag_hvp, simultaneous_gradient, FlatParams};

    fn flat(game: &dyn Game, v: &[f64]) -> FlatParams {
        FlatParams::new(game.partition().clone(), v.to_vec()).unwrap()
    }

    #[test]
    fn bilinear_oracles() {
        let g = bilinear_game(1.0).unwrap();
        assert_eq!(eval_losses(&g, &flat(&g, &[1.0, 2.0])).unwrap(), vec![2.0, -2.0]);
        assert_eq!(
            simultaneous_gradient(&g, &flat(&g, &[1.0, 1.0])).unwrap().values(),
            &[1.0, -1.0]
        );
        assert_eq!(
            offdiag_hvp(&g, &flat(&g, &[0.3, -7.0]), &flat(&g, &[2.0, 5.0]))
                .unwrap()
                .values(),
            &[5.0, -2.0]
        );
        assert!(bilinear_game(0.0).is_err());
        let h = bilinear_game(2.5).unwrap().hessian();
        assert_eq!(h.add(&h.transpose()).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn bilinear_is_zero_sum() {
        let g = bilinear_game(1.7).unwrap();
        for t in [[0.1, 3.0], [-2.0, 4.5], [1e3, -1e-3]] {
            let l = g.losses(&t).unwrap();
            assert_eq!(l[0] + l[1], 0.0);
        }
    }

    #[test]
    fn four_player_matches_closed_forms() {
        let g = four_player_example();
        let ones = flat(&g, &[1.0; 4]);
        assert_eq!(eval_losses(&g, &ones).unwrap(), vec![3.0, 1.0, -1.0, -3.0]);
        assert_eq!(
            simultaneous_gradient(&g, &ones).unwrap().values(),
            &[3.0, 1.0, -1.0, -3.0]
        );
        assert_eq!(
            offdiag_hvp(&g, &ones, &ones).unwrap().values(),
            &[3.0, 1.0, -1.0, -3.0]
        );
        // ξ = (θ²+θ³+θ⁴, −θ¹+θ³+θ⁴, −θ¹−θ²+θ⁴, −θ¹−θ²−θ³)
        let t = [0.3, -1.2, 2.5, 0.7];
        let xi = g.gradient(&t).unwrap();
        let printed = [
            t[1] + t[2] + t[3],
            -t[0] + t[2] + t[3],
            -t[0] - t[1] + t[3],
            -t[0] - t[1] - t[2],
        ];
        for (a, b) in xi.iter().zip(printed) {
            assert!((a - b).abs() < 1e-15);
        }
        let expected = DenseMatrix::from_rows(&[
            vec![0.0, 1.0, 1.0, 1.0],
            vec![-1.0, 0.0, 1.0, 1.0],
            vec![-1.0, -1.0, 0.0, 1.0],
            vec![-1.0, -1.0, -1.0, 0.0],
        ])
        .unwrap();
        assert_eq!(g.hessian(), expected);
    }

    #[test]
    fn four_player_pairwise_zero_sum() {
        let g = four_player_example();
        // coefficient of θⁱθʲ in Lⁱ is the negative of the one in Lʲ
        let h = g.hessian();
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(h[(i, j)], -h[(j, i)]);
            }
        }
    }

    #[test]
    fn random_game_is_deterministic_and_stationary_at_zero() {
        let a = random_quadratic_polymatrix(42, &[2, 2, 2], 1.0, 1.0).unwrap();
        let b = random_quadratic_polymatrix(42, &[2, 2, 2], 1.0, 1.0).unwrap();
        assert_eq!(a, b);
        assert!(a.gradient(&[0.0; 6]).unwrap().iter().all(|&x| x == 0.0));
        let c = random_quadratic_polymatrix(43, &[2, 2, 2], 1.0, 1.0).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn scales_share_structure() {
        let a1 = random_quadratic_polymatrix(5, &[2, 2, 2], 1.0, 1.0).unwrap();
        let a10 = random_quadratic_polymatrix(5, &[2, 2, 2], 1.0, 10.0).unwrap();
        let s1 = a1.hessian().add(&a1.hessian().transpose()).unwrap();
        let s10 = a10.hessian().add(&a10.hessian().transpose()).unwrap();
        assert!(s1.sub(&s10).unwrap().max_abs() < 1e-12);
        let k1 = a1.hessian().sub(&a1.hessian().transpose()).unwrap();
        let k10 = a10.hessian().sub(&a10.hessian().transpose()).unwrap();
        assert!(k1.scale(10.0).sub(&k10).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn quadratic_losses_match_definition() {
        let g = random_quadratic_polymatrix(7, &[2, 1], 1.0, 3.0).unwrap();
        let b = g.hessian();
        let t = [0.4, -0.9, 1.3];
        let l = g.losses(&t).unwrap();
        let l0 = 0.5 * (t[0] * (b[(0, 0)] * t[0] + b[(0, 1)] * t[1])
            + t[1] * (b[(1, 0)] * t[0] + b[(1, 1)] * t[1]))
            + t[0] * b[(0, 2)] * t[2]
            + t[1] * b[(1, 2)] * t[2];
        let l1 = 0.5 * t[2] * b[(2, 2)] * t[2] + t[2] * (b[(2, 0)] * t[0] + b[(2, 1)] * t[1]);
        assert!((l[0] - l0).abs() < 1e-14 && (l[1] - l1).abs() < 1e-14);
    }

    #[test]
    fn decoupled_game_has_no_interactions() {
        let g = random_quadratic_polymatrix(1, &[1, 1], 1.0, 0.0)
            .unwrap()
            .with_offdiag_zeroed();
        assert_eq!(g.offdiag_hvp(&[1.0, 2.0], &[3.0, -4.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn zero_sum_pairs() {
        let g = pairwise_zero_sum_quadratic(3, &[2, 2, 2], 1.0, 5.0).unwrap();
        let p = g.partition().clone();
        let h = g.hessian();
        for i in 0..3 {
            for j in 0..3 {
                if i == j {
                    continue;
                }
                let (ri, rj) = (p.range(i).unwrap(), p.range(j).unwrap());
                for a in ri.clone() {
                    for b in rj.clone() {
                        assert!((h[(a, b)] + h[(b, a)]).abs() < 1e-14);
                    }
                }
            }
        }
    }
}
