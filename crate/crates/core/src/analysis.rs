//! Dense game-Hessian analysis: S/A decomposition, the certified PCGD step
//! bound, update-map Jacobians and local-convergence verdicts.

use crate::error::{Error, Result};
use crate::game::{BlockPartition, Game};
use crate::linalg::{
    self, spectral_norm_symmetric, spectral_radius, DenseMatrix, SpectralRadius,
    DEFAULT_RESTARTS, DEFAULT_SPECTRAL_MAX_ITER, DEFAULT_SPECTRAL_TOL,
};

/// Largest dimension assembled densely unless the caller raises it.
pub const DEFAULT_DENSE_CAP: usize = 200;
/// Central-difference step for Hessian assembly without an analytic oracle.
pub const FD_STEP: f64 = 1e-5;
/// `ρ` must stay below `1 − margin` to be flagged convergent.
pub const RHO_MARGIN: f64 = 1e-8;

/// A small dense game Hessian with its symmetric/antisymmetric and
/// block-diagonal/off-diagonal parts.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseGameHessian {
    pub h: DenseMatrix,
    pub partition: BlockPartition,
    /// `(H + Hᵀ)/2`
    pub symmetric: DenseMatrix,
    /// `(H − Hᵀ)/2`
    pub antisymmetric: DenseMatrix,
    /// block-diagonal part `H_d`
    pub diagonal_blocks: DenseMatrix,
    /// block-off-diagonal part `H_o = H − H_d`
    pub offdiag_blocks: DenseMatrix,
}

impl DenseGameHessian {
    pub fn new(h: DenseMatrix, partition: BlockPartition) -> Result<Self> {
        if !h.is_square() || h.rows() != partition.total() {
            return Err(Error::DimensionMismatch {
                expected: partition.total(),
                got: h.rows(),
            });
        }
        let (symmetric, antisymmetric, diagonal_blocks, offdiag_blocks) = decompose(&h, &partition)?;
        Ok(Self {
            h,
            partition,
            symmetric,
            antisymmetric,
            diagonal_blocks,
            offdiag_blocks,
        })
    }
}

/// `(S, A, H_d, H_o)` for a square `h`.
pub fn decompose(
    h: &DenseMatrix,
    partition: &BlockPartition,
) -> Result<(DenseMatrix, DenseMatrix, DenseMatrix, DenseMatrix)> {
    let n = h.rows();
    if !h.is_square() {
        return Err(Error::InvalidArgument("decompose needs a square matrix".into()));
    }
    partition.check(n)?;
    let s = DenseMatrix::from_fn(n, n, |r, c| 0.5 * (h[(r, c)] + h[(c, r)]));
    let a = DenseMatrix::from_fn(n, n, |r, c| 0.5 * (h[(r, c)] - h[(c, r)]));
    let owner: Vec<usize> = (0..n).map(|k| partition.owner(k).unwrap()).collect();
    let hd = DenseMatrix::from_fn(n, n, |r, c| if owner[r] == owner[c] { h[(r, c)] } else { 0.0 });
    let ho = DenseMatrix::from_fn(n, n, |r, c| if owner[r] == owner[c] { 0.0 } else { h[(r, c)] });
    Ok((s, a, hd, ho))
}

fn unit(n: usize, j: usize) -> Vec<f64> {
    let mut e = vec![0.0; n];
    e[j] = 1.0;
    e
}

/// Dense `H(θ)`: columns from the analytic Hessian oracle when the game has
/// one, otherwise central differences of `ξ` with step [`FD_STEP`].
pub fn assemble_hessian(game: &dyn Game, theta: &[f64], cap: usize) -> Result<DenseGameHessian> {
    let p = game.partition().clone();
    let d = p.total();
    p.check(theta.len())?;
    if d > cap {
        return Err(Error::CapExceeded {
            what: "dense Hessian dimension",
            size: d,
            cap,
        });
    }
    let mut cols = Vec::with_capacity(d);
    let analytic = match game.hvp(theta, &unit(d, 0)) {
        Ok(c0) => {
            cols.push(c0);
            true
        }
        Err(Error::Unsupported(_)) => false,
        Err(e) => return Err(e),
    };
    if analytic {
        for j in 1..d {
            cols.push(game.hvp(theta, &unit(d, j))?);
        }
    } else {
        for j in 0..d {
            let mut plus = theta.to_vec();
            let mut minus = theta.to_vec();
            plus[j] += FD_STEP;
            minus[j] -= FD_STEP;
            let gp = game.gradient(&plus)?;
            let gm = game.gradient(&minus)?;
            cols.push(
                gp.iter()
                    .zip(&gm)
                    .map(|(a, b)| (a - b) / (2.0 * FD_STEP))
                    .collect(),
            );
        }
    }
    for c in &cols {
        p.check(c.len())?;
        if let Some(block) = p.first_non_finite_block(c) {
            return Err(Error::NonFinite {
                what: "assembled Hessian",
                block,
            });
        }
    }
    let h = DenseMatrix::from_fn(d, d, |r, c| cols[c][r]);
    DenseGameHessian::new(h, p)
}

/// `‖S‖` for a symmetric matrix.
pub fn symmetric_norm(s: &DenseMatrix) -> Result<f64> {
    spectral_norm_symmetric(s, DEFAULT_SPECTRAL_TOL, DEFAULT_SPECTRAL_MAX_ITER)
}

/// Certified step-size bound `1/(4‖S‖)`; `+∞` when `S = 0`.
pub fn theorem_step_bound(s: &DenseMatrix) -> Result<f64> {
    Ok(bound_from_norm(symmetric_norm(s)?, 4.0))
}

/// The looser `1/(2‖S‖)` bound, recorded alongside but never certified.
pub fn relaxed_step_bound(s: &DenseMatrix) -> Result<f64> {
    Ok(bound_from_norm(symmetric_norm(s)?, 2.0))
}

fn bound_from_norm(norm: f64, factor: f64) -> f64 {
    if norm == 0.0 {
        f64::INFINITY
    } else {
        1.0 / (factor * norm)
    }
}

/// Jacobian of the PCGD update map at a fixed point:
/// `I − η(I + ηH_o)⁻¹H`.
pub fn pcgd_update_jacobian(h: &DenseMatrix, partition: &BlockPartition, eta: f64) -> Result<DenseMatrix> {
    let (_, _, _, ho) = decompose(h, partition)?;
    let n = h.rows();
    let m = DenseMatrix::identity(n).add(&ho.scale(eta))?;
    let sol = m.solve_matrix(h)?;
    DenseMatrix::identity(n).sub(&sol.scale(eta))
}

/// Jacobian of simultaneous gradient descent: `I − ηH`.
pub fn simgd_jacobian(h: &DenseMatrix, eta: f64) -> Result<DenseMatrix> {
    DenseMatrix::identity(h.rows()).sub(&h.scale(eta))
}

/// Spectral radius of a dense matrix from its real Schur form.
///
/// Falls back to matrix-free subspace iteration if the Schur iteration does
/// not converge.
pub fn jacobian_spectral_radius(j: &DenseMatrix) -> Result<SpectralRadius> {
    if !j.is_square() {
        return Err(Error::InvalidArgument(format!(
            "spectral radius needs a square matrix, got {}x{}",
            j.rows(),
            j.cols()
        )));
    }
    let n = j.rows();
    let mat = nalgebra::DMatrix::from_row_slice(n, n, j.data());
    match mat.try_schur(f64::EPSILON, SCHUR_MAX_SWEEPS) {
        Some(schur) => Ok(SpectralRadius {
            value: schur.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max),
            accurate: true,
            iterations: 0,
        }),
        None => spectral_radius(j, DEFAULT_SPECTRAL_TOL, DEFAULT_SPECTRAL_MAX_ITER, DEFAULT_RESTARTS),
    }
}

/// Iteration budget of the dense Schur decomposition.
const SCHUR_MAX_SWEEPS: usize = 10_000;

/// Smallest eigenvalue of a symmetric matrix via power iteration on the
/// shifted matrix `‖B‖·I − B`.
pub fn smallest_eigenvalue_symmetric(b: &DenseMatrix) -> Result<f64> {
    let c = symmetric_norm(b)?;
    if c == 0.0 {
        return Ok(0.0);
    }
    let shifted = DenseMatrix::identity(b.rows()).scale(c).sub(b)?;
    Ok(c - symmetric_norm(&shifted)?)
}

/// Second-order surrogate for a local Nash equilibrium: `‖ξ(θ)‖ ≤ tol` and
/// every own-player Hessian block has smallest eigenvalue `≥ −tol`.
pub fn check_local_nash(game: &dyn Game, theta: &[f64], tol: f64) -> Result<bool> {
    let xi = game.gradient(theta)?;
    if !(linalg::norm(&xi) <= tol) {
        return Ok(false);
    }
    let hess = assemble_hessian(game, theta, DEFAULT_DENSE_CAP)?;
    local_nash_blocks(&hess, tol)
}

/// Diagonal-block PSD half of [`check_local_nash`] on an assembled Hessian.
pub fn local_nash_blocks(hess: &DenseGameHessian, tol: f64) -> Result<bool> {
    for w in hess.partition.offsets().windows(2) {
        let n = w[1] - w[0];
        let block = hess.h.block(w[0], n, w[0], n);
        let sym = DenseMatrix::from_fn(n, n, |r, c| 0.5 * (block[(r, c)] + block[(c, r)]));
        if smallest_eigenvalue_symmetric(&sym)? < -tol {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Local-convergence verdict for PCGD at a stationary point.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceVerdict {
    pub eta: f64,
    pub spectral_radius: f64,
    pub radius_accurate: bool,
    pub s_norm: f64,
    /// `1/(4‖S‖)`
    pub theorem_bound: f64,
    /// `1/(2‖S‖)`
    pub relaxed_bound: f64,
    pub is_local_nash: bool,
    pub converges_locally: bool,
}

impl ConvergenceVerdict {
    pub const CSV_HEADER: &'static str =
        "eta,spectral_radius,radius_accurate,s_norm,theorem_bound,relaxed_bound,is_local_nash,converges_locally";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.eta,
            self.spectral_radius,
            self.radius_accurate,
            self.s_norm,
            self.theorem_bound,
            self.relaxed_bound,
            self.is_local_nash,
            self.converges_locally
        )
    }
}

/// Tolerance on `‖ξ‖` and block eigenvalues used by [`classify_convergence`].
pub const STATIONARITY_TOL: f64 = 1e-8;

/// Assemble `H(θ̄)`, build the PCGD Jacobian and apply the spectral-radius
/// criterion.
pub fn classify_convergence(game: &dyn Game, theta: &[f64], eta: f64) -> Result<ConvergenceVerdict> {
    let xi = game.gradient(theta)?;
    let stationary = linalg::norm(&xi) <= STATIONARITY_TOL;
    let hess = assemble_hessian(game, theta, DEFAULT_DENSE_CAP)?;
    let is_local_nash = stationary && local_nash_blocks(&hess, STATIONARITY_TOL)?;
    classify_hessian(&hess, eta, is_local_nash)
}

/// [`classify_convergence`] on an already assembled Hessian.
pub fn classify_hessian(
    hess: &DenseGameHessian,
    eta: f64,
    is_local_nash: bool,
) -> Result<ConvergenceVerdict> {
    if !(eta > 0.0) || !eta.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "step size eta must be positive and finite, got {eta}"
        )));
    }
    let s_norm = symmetric_norm(&hess.symmetric)?;
    let jac = pcgd_update_jacobian(&hess.h, &hess.partition, eta)?;
    let rho = jacobian_spectral_radius(&jac)?;
    Ok(ConvergenceVerdict {
        eta,
        spectral_radius: rho.value,
        radius_accurate: rho.accurate,
        s_norm,
        theorem_bound: bound_from_norm(s_norm, 4.0),
        relaxed_bound: bound_from_norm(s_norm, 2.0),
        is_local_nash,
        converges_locally: rho.value < 1.0 - RHO_MARGIN,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench::{
        bilinear_game, four_player_example, pairwise_zero_sum_quadratic,
        random_quadratic_polymatrix, QuadraticPolymatrixGame,
    };

    fn m(rows: &[&[f64]]) -> DenseMatrix {
        DenseMatrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    /// Game without an analytic Hessian oracle: forces finite differences.
    struct GradOnly<G>(G);

    impl<G: Game> Game for GradOnly<G> {
        fn partition(&self) -> &BlockPartition {
            self.0.partition()
        }
        fn losses(&self, t: &[f64]) -> Result<Vec<f64>> {
            self.0.losses(t)
        }
        fn gradient(&self, t: &[f64]) -> Result<Vec<f64>> {
            self.0.gradient(t)
        }
        fn offdiag_hvp(&self, t: &[f64], v: &[f64]) -> Result<Vec<f64>> {
            self.0.offdiag_hvp(t, v)
        }
    }

    fn nalgebra_rho(j: &DenseMatrix) -> f64 {
        let n = j.rows();
        let mat = nalgebra::DMatrix::from_fn(n, n, |r, c| j[(r, c)]);
        mat.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    #[test]
    fn assemble_examples() {
        let g = bilinear_game(1.0).unwrap();
        for t in [[0.0, 0.0], [3.0, -2.0]] {
            let h = assemble_hessian(&g, &t, 200).unwrap();
            assert_eq!(h.h, m(&[&[0.0, 1.0], &[-1.0, 0.0]]));
        }
        let f = four_player_example();
        assert_eq!(assemble_hessian(&f, &[0.5; 4], 200).unwrap().h, f.hessian());

        let p = BlockPartition::scalar_players(3).unwrap();
        let id = QuadraticPolymatrixGame::from_blocks(p, DenseMatrix::identity(3)).unwrap();
        assert_eq!(assemble_hessian(&id, &[1.0, 2.0, 3.0], 200).unwrap().h, DenseMatrix::identity(3));
        assert!(matches!(
            assemble_hessian(&id, &[1.0, 2.0, 3.0], 2),
            Err(Error::CapExceeded { .. })
        ));
    }

    #[test]
    fn finite_difference_assembly_matches_analytic() {
        let g = random_quadratic_polymatrix(4, &[2, 2, 2], 1.0, 3.0).unwrap();
        let fd = assemble_hessian(&GradOnly(&g), &[0.1; 6], 200).unwrap();
        assert!(fd.h.sub(g.hessian()).unwrap().max_abs() < 1e-8);
    }

    #[test]
    fn hessian_constant_for_quadratic_games() {
        let g = random_quadratic_polymatrix(11, &[2, 2, 2], 1.0, 10.0).unwrap();
        let h0 = assemble_hessian(&g, &[0.0; 6], 200).unwrap().h;
        for t in [[1.0; 6], [-3.0, 2.0, 0.1, 7.0, -0.5, 4.0]] {
            let h = assemble_hessian(&g, &t, 200).unwrap().h;
            assert!(h.sub(&h0).unwrap().max_abs() <= 1e-12);
        }
    }

    #[test]
    fn decompose_examples() {
        let f = four_player_example();
        let hess = DenseGameHessian::new(f.hessian(), f.partition().clone()).unwrap();
        assert_eq!(hess.symmetric.max_abs(), 0.0);
        assert_eq!(hess.antisymmetric, f.hessian());
        assert_eq!(hess.offdiag_blocks, f.hessian());

        let p = BlockPartition::scalar_players(2).unwrap();
        let h = m(&[&[0.0, 2.0], &[0.0, 0.0]]);
        let (s, a, _, _) = decompose(&h, &p).unwrap();
        assert_eq!(s, m(&[&[0.0, 1.0], &[1.0, 0.0]]));
        assert_eq!(a, m(&[&[0.0, 1.0], &[-1.0, 0.0]]));

        let sym = m(&[&[1.0, 2.0], &[2.0, 5.0]]);
        let (_, a, _, _) = decompose(&sym, &p).unwrap();
        assert_eq!(a.max_abs(), 0.0);
    }

    #[test]
    fn decompose_identities() {
        let g = random_quadratic_polymatrix(8, &[3, 1, 2], 2.0, 7.0).unwrap();
        let hess = DenseGameHessian::new(g.hessian().clone(), g.partition().clone()).unwrap();
        let n = 6;
        for r in 0..n {
            for c in 0..n {
                let h = hess.h[(r, c)];
                let scale = h.abs() + hess.h[(c, r)].abs();
                assert!((hess.symmetric[(r, c)] + hess.antisymmetric[(r, c)] - h).abs() <= f64::EPSILON * scale);
                assert_eq!(hess.antisymmetric[(r, c)], -hess.antisymmetric[(c, r)]);
                assert_eq!(hess.symmetric[(r, c)], hess.symmetric[(c, r)]);
                assert_eq!(hess.diagonal_blocks[(r, c)] + hess.offdiag_blocks[(r, c)], h);
            }
        }
    }

    #[test]
    fn step_bound_examples() {
        let f = four_player_example();
        let hess = DenseGameHessian::new(f.hessian(), f.partition().clone()).unwrap();
        assert_eq!(theorem_step_bound(&hess.symmetric).unwrap(), f64::INFINITY);
        assert!((theorem_step_bound(&DenseMatrix::identity(2)).unwrap() - 0.25).abs() < 1e-12);
        let s = m(&[&[2.0, 1.0], &[1.0, 2.0]]);
        assert!((theorem_step_bound(&s).unwrap() - 1.0 / 12.0).abs() < 1e-12);
        assert!((relaxed_step_bound(&s).unwrap() - 1.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn jacobian_examples() {
        let p = BlockPartition::scalar_players(2).unwrap();
        let j = pcgd_update_jacobian(&DenseMatrix::identity(2), &p, 0.1).unwrap();
        assert!(j.sub(&DenseMatrix::identity(2).scale(0.9)).unwrap().max_abs() < 1e-15);

        let b = bilinear_game(1.0).unwrap().hessian();
        let j = pcgd_update_jacobian(&b, &p, 1.0).unwrap();
        let rho = jacobian_spectral_radius(&j).unwrap();
        assert!((rho.value - 0.5f64.sqrt()).abs() < 1e-10);
        assert!((nalgebra_rho(&j) - 0.5f64.sqrt()).abs() < 1e-12);

        let f = four_player_example();
        for eta in [0.1, 1.0, 10.0, 100.0] {
            let j = pcgd_update_jacobian(&f.hessian(), f.partition(), eta).unwrap();
            let rho = jacobian_spectral_radius(&j).unwrap();
            assert!(rho.value < 1.0, "eta {eta}: {}", rho.value);
            assert!((rho.value - nalgebra_rho(&j)).abs() < 1e-8);
            let sim = jacobian_spectral_radius(&simgd_jacobian(&f.hessian(), eta).unwrap()).unwrap();
            assert!(sim.value > 1.0);
        }
    }

    #[test]
    fn singular_jacobian_system_is_an_error() {
        // I + ηH_o singular: H_o = [[0,1],[1,0]] at η = 1 gives [[1,1],[1,1]]
        let p = BlockPartition::scalar_players(2).unwrap();
        let h = m(&[&[0.0, 1.0], &[1.0, 0.0]]);
        assert!(matches!(pcgd_update_jacobian(&h, &p, 1.0), Err(Error::Singular(_))));
    }

    #[test]
    fn local_nash_examples() {
        let f = four_player_example();
        assert!(check_local_nash(&f, &[0.0; 4], 1e-8).unwrap());
        assert!(!check_local_nash(&f, &[1.0; 4], 1e-8).unwrap());

        let p = BlockPartition::scalar_players(2).unwrap();
        let concave = QuadraticPolymatrixGame::from_blocks(p.clone(), m(&[&[-1.0, 0.0], &[0.0, 1.0]])).unwrap();
        assert!(!check_local_nash(&concave, &[0.0, 0.0], 1e-8).unwrap());

        let g = random_quadratic_polymatrix(3, &[2, 2, 2], 1.0, 10.0).unwrap();
        assert!(check_local_nash(&g, &[0.0; 6], 1e-8).unwrap());
    }

    #[test]
    fn smallest_eigenvalue_matches_oracle() {
        let s = m(&[&[2.0, 1.0, 0.0], &[1.0, -1.0, 0.5], &[0.0, 0.5, 3.0]]);
        let e = nalgebra::DMatrix::from_fn(3, 3, |r, c| s[(r, c)]).symmetric_eigenvalues();
        let min = e.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!((smallest_eigenvalue_symmetric(&s).unwrap() - min).abs() < 1e-8);
    }

    #[test]
    fn classify_examples() {
        let f = four_player_example();
        let v = classify_convergence(&f, &[0.0; 4], 10.0).unwrap();
        assert!(v.converges_locally && v.is_local_nash);
        assert_eq!(v.theorem_bound, f64::INFINITY);

        // potential game diag(1, 2): η > 2/‖S‖ makes |1 − ηλ| > 1
        let p = BlockPartition::scalar_players(2).unwrap();
        let pot = QuadraticPolymatrixGame::from_blocks(p, m(&[&[1.0, 0.0], &[0.0, 2.0]])).unwrap();
        let v = classify_convergence(&pot, &[0.0, 0.0], 1.5).unwrap();
        assert!(!v.converges_locally);
        assert!((v.spectral_radius - 2.0).abs() < 1e-9);
        assert!(v.csv_row().split(',').count() == ConvergenceVerdict::CSV_HEADER.split(',').count());
    }

    #[test]
    fn theorem_bound_certifies_random_games() {
        for seed in 0..30 {
            for a_scale in [1.0, 10.0, 100.0] {
                let g = random_quadratic_polymatrix(seed, &[2, 2, 2], 1.0, a_scale).unwrap();
                let hess = assemble_hessian(&g, &[0.0; 6], 200).unwrap();
                let bound = theorem_step_bound(&hess.symmetric).unwrap();
                let v = classify_hessian(&hess, 0.9 * bound, true).unwrap();
                let j = pcgd_update_jacobian(&hess.h, &hess.partition, 0.9 * bound).unwrap();
                let oracle = nalgebra_rho(&j);
                assert!((v.spectral_radius - oracle).abs() < 1e-6, "seed {seed}: {} vs {oracle}", v.spectral_radius);
                assert!(v.converges_locally, "seed {seed} a {a_scale}: rho {}", v.spectral_radius);
            }
        }
    }

    #[test]
    fn robust_to_competitive_strength() {
        for seed in 0..10 {
            let base = pairwise_zero_sum_quadratic(seed, &[2, 2, 2], 1.0, 1.0).unwrap();
            let s = DenseGameHessian::new(base.hessian().clone(), base.partition().clone()).unwrap();
            let eta = 0.9 * theorem_step_bound(&s.symmetric).unwrap();
            let mut simgd_diverged = false;
            for k in [1.0, 10.0, 100.0, 1000.0] {
                let g = pairwise_zero_sum_quadratic(seed, &[2, 2, 2], 1.0, k).unwrap();
                let j = pcgd_update_jacobian(g.hessian(), g.partition(), eta).unwrap();
                assert!(nalgebra_rho(&j) < 1.0);
                let sim = simgd_jacobian(g.hessian(), eta).unwrap();
                simgd_diverged |= nalgebra_rho(&sim) > 1.0;
            }
            assert!(simgd_diverged);
        }
    }
}
