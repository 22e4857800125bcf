//! Vector helpers, small dense matrices, matrix-free solvers and spectral
//! estimators.

use std::fmt;
use std::ops::{Index, IndexMut};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `y += alpha * x`
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

pub fn scaled(alpha: f64, a: &[f64]) -> Vec<f64> {
    a.iter().map(|x| alpha * x).collect()
}

fn check_len(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::DimensionMismatch { expected, got });
    }
    Ok(())
}

/// Row-major dense matrix for small (d ≲ 200) problems.
#[derive(Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for DenseMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "DenseMatrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            writeln!(f, "  {:?}", self.row(r))?;
        }
        write!(f, "]")
    }
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            check_len(cols, row.len())?;
            data.extend_from_slice(row);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn from_row_major(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        check_len(rows * cols, data.len())?;
        Ok(Self { rows, cols, data })
    }

    /// Assemble column by column from a linear map.
    pub fn from_operator(op: &dyn LinearOperator) -> Result<Self> {
        let n = op.dim();
        let mut m = Self::zeros(n, n);
        let mut e = vec![0.0; n];
        for c in 0..n {
            e[c] = 1.0;
            let col = op.apply(&e)?;
            check_len(n, col.len())?;
            for (r, v) in col.into_iter().enumerate() {
                m[(r, c)] = v;
            }
            e[c] = 0.0;
        }
        Ok(m)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        check_len(self.cols, v.len())?;
        Ok((0..self.rows).map(|r| dot(self.row(r), v)).collect())
    }

    pub fn transpose_matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        check_len(self.rows, v.len())?;
        let mut out = vec![0.0; self.cols];
        for (r, &vr) in v.iter().enumerate() {
            axpy(vr, self.row(r), &mut out);
        }
        Ok(out)
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |r, c| self[(c, r)])
    }

    fn check_same_shape(&self, other: &Self) -> Result<()> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::DimensionMismatch {
                expected: self.rows * self.cols,
                got: other.rows * other.cols,
            });
        }
        Ok(())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.check_same_shape(other)?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Ok(Self { data, ..*self })
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.check_same_shape(other)?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Ok(Self { data, ..*self })
    }

    pub fn scale(&self, alpha: f64) -> Self {
        Self {
            data: self.data.iter().map(|x| alpha * x).collect(),
            ..*self
        }
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        check_len(self.cols, other.rows)?;
        let mut out = Self::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(r, k)];
                if a == 0.0 {
                    continue;
                }
                let orow = other.row(k);
                let dst = &mut out.data[r * other.cols..(r + 1) * other.cols];
                axpy(a, orow, dst);
            }
        }
        Ok(out)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn frobenius(&self) -> f64 {
        norm(&self.data)
    }

    /// Square sub-block `[r0, r0+nr) × [c0, c0+nc)`.
    pub fn block(&self, r0: usize, nr: usize, c0: usize, nc: usize) -> Self {
        Self::from_fn(nr, nc, |r, c| self[(r0 + r, c0 + c)])
    }

    pub fn lu(&self) -> Result<Lu> {
        Lu::factor(self)
    }

    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        self.lu()?.solve(b)
    }

    /// `self⁻¹ · rhs` column by column.
    pub fn solve_matrix(&self, rhs: &Self) -> Result<Self> {
        check_len(self.rows, rhs.rows)?;
        let lu = self.lu()?;
        let mut out = Self::zeros(rhs.rows, rhs.cols);
        let mut col = vec![0.0; rhs.rows];
        for c in 0..rhs.cols {
            for r in 0..rhs.rows {
                col[r] = rhs[(r, c)];
            }
            let x = lu.solve(&col)?;
            for r in 0..rhs.rows {
                out[(r, c)] = x[r];
            }
        }
        Ok(out)
    }
}

impl Index<(usize, usize)> for DenseMatrix {
    type Output = f64;
    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for DenseMatrix {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }
}

/// LU factorization with partial pivoting.
#[derive(Debug, Clone)]
pub struct Lu {
    n: usize,
    lu: Vec<f64>,
    perm: Vec<usize>,
}

impl Lu {
    fn factor(m: &DenseMatrix) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::DimensionMismatch {
                expected: m.rows,
                got: m.cols,
            });
        }
        let n = m.rows;
        let mut lu = m.data.clone();
        let mut perm: Vec<usize> = (0..n).collect();
        let scale = m.max_abs();
        let floor = f64::EPSILON * scale * n as f64;
        for k in 0..n {
            let (p, pmax) = (k..n)
                .map(|r| (r, lu[r * n + k].abs()))
                .fold((k, -1.0), |acc, x| if x.1 > acc.1 { x } else { acc });
            if pmax <= floor || !pmax.is_finite() {
                return Err(Error::Singular(format!(
                    "pivot {pmax:.3e} at column {k} (scale {scale:.3e})"
                )));
            }
            if p != k {
                for c in 0..n {
                    lu.swap(k * n + c, p * n + c);
                }
                perm.swap(k, p);
            }
            let pivot = lu[k * n + k];
            for r in k + 1..n {
                let f = lu[r * n + k] / pivot;
                lu[r * n + k] = f;
                if f != 0.0 {
                    for c in k + 1..n {
                        lu[r * n + c] -= f * lu[k * n + c];
                    }
                }
            }
        }
        Ok(Self { n, lu, perm })
    }

    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        let n = self.n;
        check_len(n, b.len())?;
        let mut x: Vec<f64> = self.perm.iter().map(|&p| b[p]).collect();
        for r in 0..n {
            let s = dot(&self.lu[r * n..r * n + r], &x[..r]);
            x[r] -= s;
        }
        for r in (0..n).rev() {
            let s = dot(&self.lu[r * n + r + 1..(r + 1) * n], &x[r + 1..]);
            x[r] = (x[r] - s) / self.lu[r * n + r];
        }
        Ok(x)
    }
}

/// A square linear map given only through its action on vectors.
pub trait LinearOperator {
    fn dim(&self) -> usize;

    fn apply(&self, v: &[f64]) -> Result<Vec<f64>>;

    fn apply_transpose(&self, _v: &[f64]) -> Result<Vec<f64>> {
        Err(Error::Unsupported("operator has no transpose".into()))
    }
}

impl LinearOperator for DenseMatrix {
    fn dim(&self) -> usize {
        self.rows
    }

    fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        self.matvec(v)
    }

    fn apply_transpose(&self, v: &[f64]) -> Result<Vec<f64>> {
        self.transpose_matvec(v)
    }
}

/// Closure-backed operator, handy in tests and for one-off compositions.
pub struct FnOperator<F, T> {
    dim: usize,
    apply: F,
    transpose: Option<T>,
}

impl<F> FnOperator<F, fn(&[f64]) -> Result<Vec<f64>>>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    pub fn new(dim: usize, apply: F) -> Self {
        Self {
            dim,
            apply,
            transpose: None,
        }
    }
}

impl<F, T> FnOperator<F, T>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
    T: Fn(&[f64]) -> Result<Vec<f64>>,
{
    pub fn with_transpose(dim: usize, apply: F, transpose: T) -> Self {
        Self {
            dim,
            apply,
            transpose: Some(transpose),
        }
    }
}

impl<F, T> LinearOperator for FnOperator<F, T>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
    T: Fn(&[f64]) -> Result<Vec<f64>>,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        (self.apply)(v)
    }

    fn apply_transpose(&self, v: &[f64]) -> Result<Vec<f64>> {
        match &self.transpose {
            Some(t) => t(v),
            None => Err(Error::Unsupported("operator has no transpose".into())),
        }
    }
}

/// Outcome of an inner conjugate-gradient solve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CgReport {
    pub iterations: usize,
    /// `‖MᵀMx − Mᵀy‖ / ‖Mᵀy‖` of the returned iterate, recomputed explicitly.
    pub relative_residual: f64,
    pub converged: bool,
    pub warm_started: bool,
}

pub const DEFAULT_CG_EPS: f64 = 1e-6;

/// Default iteration cap: `10·d`, at most 500.
pub fn default_cg_max_iter(dim: usize) -> usize {
    (10 * dim).clamp(1, 500)
}

fn normal_apply(op: &dyn LinearOperator, x: &[f64]) -> Result<Vec<f64>> {
    let mx = op.apply(x)?;
    op.apply_transpose(&mx)
}

/// Solve `Mx = y` through the normal equations `MᵀMx = Mᵀy` with conjugate
/// gradients.
///
/// Stops once `‖MᵀMx − Mᵀy‖ ≤ ε‖Mᵀy‖` holds for the explicitly recomputed
/// residual. Without convergence the iterate with the smallest residual seen
/// so far is returned and `converged` is false. A zero-curvature direction
/// ends the iteration early instead of dividing by zero.
pub fn conjugate_gradient_normal(
    op: &dyn LinearOperator,
    y: &[f64],
    x0: Option<&[f64]>,
    eps: f64,
    max_iter: usize,
) -> Result<(Vec<f64>, CgReport)> {
    let n = op.dim();
    check_len(n, y.len())?;
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("cg tolerance must be positive, got {eps}")));
    }
    if max_iter == 0 {
        return Err(Error::InvalidArgument("cg max_iter must be at least 1".into()));
    }
    if let Some(x0) = x0 {
        check_len(n, x0.len())?;
    }
    let warm_started = x0.is_some_and(|x| x.iter().any(|&v| v != 0.0));

    let b = op.apply_transpose(y)?;
    let bnorm = norm(&b);
    if bnorm == 0.0 {
        return Ok((
            vec![0.0; n],
            CgReport {
                iterations: 0,
                relative_residual: 0.0,
                converged: true,
                warm_started,
            },
        ));
    }

    let mut x = match x0 {
        Some(x0) if warm_started => x0.to_vec(),
        _ => vec![0.0; n],
    };
    let mut r = if warm_started {
        sub(&b, &normal_apply(op, &x)?)
    } else {
        b.clone()
    };
    let mut rr = dot(&r, &r);
    let true_rel = rr.sqrt() / bnorm;
    if true_rel <= eps {
        return Ok((
            x,
            CgReport {
                iterations: 0,
                relative_residual: true_rel,
                converged: true,
                warm_started,
            },
        ));
    }

    let mut best_x = x.clone();
    let mut best_rel = true_rel;
    let mut p = r.clone();
    let mut iterations = 0;

    while iterations < max_iter {
        let q = normal_apply(op, &p)?;
        let curvature = dot(&p, &q);
        if !(curvature > 0.0) || !curvature.is_finite() {
            break;
        }
        iterations += 1;
        let alpha = rr / curvature;
        axpy(alpha, &p, &mut x);
        axpy(-alpha, &q, &mut r);
        let mut rr_new = dot(&r, &r);
        let mut rel = rr_new.sqrt() / bnorm;

        if rel <= eps {
            // the recursive residual drifts; only stop on the true one
            let r_true = sub(&b, &normal_apply(op, &x)?);
            let rel_true = norm(&r_true) / bnorm;
            if rel_true <= eps {
                return Ok((
                    x,
                    CgReport {
                        iterations,
                        relative_residual: rel_true,
                        converged: true,
                        warm_started,
                    },
                ));
            }
            r = r_true;
            rr_new = dot(&r, &r);
            rel = rel_true;
            p.iter_mut().for_each(|v| *v = 0.0);
        }
        if rel < best_rel {
            best_rel = rel;
            best_x.copy_from_slice(&x);
        }
        let beta = rr_new / rr;
        for (pi, ri) in p.iter_mut().zip(&r) {
            *pi = ri + beta * *pi;
        }
        rr = rr_new;
    }

    let rel = norm(&sub(&b, &normal_apply(op, &best_x)?)) / bnorm;
    Ok((
        best_x,
        CgReport {
            iterations,
            relative_residual: rel,
            converged: rel <= eps,
            warm_started,
        },
    ))
}

const RESTART_SEED: u64 = 0x005e_ed0f_5eed;
pub const DEFAULT_RESTARTS: usize = 5;

fn random_unit(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        let nv = norm(&v);
        if nv > 1e-3 {
            return scaled(1.0 / nv, &v);
        }
    }
}

/// Largest `|λ|` of a symmetric operator.
///
/// Power iteration on `S²` (positive semi-definite, so opposite-signed
/// eigenvalues cannot cancel), accepted once the estimate after `2k`
/// iterations agrees with the one after `k` to relative accuracy `tol`.
pub fn spectral_norm_symmetric(op: &dyn LinearOperator, tol: f64, max_iter: usize) -> Result<f64> {
    let n = op.dim();
    if n == 0 {
        return Err(Error::InvalidArgument("operator of dimension 0".into()));
    }
    let mut best: f64 = 0.0;
    for restart in 0..DEFAULT_RESTARTS {
        let mut rng = ChaCha8Rng::seed_from_u64(RESTART_SEED + restart as u64);
        let mut v = random_unit(&mut rng, n);
        let mut estimate = 0.0;
        let mut checkpoint = f64::NAN;
        let mut next_check = 8;
        for it in 1..=max_iter.max(1) {
            let sv = op.apply(&v)?;
            estimate = norm(&sv);
            if estimate == 0.0 {
                break;
            }
            let s2v = op.apply(&sv)?;
            let n2 = norm(&s2v);
            if n2 == 0.0 {
                break;
            }
            v = scaled(1.0 / n2, &s2v);
            if it == next_check {
                if (estimate - checkpoint).abs() <= tol * estimate {
                    break;
                }
                checkpoint = estimate;
                next_check *= 2;
            }
        }
        best = best.max(estimate);
    }
    Ok(best)
}

/// Spectral-radius estimate and whether the doubling test was met.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectralRadius {
    pub value: f64,
    pub accurate: bool,
    pub iterations: usize,
}

fn eig2_max_modulus(b: [[f64; 2]; 2]) -> f64 {
    let tr = b[0][0] + b[1][1];
    let det = b[0][0] * b[1][1] - b[0][1] * b[1][0];
    let disc = tr * tr / 4.0 - det;
    if disc >= 0.0 {
        let s = disc.sqrt();
        (tr / 2.0 + s).abs().max((tr / 2.0 - s).abs())
    } else {
        // complex pair: |λ|² = det
        det.max(0.0).sqrt()
    }
}

/// Orthonormalize two columns; a collapsed second column is replaced by a
/// fresh random direction.
fn orthonormal_pair(
    a: &[f64],
    b: &[f64],
    rng: &mut ChaCha8Rng,
) -> Option<(Vec<f64>, Vec<f64>)> {
    let na = norm(a);
    if na == 0.0 || !na.is_finite() {
        return None;
    }
    let q1 = scaled(1.0 / na, a);
    let mut q2 = b.to_vec();
    let mut tries = 0;
    loop {
        let c = dot(&q1, &q2);
        axpy(-c, &q1, &mut q2);
        let c = dot(&q1, &q2);
        axpy(-c, &q1, &mut q2);
        let n2 = norm(&q2);
        if n2 > 1e-10 * norm(b).max(1e-300) && n2 > 0.0 {
            return Some((q1, scaled(1.0 / n2, &q2)));
        }
        tries += 1;
        if tries > 8 {
            return Some((q1, vec![0.0; a.len()]));
        }
        q2 = random_unit(rng, a.len());
    }
}

/// `max |λ(F)|` for a general square operator.
///
/// Two-dimensional subspace iteration with a 2×2 Rayleigh–Ritz projection,
/// so a dominant complex-conjugate pair is resolved exactly rather than
/// oscillating. Each restart starts from a fixed sub-seed; the maximum over
/// restarts is returned. `accurate` is set when every restart passed the
/// doubled-iteration agreement test at relative accuracy `tol`.
pub fn spectral_radius(
    op: &dyn LinearOperator,
    tol: f64,
    max_iter: usize,
    restarts: usize,
) -> Result<SpectralRadius> {
    let n = op.dim();
    if n == 0 {
        return Ok(SpectralRadius {
            value: 0.0,
            accurate: true,
            iterations: 0,
        });
    }
    if n == 1 {
        let v = op.apply(&[1.0])?[0].abs();
        return Ok(SpectralRadius {
            value: v,
            accurate: true,
            iterations: 1,
        });
    }
    let mut best = SpectralRadius {
        value: 0.0,
        accurate: true,
        iterations: 0,
    };
    for restart in 0..restarts.max(1) {
        let mut rng = ChaCha8Rng::seed_from_u64(RESTART_SEED ^ (0x9e37 * (restart as u64 + 1)));
        let a = random_unit(&mut rng, n);
        let b = random_unit(&mut rng, n);
        let Some((mut q1, mut q2)) = orthonormal_pair(&a, &b, &mut rng) else {
            continue;
        };
        let mut estimate = 0.0;
        let mut checkpoint = f64::NAN;
        let mut next_check = 16;
        let mut accurate = false;
        let mut iterations = 0;
        for it in 1..=max_iter.max(1) {
            iterations = it;
            let y1 = op.apply(&q1)?;
            let y2 = op.apply(&q2)?;
            let ritz = [
                [dot(&q1, &y1), dot(&q1, &y2)],
                [dot(&q2, &y1), dot(&q2, &y2)],
            ];
            estimate = eig2_max_modulus(ritz);
            match orthonormal_pair(&y1, &y2, &mut rng) {
                Some((a, b)) => {
                    q1 = a;
                    q2 = b;
                }
                None => {
                    // F annihilates the subspace
                    accurate = true;
                    break;
                }
            }
            if it == next_check {
                let scale = estimate.max(f64::MIN_POSITIVE);
                if (estimate - checkpoint).abs() <= tol * scale {
                    accurate = true;
                    break;
                }
                checkpoint = estimate;
                next_check *= 2;
            }
        }
        best.iterations = best.iterations.max(iterations);
        best.accurate &= accurate;
        best.value = best.value.max(estimate);
    }
    Ok(best)
}

pub const DEFAULT_SPECTRAL_TOL: f64 = 1e-10;
pub const DEFAULT_SPECTRAL_MAX_ITER: usize = 200_000;
