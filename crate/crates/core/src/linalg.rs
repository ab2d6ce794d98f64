//! Small dense vectors and square matrices.
//!
//! Dimensions here are tiny (a handful up to ~100), so everything is a flat
//! `Vec<f64>` with row-major layout and straightforward loops. Symmetric
//! systems are solved with a Cholesky factorization of whichever sign of the
//! matrix the caller declares to be positive definite.

use alloc::vec;
use alloc::vec::Vec;
use core::ops::{Deref, DerefMut, Index, IndexMut};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LinalgError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("matrix is not {expected:?} (factorization failed with ridge {ridge:e})")]
    NotDefinite { expected: Definiteness, ridge: f64 },
    #[error("matrix is not symmetric (|A_ij - A_ji| = {gap:e})")]
    NotSymmetric { gap: f64 },
    #[error("non-finite entry")]
    NonFinite,
}

/// The sign structure a caller expects of a symmetric matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Definiteness {
    Positive,
    Negative,
}

/// Ridge multipliers (relative to the largest absolute diagonal entry) tried
/// after a plain factorization fails.
pub const RIDGE_LADDER: [f64; 3] = [1e-8, 1e-6, 1e-4];

/// Condition number above which a successful solve logs a warning.
pub const CONDITION_WARN: f64 = 1e8;

/// Neumaier-compensated running sum.
#[derive(Debug, Clone, Copy, Default)]
pub struct CompensatedSum {
    sum: f64,
    compensation: f64,
}

impl CompensatedSum {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if libm::fabs(self.sum) >= libm::fabs(x) {
            self.compensation += (self.sum - t) + x;
        } else {
            self.compensation += (x - t) + self.sum;
        }
        self.sum = t;
    }

    #[inline]
    pub fn value(&self) -> f64 {
        self.sum + self.compensation
    }
}

/// Element-wise compensated accumulator for a fixed-length slice of values.
#[derive(Debug, Clone)]
pub struct CompensatedAccumulator {
    parts: Vec<CompensatedSum>,
}

impl CompensatedAccumulator {
    pub fn new(len: usize) -> Self {
        Self {
            parts: vec![CompensatedSum::new(); len],
        }
    }

    pub fn len(&self) -> usize {
        self.parts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parts.is_empty()
    }

    pub fn add(&mut self, values: &[f64]) {
        debug_assert_eq!(values.len(), self.parts.len());
        for (part, &v) in self.parts.iter_mut().zip(values) {
            part.add(v);
        }
    }

    /// Compensated totals divided by `count`.
    pub fn mean(&self, count: usize) -> Vec<f64> {
        let c = count as f64;
        self.parts.iter().map(|p| p.value() / c).collect()
    }
}

/// Dense real vector.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Vector(Vec<f64>);

impl Vector {
    pub fn new(entries: Vec<f64>) -> Self {
        Self(entries)
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn dot(&self, other: &[f64]) -> f64 {
        self.0.iter().zip(other).map(|(a, b)| a * b).sum()
    }

    pub fn norm_inf(&self) -> f64 {
        self.0.iter().fold(0.0, |m, v| f64::max(m, libm::fabs(*v)))
    }

    pub fn norm2(&self) -> f64 {
        libm::sqrt(self.squared_norm())
    }

    pub fn squared_norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum()
    }

    /// Squared Euclidean distance to `other`.
    pub fn squared_distance(&self, other: &[f64]) -> f64 {
        self.0
            .iter()
            .zip(other)
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self(self.0.iter().map(|v| c * v).collect())
    }

    /// `self + t * direction`.
    pub fn add_scaled(&self, t: f64, direction: &[f64]) -> Self {
        Self(
            self.0
                .iter()
                .zip(direction)
                .map(|(a, d)| a + t * d)
                .collect(),
        )
    }

    pub fn sub(&self, other: &[f64]) -> Self {
        Self(self.0.iter().zip(other).map(|(a, b)| a - b).collect())
    }
}

impl From<Vec<f64>> for Vector {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

impl Deref for Vector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for Vector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

/// Dense square matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    dim: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(dim: usize) -> Self {
        Self {
            dim,
            data: vec![0.0; dim * dim],
        }
    }

    pub fn identity(dim: usize) -> Self {
        let mut m = Self::zeros(dim);
        for i in 0..dim {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn diagonal(diag: &[f64]) -> Self {
        let mut m = Self::zeros(diag.len());
        for (i, &d) in diag.iter().enumerate() {
            m[(i, i)] = d;
        }
        m
    }

    pub fn from_row_major(dim: usize, data: Vec<f64>) -> Result<Self, LinalgError> {
        if data.len() != dim * dim {
            return Err(LinalgError::DimensionMismatch {
                expected: dim * dim,
                found: data.len(),
            });
        }
        Ok(Self { dim, data })
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self, LinalgError> {
        let dim = rows.len();
        let mut data = Vec::with_capacity(dim * dim);
        for row in rows {
            if row.len() != dim {
                return Err(LinalgError::DimensionMismatch {
                    expected: dim,
                    found: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Ok(Self { dim, data })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| f64::max(m, libm::fabs(*v)))
    }

    pub fn max_abs_diagonal(&self) -> f64 {
        (0..self.dim).fold(0.0, |m, i| f64::max(m, libm::fabs(self[(i, i)])))
    }

    pub fn trace(&self) -> f64 {
        (0..self.dim).map(|i| self[(i, i)]).sum()
    }

    pub fn frobenius(&self) -> f64 {
        libm::sqrt(self.data.iter().map(|v| v * v).sum())
    }

    /// Largest `|A_ij - A_ji|`.
    pub fn asymmetry(&self) -> f64 {
        let mut gap = 0.0f64;
        for i in 0..self.dim {
            for j in (i + 1)..self.dim {
                gap = gap.max(libm::fabs(self[(i, j)] - self[(j, i)]));
            }
        }
        gap
    }

    /// Symmetric within `1e-10 * max(1, max|A_ij|)`.
    pub fn is_symmetric(&self) -> bool {
        self.asymmetry() <= 1e-10 * f64::max(1.0, self.max_abs())
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            dim: self.dim,
            data: self.data.iter().map(|v| c * v).collect(),
        }
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.dim);
        for i in 0..self.dim {
            for j in 0..self.dim {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vector {
        let n = self.dim;
        Vector(
            (0..n)
                .map(|i| {
                    self.data[i * n..(i + 1) * n]
                        .iter()
                        .zip(x)
                        .map(|(a, b)| a * b)
                        .sum()
                })
                .collect(),
        )
    }

    pub fn mul(&self, other: &Matrix) -> Matrix {
        let n = self.dim;
        let mut out = Matrix::zeros(n);
        for i in 0..n {
            for k in 0..n {
                let a = self[(i, k)];
                if a == 0.0 {
                    continue;
                }
                for j in 0..n {
                    out.data[i * n + j] += a * other.data[k * n + j];
                }
            }
        }
        out
    }

    pub fn sub(&self, other: &Matrix) -> Matrix {
        Matrix {
            dim: self.dim,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a - b)
                .collect(),
        }
    }

    /// Copy the upper triangle onto the lower one.
    pub fn symmetrize_from_upper(&mut self) {
        for i in 0..self.dim {
            for j in 0..i {
                self.data[i * self.dim + j] = self.data[j * self.dim + i];
            }
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.dim + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.dim + j]
    }
}

/// Lower-triangular Cholesky factor of `sign * A + ridge * I`.
struct Cholesky {
    dim: usize,
    lower: Vec<f64>,
}

impl Cholesky {
    fn factor(a: &Matrix, sign: f64, ridge: f64) -> Option<Self> {
        let n = a.dim;
        let mut l = vec![0.0; n * n];
        for j in 0..n {
            let mut diag = sign * a[(j, j)] + ridge;
            for k in 0..j {
                diag -= l[j * n + k] * l[j * n + k];
            }
            if !(diag > 0.0) || !diag.is_finite() {
                return None;
            }
            let ljj = libm::sqrt(diag);
            l[j * n + j] = ljj;
            for i in (j + 1)..n {
                let mut s = sign * a[(i, j)];
                for k in 0..j {
                    s -= l[i * n + k] * l[j * n + k];
                }
                l[i * n + j] = s / ljj;
            }
        }
        Some(Self { dim: n, lower: l })
    }

    fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.dim;
        let l = &self.lower;
        let mut y = vec![0.0; n];
        for i in 0..n {
            let mut s = b[i];
            for k in 0..i {
                s -= l[i * n + k] * y[k];
            }
            y[i] = s / l[i * n + i];
        }
        let mut x = vec![0.0; n];
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in (i + 1)..n {
                s -= l[k * n + i] * x[k];
            }
            x[i] = s / l[i * n + i];
        }
        x
    }

    /// Lower bound on the condition number from the factor's diagonal.
    fn condition_lower_bound(&self) -> f64 {
        let n = self.dim;
        let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
        for i in 0..n {
            let d = self.lower[i * n + i];
            lo = lo.min(d);
            hi = hi.max(d);
        }
        (hi / lo) * (hi / lo)
    }
}

fn check_system(a: &Matrix, b: &[f64]) -> Result<(), LinalgError> {
    if b.len() != a.dim {
        return Err(LinalgError::DimensionMismatch {
            expected: a.dim,
            found: b.len(),
        });
    }
    if !a.is_finite() || b.iter().any(|v| !v.is_finite()) {
        return Err(LinalgError::NonFinite);
    }
    if !a.is_symmetric() {
        return Err(LinalgError::NotSymmetric { gap: a.asymmetry() });
    }
    Ok(())
}

/// Solve `(A - ridge I) x = b` for negative-definite `A`, or
/// `(A + ridge I) x = b` for positive-definite `A`.
///
/// The ridge always moves the matrix further into its declared definiteness.
pub fn solve_symmetric(
    a: &Matrix,
    b: &[f64],
    ridge: f64,
    expected: Definiteness,
) -> Result<Vector, LinalgError> {
    check_system(a, b)?;
    solve_unchecked(a, b, ridge, expected)
}

fn solve_unchecked(
    a: &Matrix,
    b: &[f64],
    ridge: f64,
    expected: Definiteness,
) -> Result<Vector, LinalgError> {
    let sign = match expected {
        Definiteness::Positive => 1.0,
        Definiteness::Negative => -1.0,
    };
    let chol =
        Cholesky::factor(a, sign, ridge).ok_or(LinalgError::NotDefinite { expected, ridge })?;
    let cond = chol.condition_lower_bound();
    if cond > CONDITION_WARN {
        log::warn!("ill-conditioned symmetric solve (condition >= {cond:e})");
    }
    let mut x = chol.solve(b);
    if sign < 0.0 {
        for v in x.iter_mut() {
            *v = -*v;
        }
    }
    Ok(Vector(x))
}

/// [`solve_symmetric`] with ridge 0, then each step of [`RIDGE_LADDER`]
/// scaled by the largest absolute diagonal entry.
pub fn solve_with_ridge_ladder(
    a: &Matrix,
    b: &[f64],
    expected: Definiteness,
) -> Result<Vector, LinalgError> {
    check_system(a, b)?;
    let scale = a.max_abs_diagonal();
    let mut last = LinalgError::NotDefinite { expected, ridge: 0.0 };
    for ridge in core::iter::once(0.0).chain(RIDGE_LADDER.iter().map(|m| m * scale)) {
        match solve_unchecked(a, b, ridge, expected) {
            Ok(x) => {
                if ridge > 0.0 {
                    log::debug!("symmetric solve needed ridge {ridge:e}");
                }
                return Ok(x);
            }
            Err(e) => last = e,
        }
    }
    Err(last)
}

/// Newton ascent direction `-H^{-1} g` for a criterion with negative-definite
/// Hessian `H`.
pub fn newton_direction(hessian: &Matrix, gradient: &[f64]) -> Result<Vector, LinalgError> {
    let x = solve_with_ridge_ladder(hessian, gradient, Definiteness::Negative)?;
    Ok(x.scaled(-1.0))
}

/// Inverse of a definite symmetric matrix, column by column through the
/// ridge ladder.
pub fn inverse_symmetric(a: &Matrix, expected: Definiteness) -> Result<Matrix, LinalgError> {
    let n = a.dim;
    let mut inv = Matrix::zeros(n);
    let mut e = vec![0.0; n];
    for j in 0..n {
        e.iter_mut().for_each(|v| *v = 0.0);
        e[j] = 1.0;
        let col = solve_with_ridge_ladder(a, &e, expected)?;
        for i in 0..n {
            inv[(i, j)] = col[i];
        }
    }
    // exact symmetry for downstream checks
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (inv[(i, j)] + inv[(j, i)]);
            inv[(i, j)] = avg;
            inv[(j, i)] = avg;
        }
    }
    Ok(inv)
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, ascending.
pub fn symmetric_eigenvalues(a: &Matrix) -> Result<Vec<f64>, LinalgError> {
    if !a.is_finite() {
        return Err(LinalgError::NonFinite);
    }
    let n = a.dim;
    let mut m = a.clone();
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
    let scale = m.frobenius();
    if scale == 0.0 {
        return Ok(vec![0.0; n]);
    }
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += m[(i, j)] * m[(i, j)];
            }
        }
        if libm::sqrt(off) <= 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (m[(q, q)] - m[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (libm::fabs(theta) + libm::sqrt(theta * theta + 1.0));
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / libm::sqrt(t * t + 1.0);
                let s = t * c;
                for k in 0..n {
                    let mkp = m[(k, p)];
                    let mkq = m[(k, q)];
                    m[(k, p)] = c * mkp - s * mkq;
                    m[(k, q)] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[(p, k)];
                    let mqk = m[(q, k)];
                    m[(p, k)] = c * mpk - s * mqk;
                    m[(q, k)] = s * mpk + c * mqk;
                }
            }
        }
    }
    let mut eig: Vec<f64> = (0..n).map(|i| m[(i, i)]).collect();
    eig.sort_by(|a, b| a.total_cmp(b));
    Ok(eig)
}

/// Largest singular value, as the square root of the top eigenvalue of `AᵀA`.
pub fn spectral_norm(a: &Matrix) -> Result<f64, LinalgError> {
    let gram = a.transpose().mul(a);
    let eig = symmetric_eigenvalues(&gram)?;
    Ok(libm::sqrt(eig.last().copied().unwrap_or(0.0).max(0.0)))
}
