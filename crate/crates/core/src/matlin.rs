//! Dense row-major matrices and the spectral kernels built on them.
//!
//! Everything here is a pure function of its inputs. The SVD routine is an
//! O(n^3) cyclic-Jacobi oracle meant for checking the fast paths at desk
//! scale, not for use inside the optimizer.

use std::ops::{Index, IndexMut};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest `min(rows, cols)` accepted by [`svd_oracle`].
pub const SVD_ORACLE_CAP: usize = 256;

/// Dense real matrix, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MatrixRepr", into = "MatrixRepr")]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct MatrixRepr {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl TryFrom<MatrixRepr> for Matrix {
    type Error = Error;

    fn try_from(r: MatrixRepr) -> Result<Self> {
        Matrix::new(r.rows, r.cols, r.data)
    }
}

impl From<Matrix> for MatrixRepr {
    fn from(m: Matrix) -> Self {
        MatrixRepr {
            rows: m.rows,
            cols: m.cols,
            data: m.data,
        }
    }
}

impl Matrix {
    /// Builds a matrix, checking the shape and that every entry is finite.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::EmptyShape { rows, cols });
        }
        if data.len() != rows * cols {
            return Err(Error::BadLength {
                rows,
                cols,
                len: data.len(),
            });
        }
        if let Some(i) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                row: i / cols,
                col: i % cols,
            });
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::ShapeMismatch("ragged rows".into()));
        }
        Matrix::new(rows.len(), cols, rows.concat())
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dimensions must be positive");
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_diag_rect(n, n, &vec![1.0; n])
    }

    /// Rectangular matrix with `diag` on its main diagonal.
    pub fn from_diag_rect(rows: usize, cols: usize, diag: &[f64]) -> Self {
        let mut m = Matrix::zeros(rows, cols);
        for (i, &d) in diag.iter().enumerate().take(rows.min(cols)) {
            m[(i, i)] = d;
        }
        m
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        Self::from_diag_rect(diag.len(), diag.len(), diag)
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Matrix::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m.data[i * cols + j] = f(i, j);
            }
        }
        m
    }

    /// i.i.d. `N(0, std^2)` entries.
    pub fn random_normal<R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("standard deviation must be finite and >= 0");
        let data = (0..rows * cols).map(|_| normal.sample(rng)).collect();
        Matrix { rows, cols, data }
    }

    /// Outer product `u v^T`.
    pub fn outer(u: &[f64], v: &[f64]) -> Self {
        let mut m = Matrix::zeros(u.len(), v.len());
        for (i, &ui) in u.iter().enumerate() {
            let row = &mut m.data[i * v.len()..(i + 1) * v.len()];
            for (x, &vj) in row.iter_mut().zip(v) {
                *x = ui * vj;
            }
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.data[i * self.cols + j]).collect()
    }

    pub fn set_column(&mut self, j: usize, col: &[f64]) {
        for (i, &x) in col.iter().enumerate() {
            self.data[i * self.cols + j] = x;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        t
    }

    /// `self * rhs`.
    pub fn matmul(&self, rhs: &Matrix) -> Matrix {
        gemm(self, false, rhs, false)
    }

    /// `self^T * rhs`.
    pub fn t_matmul(&self, rhs: &Matrix) -> Matrix {
        gemm(self, true, rhs, false)
    }

    /// `self * rhs^T`.
    pub fn matmul_t(&self, rhs: &Matrix) -> Matrix {
        gemm(self, false, rhs, true)
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.cols, "matvec length mismatch");
        (0..self.rows).map(|i| dot(self.row(i), x)).collect()
    }

    /// `self^T x`.
    pub fn t_matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.rows, "t_matvec length mismatch");
        let mut out = vec![0.0; self.cols];
        for (i, &xi) in x.iter().enumerate() {
            if xi != 0.0 {
                for (o, &a) in out.iter_mut().zip(self.row(i)) {
                    *o += xi * a;
                }
            }
        }
        out
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| x * s).collect(),
        }
    }

    pub fn scale_in_place(&mut self, s: f64) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    pub fn add(&self, rhs: &Matrix) -> Matrix {
        self.zip_with(rhs, |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Matrix) -> Matrix {
        self.zip_with(rhs, |a, b| a - b)
    }

    /// `self += alpha * x`.
    pub fn axpy(&mut self, alpha: f64, x: &Matrix) {
        self.assert_same_shape(x);
        for (a, b) in self.data.iter_mut().zip(&x.data) {
            *a += alpha * b;
        }
    }

    /// Element-wise map.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_with(&self, rhs: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
        self.assert_same_shape(rhs);
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&rhs.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    /// Frobenius inner product `<A, B> = tr(A^T B)`.
    pub fn inner(&self, rhs: &Matrix) -> f64 {
        self.assert_same_shape(rhs);
        dot(&self.data, &rhs.data)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    /// Copies rows `start..start + count`.
    pub fn row_block(&self, start: usize, count: usize) -> Matrix {
        assert!(start + count <= self.rows && count > 0, "row block out of range");
        Matrix {
            rows: count,
            cols: self.cols,
            data: self.data[start * self.cols..(start + count) * self.cols].to_vec(),
        }
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn vstack(blocks: &[&Matrix]) -> Result<Matrix> {
        let first = blocks
            .first()
            .ok_or_else(|| Error::ShapeMismatch("vstack of zero blocks".into()))?;
        let cols = first.cols;
        if let Some(b) = blocks.iter().find(|b| b.cols != cols) {
            return Err(Error::ShapeMismatch(format!(
                "vstack column mismatch: {} vs {}",
                b.cols, cols
            )));
        }
        let rows = blocks.iter().map(|b| b.rows).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for b in blocks {
            data.extend_from_slice(&b.data);
        }
        Ok(Matrix { rows, cols, data })
    }

    fn assert_same_shape(&self, rhs: &Matrix) {
        assert_eq!(
            self.shape(),
            rhs.shape(),
            "shape mismatch: {:?} vs {:?}",
            self.shape(),
            rhs.shape()
        );
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

/// `op(a) * op(b)` where `op` optionally transposes. Transposition is done
/// through strides, no copies.
fn gemm(a: &Matrix, ta: bool, b: &Matrix, tb: bool) -> Matrix {
    let (m, k, rsa, csa) = if ta {
        (a.cols, a.rows, 1isize, a.cols as isize)
    } else {
        (a.rows, a.cols, a.cols as isize, 1isize)
    };
    let (kb, n, rsb, csb) = if tb {
        (b.cols, b.rows, 1isize, b.cols as isize)
    } else {
        (b.rows, b.cols, b.cols as isize, 1isize)
    };
    assert_eq!(k, kb, "inner dimensions differ: {k} vs {kb}");
    let mut c = Matrix::zeros(m, n);
    // SAFETY: strides describe exactly the row-major buffers owned above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            0.0,
            c.data.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    c
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm2(x: &[f64]) -> f64 {
    dot(x, x).sqrt()
}

pub fn frobenius_norm(a: &Matrix) -> f64 {
    norm2(&a.data)
}

// ---------------------------------------------------------------------------
// Power iteration
// ---------------------------------------------------------------------------

/// Top singular value and its unit singular vectors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectralTriplet {
    pub sigma: f64,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

impl SpectralTriplet {
    /// `||A v - sigma u|| / sigma`.
    pub fn relative_residual(&self, a: &Matrix) -> f64 {
        let av = a.matvec(&self.v);
        let r: f64 = av
            .iter()
            .zip(&self.u)
            .map(|(x, u)| (x - self.sigma * u).powi(2))
            .sum::<f64>()
            .sqrt();
        r / self.sigma
    }
}

#[derive(Clone, Debug)]
pub struct PowerIteration {
    pub triplet: SpectralTriplet,
    pub iterations: usize,
    pub residual: f64,
    /// `false` when `max_iters` ran out before the residual met `tol`.
    /// The triplet is still the best iterate.
    pub converged: bool,
}

/// Iteration budgets for power iteration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PowerIterConfig {
    pub cold_max_iters: usize,
    pub warm_max_iters: usize,
    /// Extra iterations, continued from the warm iterate, when the warm
    /// budget ends short of `tol`.
    pub fallback_max_iters: usize,
    pub tol: f64,
}

impl Default for PowerIterConfig {
    fn default() -> Self {
        PowerIterConfig {
            cold_max_iters: 50,
            warm_max_iters: 8,
            fallback_max_iters: 100,
            tol: 1e-6,
        }
    }
}

/// Alternating power iteration `v <- A^T A v` for the top singular triplet.
///
/// A cold start seeds `v` with the largest row of `A`. A warm start seeds it
/// with a cached right singular vector, which pays off when `A` has moved only
/// a little since the cache was filled.
pub fn power_iteration(
    a: &Matrix,
    warm_start: Option<(&[f64], &[f64])>,
    max_iters: usize,
    tol: f64,
) -> Result<PowerIteration> {
    if frobenius_norm(a) == 0.0 {
        return Err(Error::ZeroMatrix);
    }
    let mut v = match warm_start {
        Some((u, v)) => {
            if u.len() != a.rows() || v.len() != a.cols() {
                return Err(Error::ShapeMismatch(format!(
                    "warm start lengths ({}, {}) for a {}x{} matrix",
                    u.len(),
                    v.len(),
                    a.rows(),
                    a.cols()
                )));
            }
            let n = norm2(v);
            if n > 0.0 && norm2(&a.matvec(v)) > 0.0 {
                v.iter().map(|x| x / n).collect()
            } else {
                cold_start(a)
            }
        }
        None => cold_start(a),
    };

    let mut best: Option<(SpectralTriplet, f64)> = None;
    let mut iterations = 0;
    for _ in 0..max_iters.max(1) {
        iterations += 1;
        let mut u = a.matvec(&v);
        let su = norm2(&u);
        if su == 0.0 {
            // v landed in the null space; restart from the data.
            v = cold_start(a);
            continue;
        }
        u.iter_mut().for_each(|x| *x /= su);
        let mut v_next = a.t_matvec(&u);
        let sigma = norm2(&v_next);
        v_next.iter_mut().for_each(|x| *x /= sigma);

        let av = a.matvec(&v_next);
        let resid = av
            .iter()
            .zip(&u)
            .map(|(x, ui)| (x - sigma * ui).powi(2))
            .sum::<f64>()
            .sqrt()
            / sigma;
        let candidate = SpectralTriplet { sigma, u, v: v_next.clone() };
        // Every estimate is a lower bound on sigma_1, so keep the largest.
        let better = resid <= tol || best.as_ref().is_none_or(|(b, _)| sigma >= b.sigma);
        if better {
            best = Some((candidate, resid));
        }
        v = v_next;
        if resid <= tol {
            break;
        }
    }
    let (mut triplet, residual) = best.ok_or(Error::ZeroMatrix)?;
    canonicalize_signs(&mut triplet.u, &mut triplet.v);
    Ok(PowerIteration {
        triplet,
        iterations,
        residual,
        converged: residual <= tol,
    })
}

fn cold_start(a: &Matrix) -> Vec<f64> {
    let (best, _) = (0..a.rows())
        .map(|i| (i, norm2(a.row(i))))
        .fold((0, -1.0), |acc, x| if x.1 > acc.1 { x } else { acc });
    let row = a.row(best);
    let n = norm2(row);
    row.iter().map(|x| x / n).collect()
}

/// Makes the first nonzero entry of `u` nonnegative, flipping `v` alongside.
pub fn canonicalize_signs(u: &mut [f64], v: &mut [f64]) {
    if let Some(&first) = u.iter().find(|x| x.abs() > f64::EPSILON) {
        if first < 0.0 {
            u.iter_mut().for_each(|x| *x = -*x);
            v.iter_mut().for_each(|x| *x = -*x);
        }
    }
}

/// Spectral norm with a generous iteration budget; meant for measurement.
pub fn spectral_norm(a: &Matrix) -> Result<f64> {
    Ok(power_iteration(a, None, 2000, 1e-10)?.triplet.sigma)
}

// ---------------------------------------------------------------------------
// Matrix sign
// ---------------------------------------------------------------------------

/// Coefficient schedule for the odd-polynomial msign iteration.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MsignSchedule {
    /// Minimax quintic schedule tuned for singular values in `[1e-3, 1]`.
    #[default]
    PolarExpress,
    /// Classical cubic `1.5 X - 0.5 X X^T X`.
    NewtonSchulzCubic,
}

const POLAR_EXPRESS: [(f64, f64, f64); 8] = [
    (8.28721201814563, -23.595886519098837, 17.300387312530933),
    (4.107059111542203, -2.9478499167379106, 0.5448431082926601),
    (3.9486908534822946, -2.908902115962949, 0.5518191394370137),
    (3.3184196573706015, -2.488488024314874, 0.51004894012372),
    (2.300652019954817, -1.6689039845747493, 0.4188073119525673),
    (1.891301407787398, -1.2679958271945868, 0.37680408948524835),
    (1.8750014808534479, -1.2500016453999487, 0.3750001645474248),
    (1.875, -1.25, 0.375),
];

/// Margin on the Frobenius pre-scaling; the schedule's early steps are
/// shrunk to match so that singular values at `1/SAFETY` still map to 1.
const SAFETY: f64 = 1.01;

impl MsignSchedule {
    fn coefficients(self, step: usize) -> (f64, f64, f64) {
        match self {
            MsignSchedule::PolarExpress => {
                let last = POLAR_EXPRESS.len() - 1;
                let (a, b, c) = POLAR_EXPRESS[step.min(last)];
                if step < last {
                    (a / SAFETY, b / SAFETY.powi(3), c / SAFETY.powi(5))
                } else {
                    (a, b, c)
                }
            }
            MsignSchedule::NewtonSchulzCubic => (1.5, -0.5, 0.0),
        }
    }
}

/// Polar factor `U_r V_r^T` with the default schedule.
pub fn msign(a: &Matrix, iters: usize) -> Result<Matrix> {
    msign_with(a, iters, MsignSchedule::default())
}

/// Polar factor `U_r V_r^T` by `iters` steps of `X <- a X + (b G + c G^2) X`
/// with `G = X X^T` taken on the short side.
pub fn msign_with(a: &Matrix, iters: usize, schedule: MsignSchedule) -> Result<Matrix> {
    let fro = frobenius_norm(a);
    if fro == 0.0 {
        return Err(Error::ZeroMatrix);
    }
    let transposed = a.rows() > a.cols();
    let mut x = if transposed { a.transpose() } else { a.clone() };
    x.scale_in_place(1.0 / (fro * SAFETY));
    for step in 0..iters {
        let (ca, cb, cc) = schedule.coefficients(step);
        let gram = x.matmul_t(&x);
        let mut poly = gram.scale(cb);
        if cc != 0.0 {
            poly.axpy(cc, &gram.matmul(&gram));
        }
        let mut next = poly.matmul(&x);
        next.axpy(ca, &x);
        x = next;
    }
    Ok(if transposed { x.transpose() } else { x })
}

// ---------------------------------------------------------------------------
// SVD oracle
// ---------------------------------------------------------------------------

/// Thin SVD `A = U diag(S) V^T`, `S` nonincreasing.
#[derive(Clone, Debug)]
pub struct SvdFactors {
    pub u: Matrix,
    pub s: Vec<f64>,
    pub v: Matrix,
}

impl SvdFactors {
    pub fn reconstruct(&self) -> Matrix {
        let mut us = self.u.clone();
        for i in 0..us.rows() {
            for (x, s) in us.row_mut(i).iter_mut().zip(&self.s) {
                *x *= s;
            }
        }
        us.matmul_t(&self.v)
    }

    /// `U_r V_r^T` over singular values above `rel_tol * s[0]`.
    pub fn polar(&self, rel_tol: f64) -> Matrix {
        let cut = self.s[0] * rel_tol;
        let mut u = self.u.clone();
        for i in 0..u.rows() {
            for (x, s) in u.row_mut(i).iter_mut().zip(&self.s) {
                if *s <= cut {
                    *x = 0.0;
                }
            }
        }
        u.matmul_t(&self.v)
    }
}

/// Full thin SVD through a cyclic-Jacobi eigendecomposition of the Gram
/// matrix on the short side.
pub fn svd_oracle(a: &Matrix) -> Result<SvdFactors> {
    let k = a.rows().min(a.cols());
    if k > SVD_ORACLE_CAP {
        return Err(Error::TooLarge {
            dim: k,
            cap: SVD_ORACLE_CAP,
        });
    }
    // Eigenvectors live on the side of length k.
    let tall = a.rows() >= a.cols();
    let gram = if tall { a.t_matmul(a) } else { a.matmul_t(a) };
    let (_, vecs) = jacobi_eigen(&gram);

    let other_len = if tall { a.rows() } else { a.cols() };
    let mut pairs: Vec<(f64, Vec<f64>, Vec<f64>)> = (0..k)
        .map(|j| {
            let e = vecs.column(j);
            let w = if tall { a.matvec(&e) } else { a.t_matvec(&e) };
            (norm2(&w), e, w)
        })
        .collect();
    pairs.sort_by(|x, y| y.0.total_cmp(&x.0));

    let top = pairs[0].0;
    let mut short_side = Matrix::zeros(k, k);
    let mut long_side = Matrix::zeros(other_len, k);
    let mut s = Vec::with_capacity(k);
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(k);
    for (j, (sigma, e, w)) in pairs.into_iter().enumerate() {
        let mut col = if sigma > top * 1e-13 { w } else { vec![0.0; other_len] };
        let mut n = orthonormalize_against(&mut col, &basis);
        if n <= 1e-8 {
            // Null direction: complete the basis from the standard vectors.
            for idx in 0..other_len {
                col = vec![0.0; other_len];
                col[idx] = 1.0;
                n = orthonormalize_against(&mut col, &basis);
                if n > 1e-8 {
                    break;
                }
            }
        }
        s.push(if sigma > top * 1e-13 { sigma } else { 0.0 });
        short_side.set_column(j, &e);
        long_side.set_column(j, &col);
        basis.push(col);
    }

    let (u, v) = if tall {
        (long_side, short_side)
    } else {
        (short_side, long_side)
    };
    Ok(SvdFactors { u, s, v })
}

/// Two passes of modified Gram–Schmidt; normalizes `x` and returns its norm
/// before normalization.
fn orthonormalize_against(x: &mut [f64], basis: &[Vec<f64>]) -> f64 {
    let start = norm2(x);
    if start == 0.0 {
        return 0.0;
    }
    for _ in 0..2 {
        for b in basis {
            let p = dot(x, b);
            for (xi, bi) in x.iter_mut().zip(b) {
                *xi -= p * bi;
            }
        }
    }
    let n = norm2(x);
    if n > 0.0 {
        x.iter_mut().for_each(|xi| *xi /= n);
    }
    n / start
}

/// Cyclic Jacobi for a symmetric matrix. Returns unsorted eigenvalues and
/// the eigenvectors as columns.
fn jacobi_eigen(sym: &Matrix) -> (Vec<f64>, Matrix) {
    let n = sym.rows();
    let mut a = sym.clone();
    let mut v = Matrix::identity(n);
    let total = frobenius_norm(&a);
    if total == 0.0 {
        return (vec![0.0; n], v);
    }
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[(i, j)].powi(2))
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * total {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[(p, q)];
                if apq.abs() <= f64::MIN_POSITIVE {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    ((0..n).map(|i| a[(i, i)]).collect(), v)
}

/// Sum of singular values, from the oracle.
pub fn nuclear_norm(a: &Matrix) -> Result<f64> {
    Ok(svd_oracle(a)?.s.iter().sum())
}
