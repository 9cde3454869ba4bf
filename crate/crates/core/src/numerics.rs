//! Dense linear algebra shared by the GP and the network code.
//!
//! Everything here is row-major and dense. Problem sizes stay below a few
//! thousand rows, so a straightforward Cholesky with contiguous row dot
//! products is fast enough and keeps failures explicit.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Smallest jitter tried once a factorization without jitter fails.
pub const BASE_JITTER: f64 = 1e-8;
/// Largest jitter tried before giving up.
pub const MAX_JITTER: f64 = 1e-4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("matrix is not positive definite (last jitter tried: {jitter:e})")]
    NotPositiveDefinite { jitter: f64 },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("non-finite function value at coordinate {coord}")]
    NonFiniteEvaluation { coord: usize },
    #[error("matrix data length {len} does not match {rows}x{cols}")]
    BadShape { rows: usize, cols: usize, len: usize },
}

pub type Result<T> = std::result::Result<T, NumericsError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(NumericsError::BadShape {
                rows,
                cols,
                len: data.len(),
            });
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Builds a matrix from equally long rows. Panics on ragged input.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.as_ref().len(), cols, "ragged rows");
            data.extend_from_slice(r.as_ref());
        }
        Matrix {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(NumericsError::DimensionMismatch {
                expected: self.cols,
                got: other.rows,
            });
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        gemm(
            self.rows,
            self.cols,
            other.cols,
            &self.data,
            false,
            &other.data,
            false,
            &mut out.data,
            0.0,
        );
        Ok(out)
    }

    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if self.cols != v.len() {
            return Err(NumericsError::DimensionMismatch {
                expected: self.cols,
                got: v.len(),
            });
        }
        Ok((0..self.rows).map(|r| dot(self.row(r), v)).collect())
    }

    pub fn add_diagonal(&mut self, v: f64) {
        let n = self.rows.min(self.cols);
        for i in 0..n {
            self.data[i * self.cols + i] += v;
        }
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        if self.rows != self.cols {
            return false;
        }
        (0..self.rows)
            .all(|i| (0..i).all(|j| (self.get(i, j) - self.get(j, i)).abs() <= tol))
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    // Four accumulators let the compiler keep several FMAs in flight.
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for k in 0..chunks {
        let i = 4 * k;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in 4 * chunks..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// `c = op(a) * op(b) + beta * c` for row-major operands.
///
/// `op(a)` is `m x k`, `op(b)` is `k x n`. Transposition is expressed through
/// strides so no copies are made.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above guarantee every strided access stays inside
    // the slices, and `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Lower-triangular factor `L` with `L Lᵀ = A + jitter I`.
#[derive(Debug, Clone, PartialEq)]
pub struct CholeskyFactor {
    lower: Matrix,
    jitter: f64,
}

impl CholeskyFactor {
    pub fn lower(&self) -> &Matrix {
        &self.lower
    }

    pub fn dim(&self) -> usize {
        self.lower.rows
    }

    /// Jitter that was actually added to the diagonal.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    /// `log |A + jitter I|`.
    pub fn log_det(&self) -> f64 {
        (0..self.dim()).map(|i| self.lower.get(i, i).ln()).sum::<f64>() * 2.0
    }

    /// Solves `L x = b` in place.
    pub fn solve_lower_in_place(&self, b: &mut [f64]) -> Result<()> {
        let n = self.dim();
        check_len(n, b.len())?;
        for i in 0..n {
            let row = self.lower.row(i);
            let s = dot(&row[..i], &b[..i]);
            b[i] = (b[i] - s) / row[i];
        }
        Ok(())
    }

    /// Solves `Lᵀ x = b` in place.
    pub fn solve_upper_in_place(&self, b: &mut [f64]) -> Result<()> {
        let n = self.dim();
        check_len(n, b.len())?;
        for i in (0..n).rev() {
            let xi = b[i] / self.lower.get(i, i);
            b[i] = xi;
            // Column i of Lᵀ above the diagonal is row i of L left of it.
            let row = self.lower.row(i);
            for (bj, lij) in b[..i].iter_mut().zip(&row[..i]) {
                *bj -= lij * xi;
            }
        }
        Ok(())
    }

    /// Full inverse `(L Lᵀ)⁻¹`, used for likelihood gradients.
    pub fn inverse(&self) -> Matrix {
        let n = self.dim();
        // Linv is lower triangular; compute row by row.
        let mut linv = Matrix::zeros(n, n);
        for j in 0..n {
            // column j of L⁻¹ via forward substitution on e_j, stored transposed
            // as row j of (L⁻¹)ᵀ for contiguous access below.
            let mut col = vec![0.0; n];
            col[j] = 1.0 / self.lower.get(j, j);
            for i in j + 1..n {
                let row = self.lower.row(i);
                let s = dot(&row[j..i], &col[j..i]);
                col[i] = -s / row[i];
            }
            linv.row_mut(j).copy_from_slice(&col);
        }
        // linv currently holds (L⁻¹)ᵀ which is upper triangular: U = L⁻ᵀ.
        // A⁻¹ = L⁻ᵀ L⁻¹ = U Uᵀ.
        let mut inv = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                // rows i and j of U are non-zero from column max(i,j)=i on.
                let s = dot(&linv.row(i)[i..], &linv.row(j)[i..]);
                inv.set(i, j, s);
                inv.set(j, i, s);
            }
        }
        inv
    }
}

fn check_len(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(NumericsError::DimensionMismatch { expected, got });
    }
    Ok(())
}

fn try_factor(a: &Matrix, jitter: f64) -> Option<Matrix> {
    let n = a.rows;
    let mut l = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let s = dot(&l.row(i)[..j], &l.row(j)[..j]);
            if i == j {
                let d = a.get(i, i) + jitter - s;
                if !(d > 0.0) || !d.is_finite() {
                    return None;
                }
                l.set(i, i, d.sqrt());
            } else {
                let v = (a.get(i, j) - s) / l.get(j, j);
                l.set(i, j, v);
            }
        }
    }
    Some(l)
}

/// Cholesky factorization with jitter escalation.
///
/// Tries `jitter` first; on failure escalates from [`BASE_JITTER`] by factors
/// of ten up to [`MAX_JITTER`].
pub fn cholesky(a: &Matrix, jitter: f64) -> Result<CholeskyFactor> {
    if a.rows != a.cols {
        return Err(NumericsError::DimensionMismatch {
            expected: a.rows,
            got: a.cols,
        });
    }
    let mut j = jitter.max(0.0);
    loop {
        if let Some(lower) = try_factor(a, j) {
            return Ok(CholeskyFactor { lower, jitter: j });
        }
        let next = if j < BASE_JITTER { BASE_JITTER } else { j * 10.0 };
        if next > MAX_JITTER * (1.0 + 1e-9) {
            return Err(NumericsError::NotPositiveDefinite { jitter: j });
        }
        j = next;
    }
}

/// Solves `A x = b` given the factor of `A`.
pub fn solve_spd(f: &CholeskyFactor, b: &[f64]) -> Result<Vec<f64>> {
    let mut x = b.to_vec();
    f.solve_lower_in_place(&mut x)?;
    f.solve_upper_in_place(&mut x)?;
    Ok(x)
}

/// Central-difference gradient of `f` at `x` with step `h`.
pub fn fd_gradient<F>(f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for d in 0..x.len() {
        probe[d] = x[d] + h;
        let fp = f(&probe);
        probe[d] = x[d] - h;
        let fm = f(&probe);
        probe[d] = x[d];
        if !fp.is_finite() || !fm.is_finite() {
            return Err(NumericsError::NonFiniteEvaluation { coord: d });
        }
        grad.push((fp - fm) / (2.0 * h));
    }
    Ok(grad)
}

/// Squared L2 distance.
#[inline]
pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}
