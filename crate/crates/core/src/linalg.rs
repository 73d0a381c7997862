//! Dense matrices, spectral and Frobenius norms, and reproducible Gaussian
//! sampling.
//!
//! The spectral norm is computed by power iteration on `MᵀM`, which only
//! needs matrix-vector products and therefore works for any
//! [`LinearOperator`], including the sparse operators built for banded
//! layers. A dense SVD is the fallback when power iteration stalls.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Default relative tolerance for [`spectral_norm`].
pub const DEFAULT_TOL: f64 = 1e-10;
/// Power-iteration cap before falling back to a dense SVD.
pub const MAX_POWER_ITERATIONS: usize = 10_000;
/// Largest dimension for which the dense SVD fallback is attempted.
pub const SVD_FALLBACK_MAX_DIM: usize = 2_000;

/// Row-major dense real matrix with finite entries.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::invalid(format!(
                "matrix dimensions must be positive, got {rows}x{cols}"
            )));
        }
        if data.len() != rows * cols {
            return Err(Error::invalid(format!(
                "expected {} entries for a {rows}x{cols} matrix, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "non-finite entry at ({}, {})",
                pos / cols,
                pos % cols
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::invalid("ragged rows"));
        }
        Self::new(r, c, rows.concat())
    }

    /// All-zero matrix. Panics on a zero dimension.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dimensions must be positive");
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_diag(diag: &[f64]) -> Result<Self> {
        let n = diag.len();
        let mut data = vec![0.0; n * n];
        for (i, &d) in diag.iter().enumerate() {
            data[i * n + i] = d;
        }
        Self::new(n, n, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    /// Sets one entry. Non-finite values are caught later by the norm routines.
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * c).collect(),
        }
    }

    pub fn add(&self, other: &Matrix) -> Result<Self> {
        if self.shape() != other.shape() {
            return Err(Error::invalid(format!(
                "shape mismatch: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        })
    }

    pub fn transpose(&self) -> Self {
        let mut data = vec![0.0; self.data.len()];
        for r in 0..self.rows {
            for c in 0..self.cols {
                data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        Self {
            rows: self.cols,
            cols: self.rows,
            data,
        }
    }

    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(Error::invalid(format!(
                "vector of length {} does not match {} columns",
                x.len(),
                self.cols
            )));
        }
        let mut y = vec![0.0; self.rows];
        self.apply(x, &mut y);
        Ok(y)
    }

    pub fn count_nonzero(&self) -> usize {
        self.data.iter().filter(|v| **v != 0.0).count()
    }

    pub fn to_nalgebra(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.rows, self.cols, &self.data)
    }
}

/// Anything that can multiply by itself and its transpose.
pub trait LinearOperator {
    fn nrows(&self) -> usize;
    fn ncols(&self) -> usize;
    /// `y = A x`; `y` has length `nrows`.
    fn apply(&self, x: &[f64], y: &mut [f64]);
    /// `y = Aᵀ x`; `y` has length `ncols`.
    fn apply_transpose(&self, x: &[f64], y: &mut [f64]);
    /// Dense copy, used by the SVD fallback.
    fn to_dense(&self) -> Matrix;
    fn all_finite(&self) -> bool;
}

impl LinearOperator for Matrix {
    fn nrows(&self) -> usize {
        self.rows
    }

    fn ncols(&self) -> usize {
        self.cols
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        for (yi, row) in y.iter_mut().zip(self.data.chunks_exact(self.cols)) {
            *yi = row.iter().zip(x).map(|(a, b)| a * b).sum();
        }
    }

    fn apply_transpose(&self, x: &[f64], y: &mut [f64]) {
        y.iter_mut().for_each(|v| *v = 0.0);
        for (xi, row) in x.iter().zip(self.data.chunks_exact(self.cols)) {
            if *xi == 0.0 {
                continue;
            }
            for (yj, a) in y.iter_mut().zip(row) {
                *yj += a * xi;
            }
        }
    }

    fn to_dense(&self) -> Matrix {
        self.clone()
    }

    fn all_finite(&self) -> bool {
        self.is_finite()
    }
}

/// Compressed sparse row matrix for banded operators.
#[derive(Clone, Debug)]
pub struct SparseMatrix {
    rows: usize,
    cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl SparseMatrix {
    /// Builds from `(row, col, value)` triplets; duplicates are summed.
    pub fn from_triplets(rows: usize, cols: usize, triplets: &[(usize, usize, f64)]) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::invalid("sparse matrix dimensions must be positive"));
        }
        let mut sorted: Vec<(usize, usize, f64)> = triplets.to_vec();
        sorted.sort_by_key(|&(r, c, _)| (r, c));
        let mut row_ptr = vec![0usize; rows + 1];
        let mut col_idx = Vec::with_capacity(sorted.len());
        let mut values: Vec<f64> = Vec::with_capacity(sorted.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in sorted {
            if r >= rows || c >= cols {
                return Err(Error::invalid(format!("triplet ({r}, {c}) out of range")));
            }
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
                continue;
            }
            col_idx.push(c);
            values.push(v);
            row_ptr[r + 1] += 1;
            last = Some((r, c));
        }
        for r in 0..rows {
            row_ptr[r + 1] += row_ptr[r];
        }
        Ok(Self {
            rows,
            cols,
            row_ptr,
            col_idx,
            values,
        })
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }
}

impl LinearOperator for SparseMatrix {
    fn nrows(&self) -> usize {
        self.rows
    }

    fn ncols(&self) -> usize {
        self.cols
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        for (r, yr) in y.iter_mut().enumerate() {
            let span = self.row_ptr[r]..self.row_ptr[r + 1];
            *yr = self.col_idx[span.clone()]
                .iter()
                .zip(&self.values[span])
                .map(|(&c, v)| v * x[c])
                .sum();
        }
    }

    fn apply_transpose(&self, x: &[f64], y: &mut [f64]) {
        y.iter_mut().for_each(|v| *v = 0.0);
        for (r, xr) in x.iter().enumerate() {
            let span = self.row_ptr[r]..self.row_ptr[r + 1];
            for (&c, v) in self.col_idx[span.clone()].iter().zip(&self.values[span]) {
                y[c] += v * xr;
            }
        }
    }

    fn to_dense(&self) -> Matrix {
        let mut m = Matrix::zeros(self.rows, self.cols);
        for r in 0..self.rows {
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                m.set(r, self.col_idx[k], self.values[k]);
            }
        }
        m
    }

    fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// A reproducible random stream identified by `(master_seed, stream_index)`.
///
/// Backed by ChaCha8 with the stream index selecting one of its 2^64
/// independent streams, so trial `k` always sees the same numbers no matter
/// which thread runs it or in what order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct RngStream {
    pub master_seed: u64,
    pub stream_index: u64,
}

impl RngStream {
    pub fn new(master_seed: u64, stream_index: u64) -> Self {
        Self {
            master_seed,
            stream_index,
        }
    }

    /// Fresh generator positioned at the start of this stream.
    pub fn generator(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.master_seed);
        rng.set_stream(self.stream_index);
        rng
    }

    /// Independent child stream, e.g. one per trial or per layer.
    pub fn substream(&self, index: u64) -> RngStream {
        let seed = splitmix64(self.master_seed ^ splitmix64(self.stream_index.wrapping_add(0x9E37_79B9_7F4A_7C15)));
        RngStream::new(seed, index)
    }
}

pub(crate) fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Draws `n` i.i.d. `N(0, sigma²)` values from `rng`.
pub fn gaussian_vec(n: usize, sigma: f64, rng: &RngStream) -> Vec<f64> {
    let mut g = rng.generator();
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut g);
            z * sigma
        })
        .collect()
}

pub fn sample_gaussian(rows: usize, cols: usize, sigma: f64, rng: &RngStream) -> Result<Matrix> {
    if rows == 0 || cols == 0 {
        return Err(Error::invalid(format!(
            "sample dimensions must be positive, got {rows}x{cols}"
        )));
    }
    check_sigma(sigma)?;
    Matrix::new(rows, cols, gaussian_vec(rows * cols, sigma, rng))
}

pub(crate) fn check_sigma(sigma: f64) -> Result<()> {
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(Error::invalid(format!(
            "sigma must be positive and finite, got {sigma}"
        )));
    }
    Ok(())
}

pub fn frobenius_norm(m: &Matrix) -> Result<f64> {
    if !m.is_finite() {
        return Err(Error::invalid("matrix has non-finite entries"));
    }
    Ok(m.as_slice().iter().map(|v| v * v).sum::<f64>().sqrt())
}

/// Largest singular value of `m` to relative tolerance `tol`.
pub fn spectral_norm(m: &Matrix, tol: f64) -> Result<f64> {
    spectral_norm_of(m, tol)
}

/// Largest singular value of any [`LinearOperator`].
pub fn spectral_norm_of<L: LinearOperator + ?Sized>(op: &L, tol: f64) -> Result<f64> {
    if !(tol.is_finite() && tol > 0.0) {
        return Err(Error::invalid(format!("tolerance must be positive, got {tol}")));
    }
    if op.nrows() == 0 || op.ncols() == 0 {
        return Err(Error::invalid("empty operator"));
    }
    if !op.all_finite() {
        return Err(Error::invalid("operator has non-finite entries"));
    }
    match power_iteration(op, tol, MAX_POWER_ITERATIONS) {
        Some(v) => Ok(v),
        None => {
            let (rows, cols) = (op.nrows(), op.ncols());
            if rows.max(cols) > SVD_FALLBACK_MAX_DIM {
                return Err(Error::NotConverged {
                    iterations: MAX_POWER_ITERATIONS,
                    rows,
                    cols,
                });
            }
            Ok(svd_spectral_norm(&op.to_dense()))
        }
    }
}

/// Largest singular value from a full dense SVD.
pub fn svd_spectral_norm(m: &Matrix) -> f64 {
    m.to_nalgebra().singular_values().iter().copied().fold(0.0, f64::max)
}

/// Deterministic start vector with strictly positive, non-constant entries.
/// A constant vector is an exact eigenvector of every circulant operator and
/// would pin the iteration to the zero frequency.
fn start_vector(n: usize) -> Vec<f64> {
    let mut state = 0x5EED_u64;
    let mut v: Vec<f64> = (0..n)
        .map(|_| {
            state = splitmix64(state);
            0.5 + (state >> 11) as f64 / (1u64 << 53) as f64
        })
        .collect();
    normalize(&mut v);
    v
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

/// Power iteration on `AᵀA`. Returns `None` if not converged within `cap`.
///
/// Stops once the Rayleigh quotient has settled to `tol` relative and the
/// geometric extrapolation of the remaining error agrees.
fn power_iteration<L: LinearOperator + ?Sized>(op: &L, tol: f64, cap: usize) -> Option<f64> {
    let mut v = start_vector(op.ncols());
    let mut u = vec![0.0; op.nrows()];
    let mut w = vec![0.0; op.ncols()];
    let mut lambda_prev = f64::NAN;
    let mut delta_prev = f64::NAN;
    let noise_floor = 64.0 * f64::EPSILON;

    for _ in 0..cap {
        op.apply(&v, &mut u);
        let lambda: f64 = u.iter().map(|x| x * x).sum();
        op.apply_transpose(&u, &mut w);
        let wn = normalize(&mut w);
        if wn == 0.0 {
            // start vector in the null space of a nonzero operator is not
            // expected; let the SVD decide
            return if lambda == 0.0 && is_zero_operator(op) {
                Some(0.0)
            } else {
                None
            };
        }
        std::mem::swap(&mut v, &mut w);

        if lambda_prev.is_finite() {
            let delta = (lambda - lambda_prev).abs();
            let scale = lambda.max(f64::MIN_POSITIVE);
            if delta <= noise_floor * scale {
                return Some(lambda.sqrt());
            }
            if delta <= tol * scale && delta_prev.is_finite() && delta_prev > 0.0 {
                let ratio = delta / delta_prev;
                if ratio < 1.0 && delta * ratio / (1.0 - ratio) <= tol * scale {
                    return Some(lambda.sqrt());
                }
            }
            delta_prev = delta;
        }
        lambda_prev = lambda;
    }
    None
}

fn is_zero_operator<L: LinearOperator + ?Sized>(op: &L) -> bool {
    op.to_dense().as_slice().iter().all(|v| *v == 0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn diagonal_and_identity() {
        let d = Matrix::from_diag(&[3.0, 1.0]).unwrap();
        assert_relative_eq!(spectral_norm(&d, DEFAULT_TOL).unwrap(), 3.0, max_relative = 1e-10);
        let i = Matrix::identity(3);
        assert_relative_eq!(spectral_norm(&i, DEFAULT_TOL).unwrap(), 1.0, max_relative = 1e-10);
    }

    #[test]
    fn gaussian_matches_svd() {
        let m = sample_gaussian(50, 50, 1.0, &RngStream::new(7, 0)).unwrap();
        let p = spectral_norm(&m, DEFAULT_TOL).unwrap();
        let s = svd_spectral_norm(&m);
        assert_relative_eq!(p, s, max_relative = 1e-8);
    }

    #[test]
    fn zero_matrix_norm() {
        let z = Matrix::zeros(4, 3);
        assert_eq!(spectral_norm(&z, DEFAULT_TOL).unwrap(), 0.0);
        assert_eq!(frobenius_norm(&z).unwrap(), 0.0);
    }

    #[test]
    fn circulant_not_stuck_at_zero_frequency() {
        // [[1, -1], [-1, 1]] has the constant vector in its null space
        let m = Matrix::from_rows(&[vec![1.0, -1.0], vec![-1.0, 1.0]]).unwrap();
        assert_relative_eq!(spectral_norm(&m, DEFAULT_TOL).unwrap(), 2.0, max_relative = 1e-10);
    }

    #[test]
    fn frobenius_examples() {
        assert_relative_eq!(frobenius_norm(&Matrix::identity(2)).unwrap(), 2f64.sqrt());
        let m = Matrix::from_rows(&[vec![3.0, 4.0]]).unwrap();
        assert_eq!(frobenius_norm(&m).unwrap(), 5.0);
    }

    #[test]
    fn rejects_non_finite() {
        assert!(Matrix::new(1, 2, vec![1.0, f64::NAN]).is_err());
        let mut m = Matrix::identity(2);
        m.set(0, 1, f64::INFINITY);
        assert!(matches!(spectral_norm(&m, 1e-10), Err(Error::InvalidInput(_))));
        assert!(matches!(frobenius_norm(&m), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn rejects_bad_tolerance_and_shapes() {
        assert!(spectral_norm(&Matrix::identity(2), 0.0).is_err());
        assert!(sample_gaussian(0, 3, 1.0, &RngStream::new(1, 0)).is_err());
        assert!(sample_gaussian(3, 3, 0.0, &RngStream::new(1, 0)).is_err());
        assert!(Matrix::new(2, 2, vec![1.0; 3]).is_err());
    }

    #[test]
    fn sampling_is_deterministic_and_scales() {
        let rng = RngStream::new(42, 3);
        let a = sample_gaussian(2, 2, 1.0, &rng).unwrap();
        let b = sample_gaussian(2, 2, 1.0, &rng).unwrap();
        assert_eq!(a, b);

        let one = sample_gaussian(10, 10, 1.0, &rng).unwrap();
        let two = sample_gaussian(10, 10, 2.0, &rng).unwrap();
        for (x, y) in one.as_slice().iter().zip(two.as_slice()) {
            assert_eq!(2.0 * x, *y);
        }
    }

    #[test]
    fn sample_moments() {
        let m = sample_gaussian(1000, 1, 1.0, &RngStream::new(11, 0)).unwrap();
        let n = m.as_slice().len() as f64;
        let mean = m.as_slice().iter().sum::<f64>() / n;
        let var = m.as_slice().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!(mean.abs() < 0.1, "mean {mean}");
        assert!((var.sqrt() - 1.0).abs() < 0.1, "std {}", var.sqrt());
    }

    #[test]
    fn substreams_differ() {
        let root = RngStream::new(5, 0);
        let a = gaussian_vec(4, 1.0, &root.substream(0));
        let b = gaussian_vec(4, 1.0, &root.substream(1));
        assert_ne!(a, b);
        assert_eq!(a, gaussian_vec(4, 1.0, &root.substream(0)));
    }

    #[test]
    fn sparse_agrees_with_dense() {
        let trips = vec![(0, 0, 1.0), (0, 2, -2.0), (1, 1, 3.0), (2, 0, 0.5), (2, 0, 0.5)];
        let s = SparseMatrix::from_triplets(3, 3, &trips).unwrap();
        assert_eq!(s.nnz(), 4);
        let d = s.to_dense();
        assert_eq!(d.get(2, 0), 1.0);
        let ns = spectral_norm_of(&s, DEFAULT_TOL).unwrap();
        let nd = svd_spectral_norm(&d);
        assert_relative_eq!(ns, nd, max_relative = 1e-9);
    }

    #[test]
    fn rectangular_matvec_transpose() {
        let m = Matrix::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap();
        let mut y = vec![0.0; 3];
        m.apply_transpose(&[1.0, 1.0], &mut y);
        assert_eq!(y, vec![5.0, 7.0, 9.0]);
        assert_eq!(m.transpose().matvec(&[1.0, 1.0]).unwrap(), y);
    }
}
