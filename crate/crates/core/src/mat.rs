//! Dense small-matrix helpers shared by every other module.
//!
//! All matrices here are desk-scale (at most a few hundred rows), so everything
//! is backed by `nalgebra`'s dense types. The general eigensolver goes through a
//! real Schur decomposition; symmetric definiteness tests use the symmetric
//! eigendecomposition.

use std::cmp::Ordering;

use nalgebra::{Complex, DMatrix, Matrix3, Schur, SymmetricEigen, Vector3};
use thiserror::Error;

/// Dense, heap-allocated real matrix.
pub type Mat = DMatrix<f64>;

/// Largest dimension accepted by [`eigenvalues`].
pub const MAX_EIGEN_DIM: usize = 64;

/// Default absolute tolerance for symmetry checks.
pub const SYMMETRY_TOL: f64 = 1e-9;

const SCHUR_EPS: [f64; 4] = [1e-14, f64::EPSILON, 1e-13, 1e-12];
const SCHUR_MAX_ITER: usize = 10_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MatError {
    #[error("matrix must be square, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("matrix dimension {0} exceeds the eigensolver limit of {MAX_EIGEN_DIM}")]
    TooLarge(usize),
    #[error("matrix contains non-finite entries")]
    NonFinite,
    #[error("eigenvalue iteration did not converge")]
    NoConvergence,
    #[error("matrix is not symmetric: max |M - M^T| = {0:e}")]
    NotSymmetric(f64),
    #[error("matrix is singular")]
    Singular,
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

/// Cross-product matrix: `skew(a) * b == a.cross(b)`.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

pub fn kron(a: &Mat, b: &Mat) -> Mat {
    a.kronecker(b)
}

/// `a ⊗ I₃`, the per-axis expansion used for every stacked matrix.
pub fn kron_i3(a: &Mat) -> Mat {
    a.kronecker(&Mat::identity(3, 3))
}

/// Builds a square block matrix from a grid of equally sized square blocks.
pub fn block(blocks: &[Vec<&Mat>]) -> Mat {
    let rows_b = blocks.len();
    let cols_b = blocks.first().map_or(0, |r| r.len());
    let bs = blocks[0][0].nrows();
    let bc = blocks[0][0].ncols();
    let mut out = Mat::zeros(rows_b * bs, cols_b * bc);
    for (bi, row) in blocks.iter().enumerate() {
        for (bj, b) in row.iter().enumerate() {
            out.view_mut((bi * bs, bj * bc), (bs, bc)).copy_from(*b);
        }
    }
    out
}

/// Multiset of eigenvalues of a real matrix, sorted by `(re, im)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexEigenSet {
    values: Vec<Complex<f64>>,
    tolerance: f64,
}

fn cmp_complex(a: &Complex<f64>, b: &Complex<f64>) -> Ordering {
    a.re.total_cmp(&b.re).then(a.im.total_cmp(&b.im))
}

impl ComplexEigenSet {
    pub fn new(mut values: Vec<Complex<f64>>, tolerance: f64) -> Self {
        values.sort_by(cmp_complex);
        Self { values, tolerance }
    }

    pub fn values(&self) -> &[Complex<f64>] {
        &self.values
    }

    pub fn tolerance(&self) -> f64 {
        self.tolerance
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn product(&self) -> Complex<f64> {
        self.values.iter().fold(Complex::new(1.0, 0.0), |acc, z| acc * z)
    }

    /// Number of eigenvalues within `tol` of `z`.
    pub fn count_near(&self, z: Complex<f64>, tol: f64) -> usize {
        self.values.iter().filter(|v| (**v - z).norm() <= tol).count()
    }

    /// Every value has its conjugate in the set, counting multiplicity.
    pub fn is_conjugate_closed(&self, tol: f64) -> bool {
        let mut used = vec![false; self.values.len()];
        for i in 0..self.values.len() {
            if used[i] {
                continue;
            }
            let z = self.values[i];
            if z.im.abs() <= tol {
                used[i] = true;
                continue;
            }
            let partner = (0..self.values.len())
                .find(|&j| j != i && !used[j] && (self.values[j] - z.conj()).norm() <= tol);
            match partner {
                Some(j) => {
                    used[i] = true;
                    used[j] = true;
                }
                None => return false,
            }
        }
        true
    }

    /// Greedy multiset matching: each value in `self` is paired with the
    /// closest unused value in `other`. Returns the worst pairing distance, or
    /// `None` when the cardinalities differ.
    pub fn max_matching_distance(&self, other: &ComplexEigenSet) -> Option<f64> {
        if self.len() != other.len() {
            return None;
        }
        let mut used = vec![false; other.len()];
        let mut worst: f64 = 0.0;
        for z in &self.values {
            let (j, d) = other
                .values
                .iter()
                .enumerate()
                .filter(|(j, _)| !used[*j])
                .map(|(j, w)| (j, (*w - z).norm()))
                .min_by(|a, b| a.1.total_cmp(&b.1))?;
            used[j] = true;
            worst = worst.max(d);
        }
        Some(worst)
    }
}

fn ensure_square(m: &Mat) -> Result<(), MatError> {
    if m.nrows() != m.ncols() {
        return Err(MatError::NotSquare {
            rows: m.nrows(),
            cols: m.ncols(),
        });
    }
    Ok(())
}

fn ensure_finite(m: &Mat) -> Result<(), MatError> {
    if m.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(MatError::NonFinite)
    }
}

/// The shifted QR iteration can stall on highly structured inputs (exact zero
/// blocks, Jordan pairs). Retry with other tolerances, then on a fixed
/// orthogonal similarity of the input, which has the same spectrum.
fn schur_with_retries(m: &Mat) -> Option<Schur<f64, nalgebra::Dyn>> {
    let attempt = |a: &Mat| {
        SCHUR_EPS
            .iter()
            .find_map(|&eps| Schur::try_new(a.clone(), eps, SCHUR_MAX_ITER))
    };
    attempt(m).or_else(|| {
        let n = m.nrows();
        let seed = Mat::from_fn(n, n, |i, j| ((i * 7 + j * 13 + 1) as f64).sin());
        let q = seed.qr().q();
        attempt(&(q.transpose() * m * &q))
    })
}

/// All eigenvalues of a real square matrix.
pub fn eigenvalues(m: &Mat) -> Result<ComplexEigenSet, MatError> {
    ensure_square(m)?;
    ensure_finite(m)?;
    let n = m.nrows();
    if n > MAX_EIGEN_DIM {
        return Err(MatError::TooLarge(n));
    }
    if n == 0 {
        return Ok(ComplexEigenSet::new(Vec::new(), 0.0));
    }
    let schur = schur_with_retries(m).ok_or(MatError::NoConvergence)?;
    let values: Vec<Complex<f64>> = schur.complex_eigenvalues().iter().copied().collect();
    let scale = m.amax().max(1.0);
    Ok(ComplexEigenSet::new(values, 1e-8 * scale))
}

/// Largest entry of `|M - Mᵀ|`.
pub fn asymmetry(m: &Mat) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

pub fn check_symmetric(m: &Mat, tol: f64) -> Result<(), MatError> {
    ensure_square(m)?;
    ensure_finite(m)?;
    let a = asymmetry(m);
    if a > tol {
        return Err(MatError::NotSymmetric(a));
    }
    Ok(())
}

/// `(M + Mᵀ) / 2`.
pub fn symmetrize(m: &Mat) -> Mat {
    (m + m.transpose()) * 0.5
}

/// Smallest and largest eigenvalue of a symmetric matrix.
pub fn symmetric_extremes(m: &Mat, tol: f64) -> Result<(f64, f64), MatError> {
    check_symmetric(m, tol)?;
    if m.nrows() == 0 {
        return Ok((0.0, 0.0));
    }
    let eig = SymmetricEigen::new(symmetrize(m));
    let min = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    let max = eig.eigenvalues.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok((min, max))
}

/// True iff the largest eigenvalue is below `-tol`.
pub fn is_negative_definite(m: &Mat, tol: f64) -> Result<bool, MatError> {
    let (_, max) = symmetric_extremes(m, SYMMETRY_TOL.max(tol))?;
    Ok(max < -tol)
}

/// True iff the smallest eigenvalue is above `tol`.
pub fn is_positive_definite(m: &Mat, tol: f64) -> Result<bool, MatError> {
    let (min, _) = symmetric_extremes(m, SYMMETRY_TOL.max(tol))?;
    Ok(min > tol)
}

pub fn solve(a: &Mat, b: &Mat) -> Result<Mat, MatError> {
    ensure_square(a)?;
    if a.nrows() != b.nrows() {
        return Err(MatError::Dimension(format!(
            "solve: lhs has {} rows, rhs has {}",
            a.nrows(),
            b.nrows()
        )));
    }
    a.clone().lu().solve(b).ok_or(MatError::Singular)
}

pub fn inverse(a: &Mat) -> Result<Mat, MatError> {
    ensure_square(a)?;
    a.clone().try_inverse().ok_or(MatError::Singular)
}

/// Numerical rank from singular values, relative tolerance `rtol`.
pub fn rank(m: &Mat, rtol: f64) -> usize {
    let sv = m.clone().singular_values();
    let top = sv.iter().copied().fold(0.0, f64::max);
    sv.iter().filter(|s| **s > rtol * top).count()
}
