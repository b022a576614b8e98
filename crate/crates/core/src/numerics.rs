//! Dense linear-algebra primitives: Hankel construction, rank-revealing SVD,
//! kernel extraction, left eigenpairs and the stability/PBH tests built on them.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use thiserror::Error;

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;
pub type CMatrix = DMatrix<Complex64>;
pub type CVector = DVector<Complex64>;

/// Imaginary parts at or below this (relative to the modulus) are treated as zero.
const REAL_EIG_TOL: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("matrix has full numerical rank; no kernel")]
    NoKernel,
    #[error("kernel vector has a vanishing last entry ({0:e}); cannot normalize")]
    DegenerateKernel(f64),
    #[error("matrix contains a non-finite entry at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
}

/// A left eigenvector `w` of a matrix `A` with `wᵀA = λwᵀ` and `‖w‖ = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct EigenPair {
    pub value: Complex64,
    pub left_vector: CVector,
}

impl EigenPair {
    pub fn is_real(&self) -> bool {
        is_real(self.value)
    }

    /// Real part of the left vector; meaningful for real eigenvalues only.
    pub fn real_left_vector(&self) -> Vector {
        self.left_vector.map(|z| z.re)
    }
}

pub(crate) fn is_real(z: Complex64) -> bool {
    z.im.abs() <= REAL_EIG_TOL * z.norm().max(1.0)
}

pub fn check_finite(m: &Matrix) -> Result<(), NumericsError> {
    for col in 0..m.ncols() {
        for row in 0..m.nrows() {
            if !m[(row, col)].is_finite() {
                return Err(NumericsError::NonFinite { row, col });
            }
        }
    }
    Ok(())
}

/// Builds a matrix from rows, rejecting ragged or non-finite input.
pub fn matrix_from_rows(rows: &[Vec<f64>]) -> Result<Matrix, NumericsError> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(NumericsError::InvalidInput("ragged matrix rows".into()));
    }
    let m = Matrix::from_fn(nrows, ncols, |i, j| rows[i][j]);
    check_finite(&m)?;
    Ok(m)
}

pub fn matrix_to_rows(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

/// Default relative rank tolerance: `max(rows, cols) · ε · 64`.
pub fn default_rank_tol(rows: usize, cols: usize) -> f64 {
    rows.max(cols).max(1) as f64 * f64::EPSILON * 64.0
}

/// Square Hankel matrix `H[i][j] = seq[i + j]` from `2m + 1` samples.
pub fn hankel_from_differences(seq: &[f64]) -> Result<Matrix, NumericsError> {
    if seq.is_empty() || seq.len().is_multiple_of(2) {
        return Err(NumericsError::InvalidInput(format!(
            "hankel input needs an odd, positive length, got {}",
            seq.len()
        )));
    }
    let size = seq.len() / 2 + 1;
    Ok(Matrix::from_fn(size, size, |i, j| seq[i + j]))
}

fn singular_values_desc(m: &Matrix) -> Vec<f64> {
    if m.is_empty() {
        return Vec::new();
    }
    nalgebra::linalg::SVD::new(m.clone(), false, false)
        .singular_values
        .iter()
        .copied()
        .collect()
}

fn rank_of_singular_values(sv: &[f64], rel_tol: f64) -> usize {
    let largest = sv.iter().copied().fold(0.0, f64::max);
    if largest == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > rel_tol * largest).count()
}

/// Number of singular values above `rel_tol` times the largest one.
pub fn numerical_rank(m: &Matrix, rel_tol: f64) -> usize {
    rank_of_singular_values(&singular_values_desc(m), rel_tol)
}

pub fn numerical_rank_complex(m: &CMatrix, rel_tol: f64) -> usize {
    if m.is_empty() {
        return 0;
    }
    let sv = nalgebra::linalg::SVD::new(m.clone(), false, false).singular_values;
    rank_of_singular_values(sv.as_slice(), rel_tol)
}

/// Smallest singular value over the largest; 0 for the zero matrix.
pub fn inverse_condition(m: &Matrix) -> f64 {
    let sv = singular_values_desc(m);
    match (sv.first(), sv.last()) {
        (Some(&hi), Some(&lo)) if hi > 0.0 => lo / hi,
        _ => 0.0,
    }
}

/// Right singular vector of the smallest singular value, rescaled so its last
/// entry is 1. `m` may be tall (stacked blocks) but not wide.
pub fn kernel_vector(m: &Matrix, rel_tol: f64) -> Result<Vector, NumericsError> {
    let cols = m.ncols();
    if cols == 0 || m.nrows() < cols {
        return Err(NumericsError::InvalidInput(format!(
            "kernel extraction needs rows >= cols > 0, got {}x{}",
            m.nrows(),
            cols
        )));
    }
    let norm = m.norm();
    if norm == 0.0 {
        let mut beta = Vector::zeros(cols);
        beta[cols - 1] = 1.0;
        return Ok(beta);
    }
    let svd = nalgebra::linalg::SVD::new(m.clone(), false, true);
    let sv = svd.singular_values.as_slice();
    if rank_of_singular_values(sv, rel_tol) == cols {
        return Err(NumericsError::NoKernel);
    }
    let v_t = svd.v_t.expect("v_t requested");
    let smallest = v_t.nrows() - 1;
    let v: Vector = v_t.row(smallest).transpose();
    let last = v[cols - 1];
    if last.abs() <= 1e3 * f64::EPSILON {
        return Err(NumericsError::DegenerateKernel(last));
    }
    Ok(v / last)
}

/// Eigenvalues sorted by modulus, then real part, then imaginary part (all
/// descending). Conjugate pairs are made exact and adjacent.
pub fn eigenvalues_sorted(a: &Matrix) -> Result<Vec<Complex64>, NumericsError> {
    if !a.is_square() {
        return Err(NumericsError::InvalidInput(format!(
            "eigenvalues need a square matrix, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    check_finite(a)?;
    if a.nrows() == 0 {
        return Ok(Vec::new());
    }
    let raw: Vec<Complex64> = a.complex_eigenvalues().iter().copied().collect();
    Ok(canonicalize_spectrum(raw))
}

fn canonicalize_spectrum(raw: Vec<Complex64>) -> Vec<Complex64> {
    let mut reals = Vec::new();
    let mut upper = Vec::new();
    let mut lower = Vec::new();
    for z in raw {
        if is_real(z) {
            reals.push(Complex64::new(z.re, 0.0));
        } else if z.im > 0.0 {
            upper.push(z);
        } else {
            lower.push(z);
        }
    }
    // pair each upper eigenvalue with the nearest lower one and make them exact conjugates
    let mut out = reals;
    for z in upper {
        let nearest = lower
            .iter()
            .enumerate()
            .min_by(|(_, p), (_, q)| {
                (z.conj() - **p)
                    .norm()
                    .total_cmp(&(z.conj() - **q).norm())
            })
            .map(|(i, _)| i);
        let z = match nearest {
            Some(i) => {
                let partner = lower.swap_remove(i);
                let avg = (z + partner.conj()) * 0.5;
                out.push(avg.conj());
                avg
            }
            None => z,
        };
        out.push(z);
    }
    out.extend(lower);
    out.sort_by(|p, q| {
        q.norm()
            .total_cmp(&p.norm())
            .then(q.re.total_cmp(&p.re))
            .then(q.im.total_cmp(&p.im))
    });
    out
}

/// Eigenvalues of a complex matrix from its (triangular) complex Schur form,
/// sorted like [`eigenvalues_sorted`].
pub fn complex_eigenvalues(a: &CMatrix) -> Result<Vec<Complex64>, NumericsError> {
    if !a.is_square() {
        return Err(NumericsError::InvalidInput(format!(
            "eigenvalues need a square matrix, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    if a.nrows() == 0 {
        return Ok(Vec::new());
    }
    let mut values: Vec<Complex64> = a
        .clone()
        .schur()
        .eigenvalues()
        .ok_or_else(|| NumericsError::InvalidInput("complex Schur form did not converge".into()))?
        .iter()
        .copied()
        .collect();
    values.sort_by(|p, q| {
        q.norm()
            .total_cmp(&p.norm())
            .then(q.re.total_cmp(&p.re))
            .then(q.im.total_cmp(&p.im))
    });
    Ok(values)
}

pub fn spectral_radius(a: &Matrix) -> Result<f64, NumericsError> {
    Ok(eigenvalues_sorted(a)?
        .first()
        .map_or(0.0, |z| z.norm()))
}

pub fn to_complex(m: &Matrix) -> CMatrix {
    m.map(|x| Complex64::new(x, 0.0))
}

/// Null-space basis (`count` vectors) of a complex matrix from its SVD.
fn complex_null_vectors(m: CMatrix, count: usize) -> Vec<CVector> {
    let n = m.ncols();
    let svd = nalgebra::linalg::SVD::new(m, false, true);
    let v_t = svd.v_t.expect("v_t requested");
    let rows = v_t.nrows();
    (0..count.min(rows))
        .map(|k| {
            // rows of v_t are conjugated right singular vectors
            let row = v_t.row(rows - 1 - k);
            CVector::from_fn(n, |i, _| row[i].conj())
        })
        .collect()
}

fn real_null_vectors(m: Matrix, count: usize) -> Vec<Vector> {
    let svd = nalgebra::linalg::SVD::new(m, false, true);
    let v_t = svd.v_t.expect("v_t requested");
    let rows = v_t.nrows();
    (0..count.min(rows))
        .map(|k| v_t.row(rows - 1 - k).transpose())
        .collect()
}

/// Scales a vector to unit norm with its largest-modulus entry real positive.
fn normalize_phase(v: CVector) -> CVector {
    let norm = v.norm();
    if norm == 0.0 {
        return v;
    }
    let pivot = v
        .iter()
        .copied()
        .enumerate()
        .fold((0, 0.0_f64), |(bi, bm), (i, z)| {
            if z.norm() > bm * (1.0 + 1e-12) {
                (i, z.norm())
            } else {
                (bi, bm)
            }
        })
        .0;
    let phase = v[pivot] / v[pivot].norm();
    v.map(|z| z / phase / norm)
}

/// Left eigenvector of `a` (real or complex matrix) for a known eigenvalue.
pub fn left_null_vector(a: &CMatrix, value: Complex64) -> CVector {
    let n = a.nrows();
    let shifted = a.transpose() - CMatrix::identity(n, n) * value;
    normalize_phase(
        complex_null_vectors(shifted, 1)
            .pop()
            .unwrap_or_else(|| CVector::zeros(n)),
    )
}

/// All `n` left eigenpairs of a real square matrix, in the canonical
/// eigenvalue order. Repeated eigenvalues receive an orthonormal basis of
/// their left null space.
pub fn eigen_left(a: &Matrix) -> Result<Vec<EigenPair>, NumericsError> {
    let values = eigenvalues_sorted(a)?;
    let n = a.nrows();
    let scale = a.norm().max(1.0);
    let mut pairs: Vec<EigenPair> = Vec::with_capacity(n);
    let mut i = 0;
    while i < values.len() {
        let value = values[i];
        if value.im < 0.0 {
            // conjugate of the preceding upper eigenvalue
            let partner = pairs
                .iter()
                .rev()
                .find(|p| (p.value.conj() - value).norm() <= 1e-12 * scale)
                .map(|p| p.left_vector.map(|z| z.conj()));
            let left_vector = match partner {
                Some(v) => v,
                None => left_null_vector(&to_complex(a), value),
            };
            pairs.push(EigenPair { value, left_vector });
            i += 1;
            continue;
        }
        // cluster of numerically repeated eigenvalues
        let mut j = i + 1;
        while j < values.len() && (values[j] - value).norm() <= 1e-9 * scale {
            j += 1;
        }
        let multiplicity = j - i;
        if is_real(value) {
            let shifted = a.transpose() - Matrix::identity(n, n) * value.re;
            for v in real_null_vectors(shifted, multiplicity) {
                pairs.push(EigenPair {
                    value: values[pairs.len()],
                    left_vector: normalize_phase(v.map(|x| Complex64::new(x, 0.0))),
                });
            }
        } else {
            let shifted = to_complex(a).transpose() - CMatrix::identity(n, n) * value;
            for v in complex_null_vectors(shifted, multiplicity) {
                pairs.push(EigenPair {
                    value: values[pairs.len()],
                    left_vector: normalize_phase(v),
                });
            }
        }
        i = j;
    }
    Ok(pairs)
}

/// All eigenvalues strictly inside the disk of radius `1 - margin`.
pub fn is_schur_stable(a: &Matrix, margin: f64) -> Result<bool, NumericsError> {
    Ok(spectral_radius(a)? < 1.0 - margin)
}

/// PBH test: `rank([A − λI | B]) = n`.
pub fn pbh_controllable(a: &Matrix, b: &Matrix, value: Complex64, rel_tol: f64) -> bool {
    let n = a.nrows();
    let mut stacked = CMatrix::zeros(n, n + b.ncols());
    stacked
        .view_mut((0, 0), (n, n))
        .copy_from(&(to_complex(a) - CMatrix::identity(n, n) * value));
    stacked.view_mut((0, n), (n, b.ncols())).copy_from(&to_complex(b));
    numerical_rank_complex(&stacked, rel_tol) == n
}

/// `[B, AB, …, A^{n−1}B]`.
pub fn controllability_matrix(a: &Matrix, b: &Matrix) -> Matrix {
    let n = a.nrows();
    let q = b.ncols();
    let mut out = Matrix::zeros(n, n * q);
    let mut block = b.clone();
    for k in 0..n {
        out.view_mut((0, k * q), (n, q)).copy_from(&block);
        block = a * block;
    }
    out
}

/// `[C; CA; …; CA^{n−1}]`.
pub fn observability_matrix(a: &Matrix, c: &Matrix) -> Matrix {
    controllability_matrix(&a.transpose(), &c.transpose()).transpose()
}
