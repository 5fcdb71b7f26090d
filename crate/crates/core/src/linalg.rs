//! Dense complex linear algebra used by the Floquet machinery: eigen
//! decomposition through the complex Schur form, the principal matrix
//! logarithm, the matrix exponential and spectral projections.

use nalgebra::{DMatrix, DVector, Schur};
use num_complex::Complex64;

use crate::error::{Error, Result};

pub type CMatrix = DMatrix<Complex64>;

pub fn to_complex(m: &DMatrix<f64>) -> CMatrix {
    m.map(|v| Complex64::new(v, 0.0))
}

pub fn real_part(m: &CMatrix) -> DMatrix<f64> {
    m.map(|v| v.re)
}

pub fn max_abs(m: &CMatrix) -> f64 {
    m.iter().map(|v| v.norm()).fold(0.0, f64::max)
}

fn complex_schur(m: &CMatrix) -> Result<(CMatrix, CMatrix)> {
    if !m.is_square() {
        return Err(Error::InvalidInput("matrix must be square".into()));
    }
    if m.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
        return Err(Error::EigenFailure("matrix has non-finite entries".into()));
    }
    let schur = Schur::try_new(m.clone(), f64::EPSILON, 10_000)
        .ok_or_else(|| Error::EigenFailure("Schur iteration did not converge".into()))?;
    Ok(schur.unpack())
}

/// Eigenvalues, unit eigenvectors and the 2-norm condition number of the
/// eigenvector matrix.
#[derive(Debug, Clone)]
pub struct EigenDecomposition {
    pub values: Vec<Complex64>,
    pub vectors: CMatrix,
    pub cond: f64,
}

impl EigenDecomposition {
    pub fn new(m: &CMatrix) -> Result<Self> {
        let (q, t) = complex_schur(m)?;
        let n = t.nrows();
        let scale = max_abs(&t).max(f64::MIN_POSITIVE);
        let mut vectors = CMatrix::zeros(n, n);
        for i in 0..n {
            let lam = t[(i, i)];
            let mut x = DVector::<Complex64>::zeros(n);
            x[i] = Complex64::new(1.0, 0.0);
            for j in (0..i).rev() {
                let mut s = Complex64::new(0.0, 0.0);
                for k in j + 1..=i {
                    s += t[(j, k)] * x[k];
                }
                let mut d = t[(j, j)] - lam;
                if d.norm() < f64::EPSILON * scale {
                    d = Complex64::new(f64::EPSILON * scale, 0.0);
                }
                x[j] = -s / d;
            }
            let v = &q * x;
            let nrm = v.norm();
            vectors.set_column(i, &(v / Complex64::new(nrm, 0.0)));
        }
        let values = (0..n).map(|i| t[(i, i)]).collect();
        let cond = cond2(&vectors);
        Ok(Self {
            values,
            vectors,
            cond,
        })
    }

    pub fn from_real(m: &DMatrix<f64>) -> Result<Self> {
        Self::new(&to_complex(m))
    }

    /// Inverse of the eigenvector matrix.
    pub fn inverse_vectors(&self) -> Result<CMatrix> {
        self.vectors
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::EigenFailure("eigenvector matrix is singular".into()))
    }

    /// Spectral projection onto the eigenvectors whose indices are listed.
    pub fn projection(&self, indices: &[usize]) -> Result<CMatrix> {
        let inv = self.inverse_vectors()?;
        let n = self.vectors.nrows();
        let mut p = CMatrix::zeros(n, n);
        for &i in indices {
            p += self.vectors.column(i) * inv.row(i);
        }
        Ok(p)
    }
}

/// Singular values sorted in descending order.
pub fn sorted_singular_values(m: &CMatrix) -> Vec<f64> {
    let mut sv: Vec<f64> = m.singular_values().iter().cloned().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    sv
}

pub fn cond2(m: &CMatrix) -> f64 {
    let sv = sorted_singular_values(m);
    match (sv.first(), sv.last()) {
        (Some(&hi), Some(&lo)) if lo > 0.0 => hi / lo,
        _ => f64::INFINITY,
    }
}

/// Principal square root of an upper-triangular matrix.
fn sqrt_triangular(t: &CMatrix) -> CMatrix {
    let n = t.nrows();
    let mut u = CMatrix::zeros(n, n);
    for j in 0..n {
        u[(j, j)] = t[(j, j)].sqrt();
        for i in (0..j).rev() {
            let mut s = Complex64::new(0.0, 0.0);
            for k in i + 1..j {
                s += u[(i, k)] * u[(k, j)];
            }
            u[(i, j)] = (t[(i, j)] - s) / (u[(i, i)] + u[(j, j)]);
        }
    }
    u
}

/// Principal logarithm of a real or complex square matrix.
///
/// Triangularizes with the complex Schur form, takes repeated principal
/// square roots of the triangular factor until it is close to the identity,
/// sums the Mercator series there and scales back.
pub fn logm(m: &CMatrix) -> Result<CMatrix> {
    let (q, mut t) = complex_schur(m)?;
    let n = t.nrows();
    let scale = max_abs(&t);
    for i in 0..n {
        let mu = t[(i, i)];
        if mu.norm() <= f64::EPSILON * scale.max(1.0) {
            return Err(Error::ZeroMultiplier);
        }
        if mu.re < 0.0 && mu.im.abs() <= 1e-10 * mu.norm() {
            return Err(Error::LogarithmBranch { re: mu.re, im: mu.im });
        }
    }
    let id = CMatrix::identity(n, n);
    let mut squarings = 0u32;
    while max_abs(&(&t - &id)) > 0.25 {
        if squarings > 64 {
            return Err(Error::EigenFailure("matrix logarithm: square roots did not converge".into()));
        }
        t = sqrt_triangular(&t);
        squarings += 1;
    }
    let x = &t - &id;
    let mut term = x.clone();
    let mut log = x.clone();
    for k in 2..400 {
        term = &term * &x;
        let sign = if k % 2 == 0 { -1.0 } else { 1.0 };
        let add = &term * Complex64::new(sign / k as f64, 0.0);
        log += &add;
        if max_abs(&add) < 1e-18 * max_abs(&log).max(1e-300) {
            break;
        }
    }
    log *= Complex64::new(2f64.powi(squarings as i32), 0.0);
    Ok(&q * log * q.adjoint())
}

/// Matrix exponential by scaling and squaring of the Taylor series.
pub fn expm(a: &CMatrix) -> CMatrix {
    let n = a.nrows();
    let norm1 = (0..n)
        .map(|j| a.column(j).iter().map(|v| v.norm()).sum::<f64>())
        .fold(0.0, f64::max);
    let squarings = if norm1 > 0.5 {
        (norm1 / 0.5).log2().ceil() as i32
    } else {
        0
    };
    let scaled = a * Complex64::new(2f64.powi(-squarings), 0.0);
    let mut result = CMatrix::identity(n, n);
    let mut term = CMatrix::identity(n, n);
    for k in 1..60 {
        term = &term * &scaled * Complex64::new(1.0 / k as f64, 0.0);
        result += &term;
        if max_abs(&term) < 1e-18 {
            break;
        }
    }
    for _ in 0..squarings {
        result = &result * &result;
    }
    result
}

/// Orthonormal real basis of the range of `p`, which is expected to have
/// real structure and the given rank. Columns are ordered by decreasing
/// singular value.
pub fn real_range_basis(p: &CMatrix, rank: usize) -> Result<DMatrix<f64>> {
    let n = p.nrows();
    if rank == 0 {
        return Ok(DMatrix::zeros(n, 0));
    }
    let mut stacked = DMatrix::<f64>::zeros(n, 2 * p.ncols());
    for j in 0..p.ncols() {
        for i in 0..n {
            stacked[(i, j)] = p[(i, j)].re;
            stacked[(i, j + p.ncols())] = p[(i, j)].im;
        }
    }
    let svd = stacked.svd(true, false);
    let u = svd
        .u
        .ok_or_else(|| Error::EigenFailure("SVD did not return left vectors".into()))?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    if order.len() < rank {
        return Err(Error::EigenFailure("projection rank smaller than requested".into()));
    }
    let mut basis = DMatrix::zeros(n, rank);
    for (c, &idx) in order.iter().take(rank).enumerate() {
        basis.set_column(c, &u.column(idx));
    }
    Ok(basis)
}

/// Smallest singular value of a real matrix with its right singular vector.
pub fn smallest_singular_pair(m: &DMatrix<f64>) -> Result<(f64, DVector<f64>)> {
    let svd = m.clone().svd(false, true);
    let vt = svd
        .v_t
        .ok_or_else(|| Error::EigenFailure("SVD did not return right vectors".into()))?;
    let (idx, sigma) = svd
        .singular_values
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, s)| (i, *s))
        .ok_or_else(|| Error::EigenFailure("empty matrix".into()))?;
    Ok((sigma, vt.row(idx).transpose()))
}
