//! Dense linear-algebra helpers shared across the crate.
//!
//! Static Hamiltonians are real symmetric (see the crate-level gauge note),
//! so the workhorse here is the real self-adjoint eigensolver. Propagators
//! and drive generators are complex; a few small conveniences for `Mat<c64>`
//! that faer does not expose directly (scalar scaling, integer powers) live
//! here too.

use faer::{Mat, Side};

pub use faer::c64;

use crate::error::{Error, Result};

/// Kronecker product of two real dense matrices, row-major convention:
/// `out[(i_a·r_b + i_b, j_a·c_b + j_b)] = a[(i_a, j_a)]·b[(i_b, j_b)]`.
pub fn kron(a: &Mat<f64>, b: &Mat<f64>) -> Mat<f64> {
    let (ra, ca) = (a.nrows(), a.ncols());
    let (rb, cb) = (b.nrows(), b.ncols());
    Mat::from_fn(ra * rb, ca * cb, |i, j| {
        a[(i / rb, j / cb)] * b[(i % rb, j % cb)]
    })
}

/// Maximum absolute deviation from symmetry, `max |m - mᵀ|`.
pub fn symmetry_residual(m: &Mat<f64>) -> f64 {
    let mut r: f64 = 0.0;
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            r = r.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    r
}

/// Maximum absolute deviation from Hermiticity, `max |m - m†|`.
pub fn hermiticity_residual(m: &Mat<c64>) -> f64 {
    let mut r: f64 = 0.0;
    for i in 0..m.nrows() {
        for j in i..m.ncols() {
            let d = m[(i, j)] - m[(j, i)].conj();
            r = r.max(d.norm());
        }
    }
    r
}

/// Eigendecomposition of a real symmetric matrix.
///
/// Returns eigenvalues in ascending order and the orthogonal matrix whose
/// columns are the corresponding eigenvectors. The input is checked for
/// symmetry against an absolute tolerance scaled by the largest entry.
pub fn eigh(m: &Mat<f64>) -> Result<(Vec<f64>, Mat<f64>)> {
    let n = m.nrows();
    if n != m.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "eigh expects a square matrix, got {}x{}",
            n,
            m.ncols()
        )));
    }
    let scale = (0..n)
        .flat_map(|i| (0..n).map(move |j| (i, j)))
        .fold(0.0f64, |acc, (i, j)| acc.max(m[(i, j)].abs()))
        .max(1.0);
    let tolerance = 1e-12 * scale;
    let residual = symmetry_residual(m);
    if residual > tolerance {
        return Err(Error::NotHermitian {
            residual,
            tolerance,
        });
    }
    let evd = m
        .self_adjoint_eigen(Side::Lower)
        .map_err(|e| Error::DimensionMismatch(format!("eigendecomposition failed: {e:?}")))?;
    let s = evd.S().column_vector();
    let values: Vec<f64> = (0..n).map(|i| s[i]).collect();
    Ok((values, evd.U().to_owned()))
}

/// `m · z` for a complex matrix and scalar.
pub fn cscale(m: &Mat<c64>, z: c64) -> Mat<c64> {
    Mat::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)] * z)
}

/// Promote a real matrix to complex storage.
pub fn to_complex(m: &Mat<f64>) -> Mat<c64> {
    Mat::from_fn(m.nrows(), m.ncols(), |i, j| c64::new(m[(i, j)], 0.0))
}

/// Complex identity matrix.
pub fn ceye(n: usize) -> Mat<c64> {
    Mat::from_fn(n, n, |i, j| {
        if i == j {
            c64::new(1.0, 0.0)
        } else {
            c64::new(0.0, 0.0)
        }
    })
}

/// `u^m` by binary exponentiation (m ≥ 0).
pub fn cpow(u: &Mat<c64>, mut m: u64) -> Mat<c64> {
    let mut result = ceye(u.nrows());
    let mut base = u.to_owned();
    while m > 0 {
        if m & 1 == 1 {
            result = &result * &base;
        }
        m >>= 1;
        if m > 0 {
            base = &base * &base;
        }
    }
    result
}

/// Frobenius norm of `u† u − 1`, a unitarity defect measure.
pub fn unitarity_defect(u: &Mat<c64>) -> f64 {
    let n = u.nrows();
    let g = u.adjoint() * u;
    let mut acc = 0.0;
    for i in 0..n {
        for j in 0..n {
            let d = g[(i, j)] - if i == j { c64::new(1.0, 0.0) } else { c64::new(0.0, 0.0) };
            acc += d.norm_sqr();
        }
    }
    acc.sqrt()
}
