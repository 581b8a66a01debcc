//! Small dense linear-algebra helpers shared by the estimators.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

/// Lower-triangular factor of a covariance matrix plus the diagonal jitter
/// that was needed to obtain it.
#[derive(Debug, Clone)]
pub struct Factor {
    pub lower: DMatrix<f64>,
    pub jitter: f64,
}

const JITTER_BASE: f64 = 1e-10;
const JITTER_ESCALATIONS: usize = 4;

fn strict_cholesky(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let chol: Cholesky<f64, Dyn> = Cholesky::new(m.clone())?;
    let l = chol.unpack();
    let ok = (0..l.nrows()).all(|i| l[(i, i)] > 0.0 && l[(i, i)].is_finite())
        && l.iter().all(|v| v.is_finite());
    ok.then_some(l)
}

pub fn min_symmetric_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    m.clone()
        .symmetric_eigenvalues()
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

/// Cholesky factorization with the jitter escalation policy: on failure add
/// `1e-10 * trace / n` to the diagonal, escalating by 10x up to four times.
///
/// An all-zero matrix factors to the zero matrix without jitter.
pub fn psd_factor(m: &DMatrix<f64>) -> Result<Factor> {
    let n = m.nrows();
    if m.iter().all(|v| *v == 0.0) {
        return Ok(Factor {
            lower: DMatrix::zeros(n, n),
            jitter: 0.0,
        });
    }
    if let Some(lower) = strict_cholesky(m) {
        return Ok(Factor { lower, jitter: 0.0 });
    }
    let base = JITTER_BASE * m.trace().abs() / n as f64;
    let mut jitter = base;
    for _ in 0..=JITTER_ESCALATIONS {
        if jitter > 0.0 {
            let mut repaired = m.clone();
            for i in 0..n {
                repaired[(i, i)] += jitter;
            }
            if let Some(lower) = strict_cholesky(&repaired) {
                return Ok(Factor { lower, jitter });
            }
        }
        jitter *= 10.0;
    }
    Err(Error::NotPositiveSemidefinite {
        min_eigenvalue: min_symmetric_eigenvalue(m),
    })
}

/// Solves a symmetric positive (semi)definite system, escalating jitter when
/// the plain factorization fails.
pub fn solve_spd(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    let factor = psd_factor(a).map_err(|_| Error::Singular("normal equations".into()))?;
    let l = factor.lower;
    if l.nrows() == 0 {
        return Ok(DVector::zeros(0));
    }
    if (0..l.nrows()).any(|i| l[(i, i)] == 0.0) {
        return Err(Error::Singular("zero pivot".into()));
    }
    let z = l
        .solve_lower_triangular(b)
        .ok_or_else(|| Error::Singular("forward substitution".into()))?;
    l.tr_solve_lower_triangular(&z)
        .ok_or_else(|| Error::Singular("back substitution".into()))
}

/// Ordinary least squares via a column-pivot-free QR; rejects numerically
/// rank-deficient designs.
pub fn ols(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<DVector<f64>> {
    let p = x.ncols();
    if p == 0 {
        return Ok(DVector::zeros(0));
    }
    if x.nrows() < p {
        return Err(Error::Singular(format!(
            "{} rows for {} regressors",
            x.nrows(),
            p
        )));
    }
    let qr = x.clone().qr();
    let r = qr.r();
    let scale = (0..p).map(|i| r[(i, i)].abs()).fold(0.0, f64::max);
    if scale == 0.0 || (0..p).any(|i| r[(i, i)].abs() <= 1e-10 * scale) {
        return Err(Error::Singular("rank-deficient regressor matrix".into()));
    }
    let qty = qr.q().transpose() * y;
    r.solve_upper_triangular(&qty)
        .ok_or_else(|| Error::Singular("triangular solve".into()))
}

/// Symmetrizes in place: `(M + Mᵀ) / 2`.
pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_matrix_factors_without_jitter() {
        let f = psd_factor(&DMatrix::zeros(3, 3)).unwrap();
        assert_eq!(f.jitter, 0.0);
        assert!(f.lower.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn singular_psd_needs_jitter() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let f = psd_factor(&m).unwrap();
        assert!(f.jitter > 0.0);
        let back = &f.lower * f.lower.transpose();
        assert!((back[(0, 1)] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn indefinite_is_rejected() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        match psd_factor(&m) {
            Err(Error::NotPositiveSemidefinite { min_eigenvalue }) => {
                assert!((min_eigenvalue + 1.0).abs() < 1e-12)
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn ols_recovers_exact_coefficients() {
        let x = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 1.0, 1.0, 1.0, 2.0, 1.0, 3.0]);
        let y = DVector::from_vec(vec![1.0, 3.0, 5.0, 7.0]);
        let b = ols(&x, &y).unwrap();
        assert!((b[0] - 1.0).abs() < 1e-12 && (b[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn ols_rejects_collinear() {
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 2.0, 4.0, 3.0, 6.0]);
        let y = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        assert!(ols(&x, &y).is_err());
    }
}
