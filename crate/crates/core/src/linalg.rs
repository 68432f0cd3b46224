//! Small dense helpers shared by the modules.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Largest absolute deviation from symmetry relative to the largest entry.
pub fn asymmetry(m: &DMatrix<f64>) -> f64 {
    let scale = m.amax();
    if scale == 0.0 {
        return 0.0;
    }
    (m - m.transpose()).amax() / scale
}

pub fn eigen(m: &DMatrix<f64>) -> SymmetricEigen<f64, nalgebra::Dyn> {
    SymmetricEigen::new(symmetrize(m))
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return f64::INFINITY;
    }
    symmetrize(m).symmetric_eigenvalues().min()
}

pub fn max_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return f64::NEG_INFINITY;
    }
    symmetrize(m).symmetric_eigenvalues().max()
}

/// Spectral norm of a symmetric matrix.
pub fn sym_norm(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    symmetrize(m).symmetric_eigenvalues().amax()
}

pub(crate) fn require_square(context: &'static str, m: &DMatrix<f64>) -> Result<()> {
    if m.nrows() != m.ncols() {
        return Err(Error::DimensionMismatch {
            context,
            expected: m.nrows(),
            found: m.ncols(),
        });
    }
    Ok(())
}

/// Rejects matrices with an eigenvalue below `-rel_tol·‖m‖`.
pub(crate) fn require_psd(m: &DMatrix<f64>, rel_tol: f64) -> Result<()> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument(
            "matrix has non-finite entries".into(),
        ));
    }
    let eig = symmetrize(m).symmetric_eigenvalues();
    if eig.is_empty() {
        return Ok(());
    }
    let scale = eig.amax();
    let min = eig.min();
    if min < -rel_tol * scale {
        return Err(Error::NotPsd { min, scale });
    }
    Ok(())
}

pub fn random_unit_vector<R: Rng + ?Sized>(n: usize, rng: &mut R) -> DVector<f64> {
    loop {
        let v = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let norm = v.norm();
        if norm > 1e-12 {
            return v / norm;
        }
    }
}

/// Uniform sample from the closed unit ball.
pub fn random_in_unit_ball<R: Rng + ?Sized>(n: usize, rng: &mut R) -> DVector<f64> {
    let s = random_unit_vector(n, rng);
    let u: f64 = rng.random();
    s * u.powf(1.0 / n as f64)
}

pub fn block_diag(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let (ra, ca) = a.shape();
    let (rb, cb) = b.shape();
    let mut m = DMatrix::zeros(ra + rb, ca + cb);
    m.view_mut((0, 0), (ra, ca)).copy_from(a);
    m.view_mut((ra, ca), (rb, cb)).copy_from(b);
    m
}
