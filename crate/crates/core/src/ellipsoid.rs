//! Ellipsoids `E(μ, Σ) = μ ⊕ {Σ^½ s : ‖s‖ ≤ 1}` with possibly singular shape.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, check_probability, Error, Result};
use crate::linalg::{self, asymmetry, eigen, random_in_unit_ball, random_unit_vector, symmetrize};

const SYMMETRY_TOL: f64 = 1e-10;
const CLAMP_TOL: f64 = 1e-10;
const MEMBERSHIP_TOL: f64 = 1e-9;
const SQRT_PSD_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ellipsoid {
    center: DVector<f64>,
    shape: DMatrix<f64>,
}

impl Ellipsoid {
    /// Validates symmetry and semidefiniteness; tiny negative eigenvalues are clamped to zero.
    pub fn new(center: DVector<f64>, shape: DMatrix<f64>) -> Result<Self> {
        linalg::require_square("ellipsoid shape", &shape)?;
        check_dim("ellipsoid center", shape.nrows(), center.len())?;
        if center.iter().chain(shape.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(
                "ellipsoid has non-finite entries".into(),
            ));
        }
        let dev = asymmetry(&shape);
        if dev > SYMMETRY_TOL {
            return Err(Error::NotSymmetric(dev));
        }
        let mut shape = symmetrize(&shape);
        if shape.nrows() > 0 {
            let eig = eigen(&shape);
            let lmax = eig.eigenvalues.max();
            let lmin = eig.eigenvalues.min();
            if lmin < -CLAMP_TOL * lmax.max(0.0) {
                return Err(Error::NotPsd {
                    min: lmin,
                    scale: lmax,
                });
            }
            if lmin < 0.0 {
                let clamped = eig.eigenvalues.map(|l| l.max(0.0));
                shape = symmetrize(
                    &(&eig.eigenvectors
                        * DMatrix::from_diagonal(&clamped)
                        * eig.eigenvectors.transpose()),
                );
            }
        }
        Ok(Self { center, shape })
    }

    pub fn centered(shape: DMatrix<f64>) -> Result<Self> {
        let n = shape.nrows();
        Self::new(DVector::zeros(n), shape)
    }

    /// `E(0, P⁻¹)`, the sublevel set `xᵀPx ≤ 1` of a positive definite `P`.
    pub fn from_precision(p: &DMatrix<f64>) -> Result<Self> {
        linalg::require_square("precision matrix", p)?;
        let inv = symmetrize(p)
            .cholesky()
            .ok_or_else(|| Error::Singular("precision matrix is not positive definite".into()))?
            .inverse();
        Self::centered(symmetrize(&inv))
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    pub fn center(&self) -> &DVector<f64> {
        &self.center
    }

    pub fn shape(&self) -> &DMatrix<f64> {
        &self.shape
    }

    /// `(x−μ)ᵀΣ⁺(x−μ)`, or infinity when `x−μ` leaves the range of `Σ`.
    pub fn quadratic_form(&self, x: &DVector<f64>) -> Result<f64> {
        check_dim("ellipsoid membership", self.dim(), x.len())?;
        let delta = x - &self.center;
        if self.dim() == 0 {
            return Ok(0.0);
        }
        let eig = eigen(&self.shape);
        let lmax = eig.eigenvalues.max().max(0.0);
        let range_tol = MEMBERSHIP_TOL * (1.0 + delta.norm());
        let mut q = 0.0;
        for (i, &l) in eig.eigenvalues.iter().enumerate() {
            let c = eig.eigenvectors.column(i).dot(&delta);
            if l > CLAMP_TOL * lmax && l > 0.0 {
                q += c * c / l;
            } else if c.abs() > range_tol {
                return Ok(f64::INFINITY);
            }
        }
        Ok(q)
    }

    pub fn contains(&self, x: &DVector<f64>) -> Result<bool> {
        Ok(self.quadratic_form(x)? <= 1.0 + MEMBERSHIP_TOL)
    }

    /// Support function `max_{x∈E} dᵀx = dᵀμ + √(dᵀΣd)`.
    pub fn support(&self, d: &DVector<f64>) -> Result<f64> {
        check_dim("support direction", self.dim(), d.len())?;
        Ok(d.dot(&self.center) + d.dot(&(&self.shape * d)).max(0.0).sqrt())
    }

    /// `E(Mμ + b, MΣMᵀ)`.
    pub fn affine_image(&self, m: &DMatrix<f64>, b: &DVector<f64>) -> Result<Self> {
        check_dim("affine map columns", self.dim(), m.ncols())?;
        check_dim("affine offset", m.nrows(), b.len())?;
        let shape = symmetrize(&(m * &self.shape * m.transpose()));
        Self::new(m * &self.center + b, shape)
    }

    /// `E(0, 2(Σ₁+Σ₂)) ⊇ E(0,Σ₁) ⊕ E(0,Σ₂)`.
    pub fn minkowski_outer_bound(&self, other: &Self) -> Result<Self> {
        check_dim("minkowski operands", self.dim(), other.dim())?;
        if self
            .center
            .iter()
            .chain(other.center.iter())
            .any(|v| *v != 0.0)
        {
            return Err(Error::InvalidArgument(
                "minkowski outer bound needs zero-centered operands".into(),
            ));
        }
        Self::centered((&self.shape + &other.shape) * 2.0)
    }

    /// Uniform sample from the ellipsoid.
    pub fn sample_uniform<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let root = psd_sqrt(&self.shape).expect("shape validated at construction");
        &self.center + root * random_in_unit_ball(self.dim(), rng)
    }

    /// Sample on the boundary (uniform direction in the whitened coordinates).
    pub fn sample_boundary<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let root = psd_sqrt(&self.shape).expect("shape validated at construction");
        &self.center + root * random_unit_vector(self.dim(), rng)
    }
}

/// Symmetric square root through the eigendecomposition.
pub fn psd_sqrt(s: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    map_psd_eigenvalues(s, |l| l.sqrt())
}

/// Inverse of the symmetric square root; fails on (numerically) singular input.
pub fn psd_inv_sqrt(s: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    linalg::require_square("inverse square root", s)?;
    linalg::require_psd(s, SQRT_PSD_TOL)?;
    let eig = eigen(s);
    if eig.eigenvalues.is_empty() {
        return Ok(s.clone());
    }
    let lmax = eig.eigenvalues.max();
    if eig.eigenvalues.min() <= 1e-14 * lmax.max(f64::MIN_POSITIVE) {
        return Err(Error::Singular(format!(
            "eigenvalues span [{:e}, {:e}]",
            eig.eigenvalues.min(),
            lmax
        )));
    }
    let d = eig.eigenvalues.map(|l| 1.0 / l.sqrt());
    Ok(symmetrize(
        &(&eig.eigenvectors * DMatrix::from_diagonal(&d) * eig.eigenvectors.transpose()),
    ))
}

fn map_psd_eigenvalues(s: &DMatrix<f64>, f: impl Fn(f64) -> f64) -> Result<DMatrix<f64>> {
    linalg::require_square("square root", s)?;
    linalg::require_psd(s, SQRT_PSD_TOL)?;
    let eig = eigen(s);
    let d = eig.eigenvalues.map(|l| f(l.max(0.0)));
    Ok(symmetrize(
        &(&eig.eigenvectors * DMatrix::from_diagonal(&d) * eig.eigenvectors.transpose()),
    ))
}

/// Checks `√(dᵀ(Σ₁+Σ₂)d) ≤ √(dᵀΣ₁d) + √(dᵀΣ₂d)` along `trials` random directions,
/// i.e. `E(0, Σ₁+Σ₂) ⊆ E(0,Σ₁) ⊕ E(0,Σ₂)` through support functions.
pub fn inner_sum_check<R: Rng + ?Sized>(
    s1: &DMatrix<f64>,
    s2: &DMatrix<f64>,
    trials: usize,
    rng: &mut R,
) -> Result<bool> {
    linalg::require_square("inner sum operand", s1)?;
    check_dim("inner sum operands", s1.nrows(), s2.nrows())?;
    check_dim("inner sum operands", s2.nrows(), s2.ncols())?;
    linalg::require_psd(s1, SQRT_PSD_TOL)?;
    linalg::require_psd(s2, SQRT_PSD_TOL)?;
    let sum = s1 + s2;
    let scale = 1.0 + linalg::sym_norm(&sum);
    for _ in 0..trials {
        let d = random_unit_vector(s1.nrows(), rng);
        let h = |s: &DMatrix<f64>| d.dot(&(s * &d)).max(0.0).sqrt();
        if h(&sum) > h(s1) + h(s2) + 1e-12 * scale {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Multidimensional Chebyshev region `E(μ, n/(1−p)·Σ)`, containing any random
/// vector with mean `μ` and covariance `Σ` with probability at least `p`.
pub fn chebyshev_region(mean: &DVector<f64>, cov: &DMatrix<f64>, p: f64) -> Result<Ellipsoid> {
    check_probability(p)?;
    linalg::require_square("covariance", cov)?;
    check_dim("covariance", mean.len(), cov.nrows())?;
    let n = mean.len() as f64;
    Ellipsoid::new(mean.clone(), cov * (n / (1.0 - p)))
}
