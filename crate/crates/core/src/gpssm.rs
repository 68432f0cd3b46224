//! Gaussian-process state-space model `x⁺ = g(x, u) + w`: linear mean
//! `Ax + Bu`, one stationary squared-exponential GP per output on the
//! residuals, and Gaussian process noise `w ~ N(0, Q)` with diagonal `Q`.

mod fit;
mod io;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{check_dim, check_probability, Error, Result};
use crate::linalg::block_diag;

pub use fit::{
    fit_kernels, fit_mean, FitOptions, FitReport, KernelFit, MeanFit, OutputDiagnostics,
};
pub use io::{
    read_trajectory_csv, read_transitions_csv, write_transitions_csv, DatasetDocument,
    KernelDocument, ModelDocument,
};

/// Transition records `(x̄_j, ū_j) ↦ x̄_j⁺`, stored row-wise.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    x: DMatrix<f64>,
    u: DMatrix<f64>,
    x_next: DMatrix<f64>,
}

impl Dataset {
    pub fn new(x: DMatrix<f64>, u: DMatrix<f64>, x_next: DMatrix<f64>) -> Result<Self> {
        let n_rows = x.nrows();
        if n_rows == 0 {
            return Err(Error::InvalidData("no transitions".into()));
        }
        if x.ncols() == 0 {
            return Err(Error::InvalidData(
                "state dimension must be at least 1".into(),
            ));
        }
        if u.nrows() != n_rows || x_next.nrows() != n_rows {
            return Err(Error::InvalidData(format!(
                "record counts differ: {} states, {} inputs, {} successors",
                n_rows,
                u.nrows(),
                x_next.nrows()
            )));
        }
        check_dim("successor state dimension", x.ncols(), x_next.ncols())?;
        if let Some(j) = (0..n_rows).find(|&j| {
            x.row(j)
                .iter()
                .chain(u.row(j).iter())
                .chain(x_next.row(j).iter())
                .any(|v| !v.is_finite())
        }) {
            return Err(Error::InvalidData(format!(
                "record {j} has non-finite entries"
            )));
        }
        Ok(Self { x, u, x_next })
    }

    pub fn from_transitions(
        records: &[(DVector<f64>, DVector<f64>, DVector<f64>)],
    ) -> Result<Self> {
        let (n, m) = match records.first() {
            Some((x, u, _)) => (x.len(), u.len()),
            None => return Err(Error::InvalidData("no transitions".into())),
        };
        for (j, (x, u, xp)) in records.iter().enumerate() {
            if x.len() != n || u.len() != m || xp.len() != n {
                return Err(Error::InvalidData(format!(
                    "record {j} has inconsistent dimensions"
                )));
            }
        }
        let x = DMatrix::from_fn(records.len(), n, |j, i| records[j].0[i]);
        let u = DMatrix::from_fn(records.len(), m, |j, i| records[j].1[i]);
        let xp = DMatrix::from_fn(records.len(), n, |j, i| records[j].2[i]);
        Self::new(x, u, xp)
    }

    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn state_dim(&self) -> usize {
        self.x.ncols()
    }

    pub fn input_dim(&self) -> usize {
        self.u.ncols()
    }

    pub fn states(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn inputs(&self) -> &DMatrix<f64> {
        &self.u
    }

    pub fn successors(&self) -> &DMatrix<f64> {
        &self.x_next
    }

    /// Joint regressors `x̂_j = [x̄_j; ū_j]` as an `N × (n+m)` matrix.
    pub fn regressors(&self) -> DMatrix<f64> {
        let (n, m) = (self.state_dim(), self.input_dim());
        let mut z = DMatrix::zeros(self.len(), n + m);
        z.columns_mut(0, n).copy_from(&self.x);
        z.columns_mut(n, m).copy_from(&self.u);
        z
    }
}

/// `k(a, b) = s · exp(−(a−b)ᵀ diag(ℓ)⁻² (a−b))`.
#[derive(Debug, Clone, PartialEq)]
pub struct SquaredExpKernel {
    signal_variance: f64,
    lengthscales: Vec<f64>,
}

impl SquaredExpKernel {
    pub fn new(signal_variance: f64, lengthscales: Vec<f64>) -> Result<Self> {
        if !(signal_variance > 0.0) || !signal_variance.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "signal variance must be positive, got {signal_variance}"
            )));
        }
        if lengthscales.is_empty() || lengthscales.iter().any(|l| !(*l > 0.0) || !l.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "lengthscales must be positive, got {lengthscales:?}"
            )));
        }
        Ok(Self {
            signal_variance,
            lengthscales,
        })
    }

    pub fn isotropic(signal_variance: f64, lengthscale: f64, dim: usize) -> Result<Self> {
        Self::new(signal_variance, vec![lengthscale; dim])
    }

    pub fn signal_variance(&self) -> f64 {
        self.signal_variance
    }

    pub fn lengthscales(&self) -> &[f64] {
        &self.lengthscales
    }

    pub fn input_dim(&self) -> usize {
        self.lengthscales.len()
    }

    pub fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        let r2: f64 = a
            .iter()
            .zip(b)
            .zip(&self.lengthscales)
            .map(|((x, y), l)| {
                let d = (x - y) / l;
                d * d
            })
            .sum();
        self.signal_variance * (-r2).exp()
    }

    /// Gram matrix over the rows of `z`.
    pub fn gram(&self, z: &DMatrix<f64>) -> DMatrix<f64> {
        let rows: Vec<Vec<f64>> = z.row_iter().map(|r| r.iter().copied().collect()).collect();
        let n = rows.len();
        let mut k = DMatrix::zeros(n, n);
        for i in 0..n {
            k[(i, i)] = self.signal_variance;
            for j in 0..i {
                let v = self.eval(&rows[i], &rows[j]);
                k[(i, j)] = v;
                k[(j, i)] = v;
            }
        }
        k
    }
}

/// Cholesky factorization of `K + σ²I`, adding `1e-10·tr(K)/N` (growing ×10,
/// up to three retries) to the diagonal if needed.
pub(crate) fn factor_with_jitter(
    k: &DMatrix<f64>,
    noise: f64,
) -> Option<(Cholesky<f64, Dyn>, f64)> {
    let n = k.nrows();
    let mut a = k.clone();
    for i in 0..n {
        a[(i, i)] += noise;
    }
    if let Some(ch) = a.clone().cholesky() {
        return Some((ch, 0.0));
    }
    let mut jitter = 1e-10 * k.trace() / n.max(1) as f64;
    if !(jitter > 0.0) {
        jitter = 1e-10;
    }
    for _ in 0..3 {
        let mut aj = a.clone();
        for i in 0..n {
            aj[(i, i)] += jitter;
        }
        if let Some(ch) = aj.cholesky() {
            return Some((ch, jitter));
        }
        jitter *= 10.0;
    }
    None
}

#[derive(Debug, Clone)]
struct OutputFactor {
    chol: Cholesky<f64, Dyn>,
    /// `(K + σ²I)⁻¹ r`
    alpha: DVector<f64>,
    jitter: f64,
}

/// Posterior moments of `g(x, u)` given the data (noise `w` excluded).
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorMoments {
    pub mean: DVector<f64>,
    /// Diagonal of the posterior covariance.
    pub variance: DVector<f64>,
}

impl PosteriorMoments {
    pub fn covariance(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&self.variance)
    }
}

/// How the posterior-mean bound `φ` is obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PhiRule {
    /// `Σᵢ (sᵢ·1ᵀ(Kᵢ+σᵢ²I)⁻¹rᵢ)²` only. Not a valid bound in general: the sum
    /// of weights can cancel while individual corrections do not.
    Constant,
    /// The larger of the above and `Σᵢ sᵢ·rᵢᵀ(Kᵢ+σᵢ²I)⁻¹rᵢ`, which bounds
    /// `‖μ̂‖²` everywhere by Cauchy–Schwarz in the kernel's RKHS.
    #[default]
    Guaranteed,
}

/// Constants feeding the invariance conditions.
#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyBounds {
    /// Bound on `‖μ̂(x̂)‖²`.
    pub phi: f64,
    /// Diagonal of `Σ̂ = Diag(s₁,…,s_n)`.
    pub sigma_hat: DVector<f64>,
    /// Diagonal of `Q`.
    pub q: DVector<f64>,
}

impl UncertaintyBounds {
    pub fn new(phi: f64, sigma_hat: DVector<f64>, q: DVector<f64>) -> Result<Self> {
        check_dim("noise diagonal", sigma_hat.len(), q.len())?;
        if !(phi >= 0.0) || !phi.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "phi must be finite and nonnegative, got {phi}"
            )));
        }
        if sigma_hat
            .iter()
            .chain(q.iter())
            .any(|v| !(*v >= 0.0) || !v.is_finite())
        {
            return Err(Error::InvalidArgument(
                "variances must be finite and nonnegative".into(),
            ));
        }
        Ok(Self { phi, sigma_hat, q })
    }

    /// No model error and no noise.
    pub fn zero(n: usize) -> Self {
        Self {
            phi: 0.0,
            sigma_hat: DVector::zeros(n),
            q: DVector::zeros(n),
        }
    }

    pub fn state_dim(&self) -> usize {
        self.q.len()
    }

    pub fn sigma_hat_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&self.sigma_hat)
    }

    pub fn q_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&self.q)
    }

    /// `Q̄ = BlkDiag(Σ̂, Q)`.
    pub fn q_bar(&self) -> DMatrix<f64> {
        block_diag(&self.sigma_hat_matrix(), &self.q_matrix())
    }

    /// `Θ(p) = 2φI + (2n/(1−p))(Σ̂ + Q)`, bounding the combined one-step
    /// disturbance with probability `p`.
    pub fn theta(&self, p: f64) -> Result<DMatrix<f64>> {
        check_probability(p)?;
        let n = self.state_dim();
        let diag = DVector::from_fn(n, |i, _| {
            2.0 * self.phi + 2.0 * n as f64 / (1.0 - p) * (self.sigma_hat[i] + self.q[i])
        });
        Ok(DMatrix::from_diagonal(&diag))
    }
}

/// Fitted model with cached factorizations.
#[derive(Debug, Clone)]
pub struct GpssmModel {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    q: DVector<f64>,
    kernels: Vec<SquaredExpKernel>,
    data: Dataset,
    regressors: DMatrix<f64>,
    residuals: DMatrix<f64>,
    factors: Vec<OutputFactor>,
}

impl GpssmModel {
    pub fn new(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        q: DVector<f64>,
        kernels: Vec<SquaredExpKernel>,
        data: Dataset,
    ) -> Result<Self> {
        let n = data.state_dim();
        let m = data.input_dim();
        check_dim("A rows", n, a.nrows())?;
        check_dim("A columns", n, a.ncols())?;
        check_dim("B rows", n, b.nrows())?;
        check_dim("B columns", m, b.ncols())?;
        check_dim("noise diagonal", n, q.len())?;
        check_dim("kernel count", n, kernels.len())?;
        for k in &kernels {
            check_dim("kernel lengthscales", n + m, k.input_dim())?;
        }
        if q.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::InvalidArgument(
                "noise variances must be nonnegative".into(),
            ));
        }
        let regressors = data.regressors();
        let mean = &data.x * a.transpose() + &data.u * b.transpose();
        let residuals = &data.x_next - mean;
        let mut factors = Vec::with_capacity(n);
        for (i, k) in kernels.iter().enumerate() {
            let gram = k.gram(&regressors);
            let (chol, jitter) = factor_with_jitter(&gram, q[i]).ok_or_else(|| {
                Error::Singular(format!(
                    "K + σ²I for output {i} is not positive definite after jitter"
                ))
            })?;
            if jitter > 0.0 {
                log::warn!("output {i}: added jitter {jitter:e} to the kernel matrix");
            }
            let alpha = chol.solve(&residuals.column(i).into_owned());
            factors.push(OutputFactor {
                chol,
                alpha,
                jitter,
            });
        }
        Ok(Self {
            a,
            b,
            q,
            kernels,
            data,
            regressors,
            residuals,
            factors,
        })
    }

    /// Two-stage fit: least-squares mean, then per-output marginal likelihood.
    pub fn fit(data: Dataset, options: &FitOptions) -> Result<(Self, FitReport)> {
        let mean = fit_mean(&data)?;
        let kernels = fit_kernels(&data, &mean.residuals, options)?;
        let model = Self::new(
            mean.a.clone(),
            mean.b.clone(),
            kernels.noise_variances.clone(),
            kernels.kernels.clone(),
            data,
        )?;
        Ok((model, FitReport { mean, kernels }))
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.b.ncols()
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    /// Diagonal of `Q`.
    pub fn q_diag(&self) -> &DVector<f64> {
        &self.q
    }

    pub fn kernels(&self) -> &[SquaredExpKernel] {
        &self.kernels
    }

    pub fn data(&self) -> &Dataset {
        &self.data
    }

    /// `y_i − ȳ_i`: training outputs minus the linear mean.
    pub fn residuals(&self) -> &DMatrix<f64> {
        &self.residuals
    }

    /// Jitter that had to be added per output (zero when none).
    pub fn jitter(&self) -> Vec<f64> {
        self.factors.iter().map(|f| f.jitter).collect()
    }

    pub fn linear_mean(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("state", self.state_dim(), x.len())?;
        check_dim("input", self.input_dim(), u.len())?;
        Ok(&self.a * x + &self.b * u)
    }

    fn query(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<Vec<f64>> {
        check_dim("state", self.state_dim(), x.len())?;
        check_dim("input", self.input_dim(), u.len())?;
        Ok(x.iter().chain(u.iter()).copied().collect())
    }

    fn cross_covariance(&self, i: usize, q: &[f64]) -> DVector<f64> {
        let k = &self.kernels[i];
        let mut row = vec![0.0; q.len()];
        DVector::from_fn(self.regressors.nrows(), |j, _| {
            for (c, r) in row.iter_mut().enumerate() {
                *r = self.regressors[(j, c)];
            }
            k.eval(q, &row)
        })
    }

    /// `μ̂(x̂) = μ(x̂) − (Ax + Bu)`, the GP correction to the linear mean.
    pub fn mean_correction(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        let q = self.query(x, u)?;
        Ok(DVector::from_fn(self.state_dim(), |i, _| {
            self.cross_covariance(i, &q).dot(&self.factors[i].alpha)
        }))
    }

    pub fn posterior(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<PosteriorMoments> {
        let q = self.query(x, u)?;
        let base = &self.a * x + &self.b * u;
        let n = self.state_dim();
        let mut mean = DVector::zeros(n);
        let mut variance = DVector::zeros(n);
        for i in 0..n {
            let kbar = self.cross_covariance(i, &q);
            let f = &self.factors[i];
            mean[i] = base[i] + kbar.dot(&f.alpha);
            let s = self.kernels[i].signal_variance;
            let v = f
                .chol
                .l_dirty()
                .solve_lower_triangular(&kbar)
                .map(|w| w.norm_squared());
            let reduction = v.unwrap_or(0.0);
            variance[i] = (s - reduction).clamp(0.0, s);
        }
        Ok(PosteriorMoments { mean, variance })
    }

    /// One draw of `x⁺ ~ N(μ(x̂), Σ(x̂) + Q)`.
    pub fn sample_step<R: Rng + ?Sized>(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
        rng: &mut R,
    ) -> Result<DVector<f64>> {
        let post = self.posterior(x, u)?;
        Ok(DVector::from_fn(self.state_dim(), |i, _| {
            let sd = (post.variance[i] + self.q[i]).sqrt();
            let z: f64 = rng.sample(StandardNormal);
            post.mean[i] + sd * z
        }))
    }

    /// `Σᵢ (sᵢ·1ᵀ(Kᵢ+σᵢ²I)⁻¹rᵢ)²`: the posterior-mean constant obtained by
    /// replacing the cross-covariance vector with its stationary peak `sᵢ·1`.
    pub fn phi_constant(&self) -> f64 {
        self.factors
            .iter()
            .zip(&self.kernels)
            .map(|(f, k)| {
                let v = k.signal_variance * f.alpha.sum();
                v * v
            })
            .sum()
    }

    /// `Σᵢ sᵢ·rᵢᵀ(Kᵢ+σᵢ²I)⁻¹rᵢ`, a guaranteed bound on `‖μ̂(x̂)‖²` for every query.
    pub fn phi_cauchy_schwarz(&self) -> f64 {
        self.factors
            .iter()
            .zip(&self.kernels)
            .enumerate()
            .map(|(i, (f, k))| k.signal_variance * self.residuals.column(i).dot(&f.alpha).max(0.0))
            .sum()
    }

    pub fn phi(&self, rule: PhiRule) -> f64 {
        match rule {
            PhiRule::Constant => self.phi_constant(),
            PhiRule::Guaranteed => self.phi_constant().max(self.phi_cauchy_schwarz()),
        }
    }

    pub fn uncertainty_bounds(&self, rule: PhiRule) -> UncertaintyBounds {
        UncertaintyBounds {
            phi: self.phi(rule),
            sigma_hat: DVector::from_iterator(
                self.state_dim(),
                self.kernels.iter().map(|k| k.signal_variance),
            ),
            q: self.q.clone(),
        }
    }

    /// Samples query points around the data and returns the largest
    /// `‖μ̂(x̂)‖² / φ` found together with its query.
    pub fn phi_bound_check<R: Rng + ?Sized>(
        &self,
        phi: f64,
        samples: usize,
        rng: &mut R,
    ) -> Result<PhiCheck> {
        let (n, m) = (self.state_dim(), self.input_dim());
        let d = n + m;
        let z = &self.regressors;
        let lo: Vec<f64> = (0..d).map(|c| z.column(c).min()).collect();
        let hi: Vec<f64> = (0..d).map(|c| z.column(c).max()).collect();
        let mut worst = PhiCheck {
            phi,
            max_norm_sq: 0.0,
            worst_query: DVector::zeros(d),
        };
        let total = samples + z.nrows();
        for s in 0..total {
            let q: DVector<f64> = if s < z.nrows() {
                z.row(s).transpose()
            } else {
                DVector::from_fn(d, |c, _| {
                    let w = (hi[c] - lo[c]).max(1e-9);
                    rng.random_range((lo[c] - 0.5 * w)..(hi[c] + 0.5 * w))
                })
            };
            let x = q.rows(0, n).into_owned();
            let u = q.rows(n, m).into_owned();
            let v = self.mean_correction(&x, &u)?.norm_squared();
            if v > worst.max_norm_sq {
                worst.max_norm_sq = v;
                worst.worst_query = q;
            }
        }
        Ok(worst)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhiCheck {
    pub phi: f64,
    pub max_norm_sq: f64,
    pub worst_query: DVector<f64>,
}

impl PhiCheck {
    pub fn holds(&self) -> bool {
        self.max_norm_sq <= self.phi * (1.0 + 1e-9) + 1e-300
    }
}
