//! Two-stage fitting: ordinary least squares for `(A, B)`, then per-output
//! marginal-likelihood maximization for the kernel hyperparameters.

use std::sync::Mutex;

use argmin::core::{CostFunction, Executor, Gradient, State};
use argmin::solver::linesearch::MoreThuenteLineSearch;
use argmin::solver::quasinewton::LBFGS;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{factor_with_jitter, Dataset, SquaredExpKernel};
use crate::error::{Error, Result};

const LOG_SIGNAL_BOUNDS: (f64, f64) = (-20.0, 5.0);
const LOG_LENGTH_BOUNDS: (f64, f64) = (-5.0, 12.0);
const LOG_NOISE_BOUNDS: (f64, f64) = (-20.0, 5.0);
const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Clone, PartialEq)]
pub struct MeanFit {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    /// `N × n` training residuals `x̄⁺ − Ax̄ − Bū`.
    pub residuals: DMatrix<f64>,
    /// Standard errors of `[A B]` entries (NaN without spare degrees of freedom).
    pub standard_errors: DMatrix<f64>,
}

/// Least-squares `(A, B)` minimizing `Σ_j ‖x̄_j⁺ − A x̄_j − B ū_j‖²`.
pub fn fit_mean(data: &Dataset) -> Result<MeanFit> {
    let z = data.regressors();
    let (count, d) = z.shape();
    let n = data.state_dim();
    let labels: Vec<String> = (1..=n)
        .map(|i| format!("x{i}"))
        .chain((1..=data.input_dim()).map(|i| format!("u{i}")))
        .collect();
    let svd = z.clone().svd(true, true);
    let v_t = svd.v_t.as_ref().expect("requested");
    let smax = svd.singular_values.max();
    let cutoff = count.max(d) as f64 * f64::EPSILON * smax.max(f64::MIN_POSITIVE);
    let mut deficient = Vec::new();
    for (k, s) in svd.singular_values.iter().enumerate() {
        if *s <= cutoff {
            deficient.push(describe_direction(&v_t.row(k).transpose(), &labels));
        }
    }
    if count < d {
        // The thin SVD omits the null directions entirely.
        return Err(Error::RankDeficient(format!(
            "only {count} transitions for {d} regressors ({})",
            labels.join(", ")
        )));
    }
    if !deficient.is_empty() && smax > 0.0 {
        return Err(Error::RankDeficient(deficient.join("; ")));
    }
    let y = data.successors();
    let theta = if smax == 0.0 {
        DMatrix::zeros(d, n)
    } else {
        svd.solve(y, cutoff)
            .map_err(|e| Error::RankDeficient(e.to_string()))?
    };
    let ab = theta.transpose();
    let a = ab.columns(0, n).into_owned();
    let b = ab.columns(n, data.input_dim()).into_owned();
    let residuals = y - &z * &theta;

    let mut standard_errors = DMatrix::from_element(n, d, f64::NAN);
    if count > d && smax > 0.0 {
        let inv_sq = svd.singular_values.map(|s| 1.0 / (s * s));
        let cov_diag = DVector::from_fn(d, |c, _| {
            (0..d)
                .map(|k| v_t[(k, c)] * v_t[(k, c)] * inv_sq[k])
                .sum::<f64>()
        });
        for i in 0..n {
            let sigma2 = residuals.column(i).norm_squared() / (count - d) as f64;
            for c in 0..d {
                standard_errors[(i, c)] = (sigma2 * cov_diag[c]).sqrt();
            }
        }
    }
    Ok(MeanFit {
        a,
        b,
        residuals,
        standard_errors,
    })
}

fn describe_direction(v: &DVector<f64>, labels: &[String]) -> String {
    let terms: Vec<String> = v
        .iter()
        .zip(labels)
        .filter(|(c, _)| c.abs() > 1e-6)
        .map(|(c, l)| format!("{c:+.3}·{l}"))
        .collect();
    terms.join(" ")
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitOptions {
    pub restarts: usize,
    pub seed: u64,
    /// One lengthscale per regressor instead of a shared one.
    pub ard: bool,
    pub max_iterations: u64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            restarts: 5,
            seed: 0,
            ard: false,
            max_iterations: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct OutputDiagnostics {
    pub log_marginal_likelihood: f64,
    pub failed_restarts: Vec<String>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KernelFit {
    pub kernels: Vec<SquaredExpKernel>,
    /// Diagonal of `Q`.
    pub noise_variances: DVector<f64>,
    pub diagnostics: Vec<OutputDiagnostics>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitReport {
    pub mean: MeanFit,
    pub kernels: KernelFit,
}

/// Maximizes each output's log marginal likelihood over
/// `(log s, log ℓ, log σ²)` from several seeded starting points.
pub fn fit_kernels(
    data: &Dataset,
    residuals: &DMatrix<f64>,
    options: &FitOptions,
) -> Result<KernelFit> {
    if options.restarts == 0 {
        return Err(Error::InvalidArgument(
            "at least one restart is required".into(),
        ));
    }
    let z = data.regressors();
    if residuals.shape() != (data.len(), data.state_dim()) {
        return Err(Error::InvalidArgument(format!(
            "residuals are {}x{}, expected {}x{}",
            residuals.nrows(),
            residuals.ncols(),
            data.len(),
            data.state_dim()
        )));
    }
    let dists = squared_distances(&z, options.ard);
    let d = z.ncols();
    let mut kernels = Vec::new();
    let mut noise = DVector::zeros(data.state_dim());
    let mut diagnostics = Vec::new();
    for i in 0..data.state_dim() {
        let r = residuals.column(i).into_owned();
        let objective = Likelihood::new(&dists, &r);
        let mut diag = OutputDiagnostics::default();
        let scale = r.amax();
        if scale <= 1e-12 {
            let msg = format!(
                "output {i}: residuals are identically zero; hyperparameters go to the noise floor"
            );
            log::warn!("{msg}");
            diag.warnings.push(msg);
        }
        let init = objective.heuristic_start(&z);
        let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
        rng.set_stream(i as u64);
        let mut best: Option<(f64, Vec<f64>)> = None;
        for restart in 0..options.restarts {
            let start: Vec<f64> = if restart == 0 {
                init.clone()
            } else {
                init.iter()
                    .enumerate()
                    .map(|(j, t)| {
                        let (lo, hi) = objective.bounds[j];
                        (t + rng.random_range(-3.0..3.0)).clamp(lo + 0.5, hi - 0.5)
                    })
                    .collect()
            };
            match objective.optimize(&start, options.max_iterations) {
                Ok((lml, theta)) => {
                    log::debug!("output {i} restart {restart}: log marginal likelihood {lml:.6}");
                    if best.as_ref().is_none_or(|(b, _)| lml > *b) {
                        best = Some((lml, theta));
                    }
                }
                Err(reason) => {
                    log::debug!("output {i} restart {restart} rejected: {reason}");
                    diag.failed_restarts
                        .push(format!("restart {restart}: {reason}"));
                }
            }
        }
        let (lml, theta) = best.ok_or_else(|| Error::FitFailed {
            output: i,
            reason: diag.failed_restarts.join("; "),
        })?;
        diag.log_marginal_likelihood = lml;
        let lengthscales: Vec<f64> = if options.ard {
            theta[1..1 + d].iter().map(|t| t.exp()).collect()
        } else {
            vec![theta[1].exp(); d]
        };
        kernels.push(SquaredExpKernel::new(theta[0].exp(), lengthscales)?);
        noise[i] = theta[theta.len() - 1].exp();
        diagnostics.push(diag);
    }
    Ok(KernelFit {
        kernels,
        noise_variances: noise,
        diagnostics,
    })
}

/// Pairwise squared distances, either summed over all regressors or kept per regressor.
fn squared_distances(z: &DMatrix<f64>, per_dim: bool) -> Vec<DMatrix<f64>> {
    let (count, d) = z.shape();
    let one = |cols: std::ops::Range<usize>| {
        let mut m = DMatrix::zeros(count, count);
        for a in 0..count {
            for b in 0..a {
                let v: f64 = cols.clone().map(|c| (z[(a, c)] - z[(b, c)]).powi(2)).sum();
                m[(a, b)] = v;
                m[(b, a)] = v;
            }
        }
        m
    };
    if per_dim {
        (0..d).map(|c| one(c..c + 1)).collect()
    } else {
        vec![one(0..d)]
    }
}

struct Likelihood<'a> {
    dists: &'a [DMatrix<f64>],
    r: &'a DVector<f64>,
    bounds: Vec<(f64, f64)>,
}

impl<'a> Likelihood<'a> {
    fn new(dists: &'a [DMatrix<f64>], r: &'a DVector<f64>) -> Self {
        let mut bounds = vec![LOG_SIGNAL_BOUNDS];
        bounds.extend(std::iter::repeat_n(LOG_LENGTH_BOUNDS, dists.len()));
        bounds.push(LOG_NOISE_BOUNDS);
        Self { dists, r, bounds }
    }

    fn heuristic_start(&self, z: &DMatrix<f64>) -> Vec<f64> {
        let count = self.r.len() as f64;
        let var = (self.r.norm_squared() / count).max(1e-8);
        let mut theta = vec![var.ln()];
        let spread = |c: usize| {
            let col = z.column(c);
            let mean = col.mean();
            (col.map(|v| (v - mean).powi(2)).sum() / count)
                .sqrt()
                .max(1e-3)
        };
        if self.dists.len() == 1 {
            let avg = (0..z.ncols()).map(spread).sum::<f64>() / z.ncols().max(1) as f64;
            theta.push(avg.max(1e-3).ln());
        } else {
            theta.extend((0..z.ncols()).map(|c| spread(c).ln()));
        }
        theta.push((0.1 * var).ln());
        theta
            .iter()
            .zip(&self.bounds)
            .map(|(t, (lo, hi))| t.clamp(lo + 0.5, hi - 0.5))
            .collect()
    }

    fn to_theta(&self, w: &[f64]) -> Vec<f64> {
        w.iter()
            .zip(&self.bounds)
            .map(|(w, (lo, hi))| lo + (hi - lo) * sigmoid(*w))
            .collect()
    }

    fn to_free(&self, theta: &[f64]) -> Vec<f64> {
        theta
            .iter()
            .zip(&self.bounds)
            .map(|(t, (lo, hi))| {
                let f = ((t - lo) / (hi - lo)).clamp(1e-9, 1.0 - 1e-9);
                (f / (1.0 - f)).ln()
            })
            .collect()
    }

    /// Log marginal likelihood and its gradient with respect to the log parameters.
    fn evaluate(&self, theta: &[f64]) -> Option<(f64, Vec<f64>)> {
        let count = self.r.len();
        let s = theta[0].exp();
        let noise = theta[theta.len() - 1].exp();
        let inv_l2: Vec<f64> = theta[1..theta.len() - 1]
            .iter()
            .map(|t| (-2.0 * t).exp())
            .collect();
        let mut k = DMatrix::zeros(count, count);
        for a in 0..count {
            k[(a, a)] = s;
            for b in 0..a {
                let e: f64 = self
                    .dists
                    .iter()
                    .zip(&inv_l2)
                    .map(|(d, il)| d[(a, b)] * il)
                    .sum();
                let v = s * (-e).exp();
                k[(a, b)] = v;
                k[(b, a)] = v;
            }
        }
        let (chol, _) = factor_with_jitter(&k, noise)?;
        let alpha = chol.solve(self.r);
        let log_det_half: f64 = chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum();
        let lml = -0.5 * self.r.dot(&alpha) - log_det_half - count as f64 * HALF_LN_2PI;
        if !lml.is_finite() {
            return None;
        }
        // ∂lml/∂θ = ½ tr((ααᵀ − A⁻¹) ∂A/∂θ)
        let mut w = chol.inverse();
        w.ger(1.0, &alpha, &alpha, -1.0);
        let mut grad = Vec::with_capacity(theta.len());
        grad.push(0.5 * w.component_mul(&k).sum());
        for (d, il) in self.dists.iter().zip(&inv_l2) {
            let mut acc = 0.0;
            for a in 0..count {
                for b in 0..count {
                    acc += w[(a, b)] * k[(a, b)] * 2.0 * d[(a, b)] * il;
                }
            }
            grad.push(0.5 * acc);
        }
        grad.push(0.5 * noise * w.trace());
        if grad.iter().any(|g| !g.is_finite()) {
            return None;
        }
        Some((lml, grad))
    }

    fn optimize(
        &self,
        start: &[f64],
        max_iters: u64,
    ) -> std::result::Result<(f64, Vec<f64>), String> {
        let problem = FreeProblem {
            lik: self,
            cache: Mutex::new(None),
        };
        let init = self.to_free(start);
        let solver = LBFGS::new(MoreThuenteLineSearch::new(), 7)
            .with_tolerance_cost(1e-10)
            .map_err(|e| e.to_string())?;
        let res = Executor::new(problem, solver)
            .configure(|s| s.param(init).max_iters(max_iters))
            .run()
            .map_err(|e| e.to_string())?;
        let best = res
            .state()
            .get_best_param()
            .cloned()
            .ok_or_else(|| "optimizer returned no parameters".to_string())?;
        let theta = self.to_theta(&best);
        let (lml, _) = self
            .evaluate(&theta)
            .ok_or_else(|| "non-finite likelihood at the optimum".to_string())?;
        Ok((lml, theta))
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

type Cached = Option<(Vec<f64>, f64, Vec<f64>)>;

/// Negative log marginal likelihood over unconstrained parameters.
struct FreeProblem<'a, 'b> {
    lik: &'b Likelihood<'a>,
    cache: Mutex<Cached>,
}

impl FreeProblem<'_, '_> {
    fn eval(&self, w: &[f64]) -> std::result::Result<(f64, Vec<f64>), argmin::core::Error> {
        let mut cache = self.cache.lock().expect("cache lock");
        if let Some((p, c, g)) = cache.as_ref() {
            if p.as_slice() == w {
                return Ok((*c, g.clone()));
            }
        }
        let theta = self.lik.to_theta(w);
        let (lml, grad) = self
            .lik
            .evaluate(&theta)
            .ok_or_else(|| argmin::core::Error::msg("non-finite marginal likelihood"))?;
        let g: Vec<f64> = grad
            .iter()
            .zip(w)
            .zip(&self.lik.bounds)
            .map(|((g, w), (lo, hi))| {
                let s = sigmoid(*w);
                -g * (hi - lo) * s * (1.0 - s)
            })
            .collect();
        *cache = Some((w.to_vec(), -lml, g.clone()));
        Ok((-lml, g))
    }
}

impl CostFunction for FreeProblem<'_, '_> {
    type Param = Vec<f64>;
    type Output = f64;

    fn cost(&self, p: &Self::Param) -> std::result::Result<f64, argmin::core::Error> {
        Ok(self.eval(p)?.0)
    }
}

impl Gradient for FreeProblem<'_, '_> {
    type Param = Vec<f64>;
    type Gradient = Vec<f64>;

    fn gradient(&self, p: &Self::Param) -> std::result::Result<Vec<f64>, argmin::core::Error> {
        Ok(self.eval(p)?.1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    fn random_data(seed: u64, count: usize, n: usize, m: usize) -> (DMatrix<f64>, DMatrix<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(count, n, |_, _| rng.random_range(-1.0..1.0));
        let u = DMatrix::from_fn(count, m, |_, _| rng.random_range(-1.0..1.0));
        (x, u)
    }

    #[test]
    fn noiseless_linear_data_is_recovered() {
        let (n, m) = (3, 2);
        let (x, u) = random_data(1, 2 * (n + m), n, m);
        let a0 = DMatrix::from_row_slice(3, 3, &[0.9, 0.1, 0.0, -0.2, 1.0, 0.3, 0.0, 0.05, 0.7]);
        let b0 = DMatrix::from_row_slice(3, 2, &[0.1, 0.0, 0.5, -0.3, 0.0, 1.0]);
        let xp = &x * a0.transpose() + &u * b0.transpose();
        let fit = fit_mean(&Dataset::new(x, u, xp).unwrap()).unwrap();
        assert!((fit.a - a0).amax() < 1e-8);
        assert!((fit.b - b0).amax() < 1e-8);
    }

    #[test]
    fn zero_outputs_give_zero_mean() {
        let (x, u) = random_data(2, 10, 2, 1);
        let fit = fit_mean(&Dataset::new(x, u, DMatrix::zeros(10, 2)).unwrap()).unwrap();
        assert_eq!(fit.a.amax(), 0.0);
        assert_eq!(fit.b.amax(), 0.0);
    }

    #[test]
    fn rank_deficiency_names_directions() {
        let (x, _) = random_data(3, 8, 2, 1);
        // u duplicates x1, so x1 − u1 is unidentifiable.
        let u = x.columns(0, 1).into_owned();
        let err = fit_mean(&Dataset::new(x.clone(), u, x).unwrap()).unwrap_err();
        match err {
            Error::RankDeficient(msg) => assert!(msg.contains("x1") && msg.contains("u1"), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
        let (x, u) = random_data(4, 2, 2, 1);
        assert!(matches!(
            fit_mean(&Dataset::new(x.clone(), u, x).unwrap()),
            Err(Error::RankDeficient(_))
        ));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (x, u) = random_data(5, 15, 2, 1);
        let data = Dataset::new(x.clone(), u, x).unwrap();
        let z = data.regressors();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let r = DVector::from_fn(15, |_, _| rng.random_range(-1.0..1.0));
        for ard in [false, true] {
            let dists = squared_distances(&z, ard);
            let lik = Likelihood::new(&dists, &r);
            let theta: Vec<f64> = lik
                .bounds
                .iter()
                .map(|_| rng.random_range(-1.5..0.5))
                .collect();
            let (_, g) = lik.evaluate(&theta).unwrap();
            for j in 0..theta.len() {
                let h = 1e-6;
                let mut tp = theta.clone();
                tp[j] += h;
                let mut tm = theta.clone();
                tm[j] -= h;
                let fd = (lik.evaluate(&tp).unwrap().0 - lik.evaluate(&tm).unwrap().0) / (2.0 * h);
                assert!(
                    (fd - g[j]).abs() < 1e-5 * (1.0 + fd.abs()),
                    "param {j}: {fd} vs {}",
                    g[j]
                );
            }
        }
    }

    #[test]
    fn white_noise_residuals_recover_noise_level() {
        let count = 300;
        let (x, u) = random_data(6, count, 1, 1);
        let data = Dataset::new(x.clone(), u, x).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let normal = Normal::new(0.0, 0.1).unwrap();
        let r = DMatrix::from_fn(count, 1, |_, _| normal.sample(&mut rng));
        let fit = fit_kernels(&data, &r, &FitOptions::default()).unwrap();
        let noise = fit.noise_variances[0];
        assert!((0.005..=0.02).contains(&noise), "noise {noise}");
        assert!(fit.kernels[0].signal_variance() < 10.0 * noise);
    }

    #[test]
    fn zero_residuals_warn_and_hit_floor() {
        let (x, u) = random_data(8, 20, 1, 1);
        let data = Dataset::new(x.clone(), u, x).unwrap();
        let fit = fit_kernels(&data, &DMatrix::zeros(20, 1), &FitOptions::default()).unwrap();
        assert!(!fit.diagnostics[0].warnings.is_empty());
        assert!(fit.noise_variances[0] < 1e-6);
    }

    #[test]
    fn fit_is_deterministic_given_seed() {
        let (x, u) = random_data(10, 40, 1, 1);
        let data = Dataset::new(x.clone(), u, x.map(|v| (2.0 * v).sin())).unwrap();
        let r = data.successors().clone();
        let opts = FitOptions {
            restarts: 3,
            seed: 42,
            ..Default::default()
        };
        let a = fit_kernels(&data, &r, &opts).unwrap();
        let b = fit_kernels(&data, &r, &opts).unwrap();
        assert_eq!(a, b);
    }
}
