//! Joint design of an ellipsoidal probabilistic invariant set `E(0, P⁻¹)` and
//! a state-feedback gain `L`, by bisection on the probability level over a
//! grid of contraction factors.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use pcis_sdp::{AffineExpr, Lmi, LmiProblem, Objective, SolveStatus, SolverSettings};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ellipsoid::psd_inv_sqrt;
use crate::error::{check_dim, check_probability, Error, Result};
use crate::gpssm::UncertaintyBounds;
use crate::invariance::{
    check_constraints, ConstraintMargin, PolytopeConstraints, CERTIFICATE_FLOOR,
};
use crate::json::{matrix_from_rows, matrix_rows};
use crate::linalg::{max_eigenvalue, min_eigenvalue, require_square, sym_norm, symmetrize};

/// Relative slack of the certificate re-check.
pub const RECHECK_TOL: f64 = 1e-7;
/// Relative log-det difference under which two cells count as tied.
pub const VOLUME_TIE_TOL: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthesisConfig {
    /// Bisection stops once `p_up − p_low ≤ delta`.
    pub delta: f64,
    pub eta_grid: Vec<f64>,
    pub p_init: f64,
    pub solver: SolverSettings,
    /// Worker threads for the contraction-factor sweep (`None`: rayon default).
    pub jobs: Option<usize>,
    /// Record per-solve wall-clock times in the feasibility log.
    pub record_timing: bool,
}

/// `count` evenly spaced points from 0.05 to 0.95.
pub fn uniform_eta_grid(count: usize) -> Vec<f64> {
    match count {
        0 => Vec::new(),
        1 => vec![0.5],
        _ => (0..count)
            .map(|k| 0.05 + 0.9 * k as f64 / (count - 1) as f64)
            .collect(),
    }
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        Self {
            delta: 1e-3,
            eta_grid: uniform_eta_grid(20),
            p_init: 0.5,
            solver: SolverSettings::default(),
            jobs: None,
            record_timing: false,
        }
    }
}

impl SynthesisConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "delta must lie in (0, 1), got {}",
                self.delta
            )));
        }
        if self.eta_grid.is_empty() {
            return Err(Error::InvalidArgument("contraction grid is empty".into()));
        }
        if let Some(e) = self.eta_grid.iter().find(|e| !(**e > 0.0 && **e < 1.0)) {
            return Err(Error::InvalidArgument(format!(
                "contraction factor {e} outside (0, 1)"
            )));
        }
        check_probability(self.p_init)?;
        if self.jobs == Some(0) {
            return Err(Error::InvalidArgument("jobs must be at least 1".into()));
        }
        Ok(())
    }

    pub fn echo(&self) -> ConfigEcho {
        ConfigEcho {
            delta: self.delta,
            eta_grid: self.eta_grid.clone(),
            p_init: self.p_init,
            solver_tolerance: self.solver.tolerance,
            solver_max_iterations: self.solver.max_iterations,
            variable_bound: self.solver.variable_bound,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigEcho {
    pub delta: f64,
    pub eta_grid: Vec<f64>,
    pub p_init: f64,
    pub solver_tolerance: f64,
    pub solver_max_iterations: usize,
    pub variable_bound: f64,
}

fn check_eta(eta: f64) -> Result<()> {
    if eta > 0.0 && eta < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "contraction factor {eta} outside (0, 1)"
        )))
    }
}

/// `H = Θ^{-1/2}`, or `None` when `Θ = 0` and no disturbance has to be absorbed.
fn margin_transform(theta: &DMatrix<f64>) -> Result<Option<DMatrix<f64>>> {
    if theta.amax() == 0.0 {
        return Ok(None);
    }
    let eig = theta.clone().symmetric_eigen();
    let (lmin, lmax) = (eig.eigenvalues.min(), eig.eigenvalues.max());
    if lmin <= 1e-14 * lmax {
        return Err(Error::Singular(format!(
            "disturbance bound Θ(p) is singular (eigenvalues in [{lmin:e}, {lmax:e}])"
        )));
    }
    psd_inv_sqrt(theta).map(Some)
}

/// Design program in `W = P⁻¹` and `M = LW`:
///
/// * `[[W, AW+BM], [(AW+BM)ᵀ, ηW]] ⪰ 0` (one-step contraction by `η`),
/// * `H W H ⪰ (1−√η)⁻² I` with `H = Θ(p)^{-1/2}` (room for the disturbance),
/// * `1 − βᵀWβ ≥ 0` per state row,
/// * `[[W, Mᵀζ], [ζᵀM, 1]] ⪰ 0` per input row.
///
/// The objective is `max log det W`.
pub fn build_design_sdp(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    bounds: &UncertaintyBounds,
    constraints: &PolytopeConstraints,
    p: f64,
    eta: f64,
) -> Result<LmiProblem> {
    check_eta(eta)?;
    require_square("A", a)?;
    let (n, m) = (a.nrows(), b.ncols());
    check_dim("B rows", n, b.nrows())?;
    check_dim("noise bounds", n, bounds.state_dim())?;
    constraints.check_dims(n, m)?;
    let h = margin_transform(&bounds.theta(p)?)?;

    let mut problem = LmiProblem::new();
    let wid = problem.symmetric("W", n);
    let mid = problem.rectangular("M", m, n);
    let w = problem.var(wid);
    let mv = problem.var(mid);

    let closed = w.left_mul(a) + mv.left_mul(b);
    problem.add(
        Lmi::new("contraction", vec![n, n])
            .with_block(0, 0, w.clone())
            .with_block(0, 1, closed)
            .with_block(1, 1, w.scale(eta)),
    );
    if let Some(h) = h {
        let k = (1.0 - eta.sqrt()).powi(-2);
        problem.require_psd(
            "disturbance margin",
            w.congruence(&h) - AffineExpr::identity(n).scale(k),
        );
    }
    for (i, beta) in constraints.state_rows().iter().enumerate() {
        let col = DMatrix::from_column_slice(n, 1, beta.as_slice());
        problem.require_psd(
            format!("state row {}", i + 1),
            AffineExpr::scalar(1.0) - w.congruence(&col),
        );
    }
    for (j, zeta) in constraints.input_rows().iter().enumerate() {
        let col = DMatrix::from_column_slice(m, 1, zeta.as_slice());
        problem.add(
            Lmi::new(format!("input row {}", j + 1), vec![n, 1])
                .with_block(0, 0, w.clone())
                .with_block(0, 1, mv.transpose().right_mul(&col))
                .with_block(1, 1, AffineExpr::scalar(1.0)),
        );
    }
    problem.set_objective(Objective::MaximizeLogDet(wid));
    Ok(problem)
}

/// Outcome of a bisection on `[p_low, p_up]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Bisection<T> {
    pub p_low: f64,
    pub p_up: f64,
    pub iterations: usize,
    /// Best feasible level seen and what the oracle returned there.
    pub best: Option<(f64, T)>,
}

/// Bisection for the largest feasible level, assuming feasibility is
/// monotone (feasible at `p` implies feasible below `p`).
///
/// Starts at `p_init` and continues at midpoints until the bracket is at most `delta` wide.
pub fn bisect<T>(
    mut p_low: f64,
    mut p_up: f64,
    p_init: f64,
    delta: f64,
    mut oracle: impl FnMut(f64) -> Option<T>,
) -> Bisection<T> {
    let mut p = p_init;
    let mut iterations = 0;
    let mut best = None;
    while p_up - p_low > delta {
        iterations += 1;
        match oracle(p) {
            Some(v) => {
                p_low = p;
                best = Some((p, v));
            }
            None => p_up = p,
        }
        log::debug!("bisection step {iterations}: p = {p:.6}, bracket [{p_low:.6}, {p_up:.6}]");
        p = 0.5 * (p_low + p_up);
    }
    Bisection {
        p_low,
        p_up,
        iterations,
        best,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeasibilityEntry {
    pub p: f64,
    pub eta: f64,
    pub status: String,
    pub solve_ms: Option<f64>,
}

/// Independent check of a returned certificate.
#[derive(Debug, Clone, PartialEq)]
pub struct CertificateCheck {
    /// `λ_max((A+BL)ᵀP(A+BL) − ηP) / ‖P‖`; must not exceed the tolerance.
    pub contraction_excess: f64,
    /// `λ_min(HWH)·(1−√η)²`; must be at least `1 − tol` (`None` without disturbance).
    pub disturbance_margin: Option<f64>,
    pub constraints: Vec<ConstraintMargin>,
}

impl CertificateCheck {
    pub fn contraction_ok(&self) -> bool {
        self.contraction_excess <= RECHECK_TOL
    }

    pub fn margin_ok(&self) -> bool {
        self.disturbance_margin
            .is_none_or(|m| m >= 1.0 - RECHECK_TOL)
    }

    pub fn passed(&self) -> bool {
        self.contraction_ok() && self.margin_ok() && self.constraints.iter().all(|c| c.satisfied())
    }

    /// One line per failed condition.
    pub fn failures(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !self.contraction_ok() {
            out.push(format!(
                "contraction: (A+BL)ᵀP(A+BL) exceeds ηP by {:.3e}·‖P‖",
                self.contraction_excess
            ));
        }
        if !self.margin_ok() {
            out.push(format!(
                "disturbance margin: {:.9} < 1",
                self.disturbance_margin.unwrap_or(f64::NAN)
            ));
        }
        out.extend(
            self.constraints
                .iter()
                .filter(|c| !c.satisfied())
                .map(ConstraintMargin::describe),
        );
        out
    }
}

/// Re-derives every design condition from `(P, L)` alone.
#[allow(clippy::too_many_arguments)]
pub fn recheck_certificate(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    bounds: &UncertaintyBounds,
    constraints: &PolytopeConstraints,
    p: f64,
    eta: f64,
    pm: &DMatrix<f64>,
    l: &DMatrix<f64>,
) -> Result<CertificateCheck> {
    check_eta(eta)?;
    require_square("P", pm)?;
    let n = pm.nrows();
    check_dim("A", n, a.nrows())?;
    check_dim("gain rows", b.ncols(), l.nrows())?;
    check_dim("gain columns", n, l.ncols())?;
    let a_bl = a + b * l;
    let gap = symmetrize(&(a_bl.transpose() * pm * &a_bl - pm * eta));
    let contraction_excess = max_eigenvalue(&gap) / sym_norm(pm).max(f64::MIN_POSITIVE);
    let w = pm
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Singular("certificate P is not positive definite".into()))?
        .inverse();
    let disturbance_margin = margin_transform(&bounds.theta(p)?)?
        .map(|h| min_eigenvalue(&symmetrize(&(&h * &w * &h))) * (1.0 - eta.sqrt()).powi(2));
    Ok(CertificateCheck {
        contraction_excess,
        disturbance_margin,
        constraints: check_constraints(pm, l, constraints)?,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PciResult {
    /// Certificate matrix; the invariant set is `E(0, P⁻¹)`.
    pub p: DMatrix<f64>,
    pub l: DMatrix<f64>,
    pub w: DMatrix<f64>,
    pub m: DMatrix<f64>,
    pub p_star: f64,
    pub eta_star: f64,
    /// `log det P⁻¹`.
    pub logdet: f64,
    pub bisection_iterations: usize,
    pub feasibility_log: Vec<FeasibilityEntry>,
    pub check: CertificateCheck,
    pub config: ConfigEcho,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PciDocument {
    #[serde(rename = "P")]
    pub p: Vec<Vec<f64>>,
    #[serde(rename = "L")]
    pub l: Vec<Vec<f64>>,
    pub p_star: f64,
    pub eta_star: f64,
    pub logdet: f64,
    pub feasibility_log: Vec<FeasibilityEntry>,
    pub config_echo: Option<ConfigEcho>,
}

impl PciDocument {
    pub fn certificate(&self) -> Result<DMatrix<f64>> {
        let n = self.p.len();
        matrix_from_rows(&self.p, n, "P")
    }

    pub fn gain(&self) -> Result<DMatrix<f64>> {
        matrix_from_rows(&self.l, self.p.len(), "L")
    }
}

impl PciResult {
    pub fn to_document(&self) -> PciDocument {
        PciDocument {
            p: matrix_rows(&self.p),
            l: matrix_rows(&self.l),
            p_star: self.p_star,
            eta_star: self.eta_star,
            logdet: self.logdet,
            feasibility_log: self.feasibility_log.clone(),
            config_echo: Some(self.config.clone()),
        }
    }
}

/// A solved cell of the `(p, η)` grid that survived the re-check.
#[derive(Debug, Clone)]
struct Cell {
    eta: f64,
    w: DMatrix<f64>,
    m: DMatrix<f64>,
    pm: DMatrix<f64>,
    l: DMatrix<f64>,
    logdet: f64,
    check: CertificateCheck,
}

struct Design<'a> {
    a: &'a DMatrix<f64>,
    b: &'a DMatrix<f64>,
    bounds: &'a UncertaintyBounds,
    constraints: &'a PolytopeConstraints,
    config: &'a SynthesisConfig,
}

impl Design<'_> {
    fn solve_cell(&self, p: f64, eta: f64) -> Result<(FeasibilityEntry, Option<Cell>)> {
        let start = Instant::now();
        let mut problem = build_design_sdp(self.a, self.b, self.bounds, self.constraints, p, eta)?;
        let wid = problem.var_by_name("W").expect("declared");
        problem.require_lower_bound(wid, CERTIFICATE_FLOOR);
        let out = pcis_sdp::solve(&problem, &self.config.solver)?;
        let mut status = out.status.as_str().to_string();
        let mut cell = None;
        if out.status == SolveStatus::Feasible {
            let w = out.value("W").expect("feasible point").clone();
            let m = out.value("M").expect("feasible point").clone();
            match w.clone().cholesky() {
                Some(ch) => {
                    let pm = symmetrize(&ch.inverse());
                    let l = &m * &pm;
                    let logdet = 2.0 * ch.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
                    let check = recheck_certificate(
                        self.a,
                        self.b,
                        self.bounds,
                        self.constraints,
                        p,
                        eta,
                        &pm,
                        &l,
                    )?;
                    if check.passed() {
                        cell = Some(Cell {
                            eta,
                            w,
                            m,
                            pm,
                            l,
                            logdet,
                            check,
                        });
                    } else {
                        log::debug!(
                            "p = {p}, eta = {eta}: re-check failed: {:?}",
                            check.failures()
                        );
                        status = "recheck_failed".into();
                    }
                }
                None => status = "recheck_failed".into(),
            }
        }
        let solve_ms = self
            .config
            .record_timing
            .then(|| start.elapsed().as_secs_f64() * 1e3);
        Ok((
            FeasibilityEntry {
                p,
                eta,
                status,
                solve_ms,
            },
            cell,
        ))
    }

    /// Solves every contraction factor at level `p` and keeps the largest volume.
    fn sweep(&self, p: f64, log: &mut Vec<FeasibilityEntry>) -> Result<Option<Cell>> {
        let run = || -> Vec<Result<(FeasibilityEntry, Option<Cell>)>> {
            self.config
                .eta_grid
                .par_iter()
                .map(|&eta| self.solve_cell(p, eta))
                .collect()
        };
        let results = match self.config.jobs {
            Some(j) => rayon::ThreadPoolBuilder::new()
                .num_threads(j)
                .build()
                .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?
                .install(run),
            None => run(),
        };
        let mut cells = Vec::new();
        for r in results {
            let (entry, cell) = r?;
            log.push(entry);
            cells.extend(cell);
        }
        Ok(pick_cell(cells))
    }
}

/// Largest `log det W`; within the tie tolerance the smallest `η` wins.
fn pick_cell(mut cells: Vec<Cell>) -> Option<Cell> {
    let best = cells
        .iter()
        .map(|c| c.logdet)
        .fold(f64::NEG_INFINITY, f64::max);
    cells.retain(|c| best - c.logdet <= VOLUME_TIE_TOL * best.abs().max(1.0));
    cells.into_iter().min_by(|a, b| a.eta.total_cmp(&b.eta))
}

/// Bisection on `p` with a sweep over the contraction grid at every level.
pub fn synthesize(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    bounds: &UncertaintyBounds,
    constraints: &PolytopeConstraints,
    config: &SynthesisConfig,
) -> Result<PciResult> {
    config.validate()?;
    require_square("A", a)?;
    check_dim("B rows", a.nrows(), b.nrows())?;
    constraints.check_dims(a.nrows(), b.ncols())?;
    if constraints.state_rows().is_empty() || constraints.input_rows().is_empty() {
        log::warn!("state or input constraints are empty; the corresponding set is unbounded");
    }
    let design = Design {
        a,
        b,
        bounds,
        constraints,
        config,
    };
    let mut log = Vec::new();
    let mut failure = None;
    let bis = bisect(0.0, 1.0, config.p_init, config.delta, |p| {
        if failure.is_some() {
            return None;
        }
        match design.sweep(p, &mut log) {
            Ok(cell) => cell,
            Err(e) => {
                failure = Some(e);
                None
            }
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    let (p_star, cell) = match bis.best {
        Some(found) => found,
        None => match design.sweep(0.0, &mut log)? {
            Some(cell) => (0.0, cell),
            None => {
                return Err(Error::Infeasible(describe_failure(&log)));
            }
        },
    };
    Ok(PciResult {
        p: cell.pm,
        l: cell.l,
        w: cell.w,
        m: cell.m,
        p_star,
        eta_star: cell.eta,
        logdet: cell.logdet,
        bisection_iterations: bis.iterations,
        feasibility_log: log,
        check: cell.check,
        config: config.echo(),
    })
}

fn describe_failure(log: &[FeasibilityEntry]) -> String {
    let mut counts: Vec<(String, usize)> = Vec::new();
    for e in log {
        match counts.iter_mut().find(|(s, _)| *s == e.status) {
            Some((_, c)) => *c += 1,
            None => counts.push((e.status.clone(), 1)),
        }
    }
    let summary: Vec<String> = counts.iter().map(|(s, c)| format!("{c} {s}")).collect();
    format!(
        "no contraction factor is feasible even at p = 0 ({} cells: {})",
        log.len(),
        summary.join(", ")
    )
}

/// Feasibility (without the volume objective) of one design cell.
pub fn design_feasible(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    bounds: &UncertaintyBounds,
    constraints: &PolytopeConstraints,
    p: f64,
    eta: f64,
    settings: &SolverSettings,
) -> Result<bool> {
    let mut problem = build_design_sdp(a, b, bounds, constraints, p, eta)?;
    let wid = problem.var_by_name("W").expect("declared");
    problem.require_lower_bound(wid, CERTIFICATE_FLOOR);
    problem.set_objective(Objective::Feasibility);
    Ok(pcis_sdp::solve(&problem, settings)?.is_feasible())
}

/// Whether the feasibility indicator over ascending `p_samples` never turns
/// back on once it has turned off.
pub fn feasibility_is_monotone_check(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    bounds: &UncertaintyBounds,
    constraints: &PolytopeConstraints,
    eta: f64,
    p_samples: &[f64],
    settings: &SolverSettings,
) -> Result<bool> {
    if p_samples.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::InvalidArgument(
            "probability samples must be sorted".into(),
        ));
    }
    let mut seen_infeasible = false;
    for &p in p_samples {
        let feasible = design_feasible(a, b, bounds, constraints, p, eta, settings)?;
        if feasible && seen_infeasible {
            return Ok(false);
        }
        seen_infeasible |= !feasible;
    }
    Ok(true)
}

/// Largest `|z|` reachable from `|z| ≤ √W` under `z⁺ = ψ + φ` with
/// `|ψ| ≤ √(ηW)` and `|φ| ≤ √Θ`, compared with `√W`; positive means the
/// interval is not invariant.
pub fn scalar_worst_case_excess(w: f64, eta: f64, theta: f64) -> f64 {
    (eta * w).sqrt() + theta.sqrt() - w.sqrt()
}

/// Whether the implemented disturbance-margin constraint accepts `W` for a
/// scalar system with disturbance bound `Θ`.
pub fn scalar_margin_satisfied(w: f64, eta: f64, theta: f64) -> Result<bool> {
    let bounds = UncertaintyBounds::new(theta / 2.0, DVector::zeros(1), DVector::zeros(1))?;
    let a = DMatrix::zeros(1, 1);
    let problem = build_design_sdp(
        &a,
        &DMatrix::zeros(1, 1),
        &bounds,
        &PolytopeConstraints::new(vec![], vec![])?,
        0.0,
        eta,
    )?;
    let checks = problem.check_point(&[DMatrix::from_element(1, 1, w), DMatrix::zeros(1, 1)]);
    Ok(checks.iter().all(|c| c.min_eigenvalue >= 0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn m(r: usize, c: usize, v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(r, c, v)
    }

    #[test]
    fn stubbed_bisection_finds_threshold() {
        let mut calls = 0;
        let bis = bisect(0.0, 1.0, 0.5, 1e-3, |p| {
            calls += 1;
            (p <= 0.7).then_some(())
        });
        assert_eq!(bis.iterations, 10);
        assert_eq!(calls, 10);
        let (p, _) = bis.best.unwrap();
        assert!((0.7 - 1e-3..=0.7).contains(&p), "{p}");
        assert!(bis.p_up - bis.p_low <= 1e-3);
    }

    #[test]
    fn scalar_design_matches_closed_form() {
        // A = 0.9, B = 1, Θ = 0.01, η = 0.25: the margin needs W ≥ 0.04.
        let bounds = UncertaintyBounds::new(0.005, DVector::zeros(1), DVector::zeros(1)).unwrap();
        let c = PolytopeConstraints::symmetric_boxes(&[10.0], &[100.0]).unwrap();
        let problem =
            build_design_sdp(&m(1, 1, &[0.9]), &m(1, 1, &[1.0]), &bounds, &c, 0.3, 0.25).unwrap();
        let at = |w: f64| problem.check_point(&[m(1, 1, &[w]), m(1, 1, &[-0.9 * w])]);
        let margin = |w: f64| {
            at(w)
                .into_iter()
                .find(|c| c.label == "disturbance margin")
                .unwrap()
                .min_eigenvalue
        };
        assert!(margin(0.04).abs() < 1e-12);
        assert!(margin(0.039) < 0.0 && margin(0.041) > 0.0);
        let out = pcis_sdp::solve(&problem, &SolverSettings::default()).unwrap();
        assert!(out.is_feasible());
        assert!(out.value("W").unwrap()[(0, 0)] >= 0.04 * (1.0 - 1e-7));
    }

    #[test]
    fn uncontrollable_expansion_is_infeasible() {
        let bounds = UncertaintyBounds::new(1e-4, DVector::zeros(1), DVector::zeros(1)).unwrap();
        let c = PolytopeConstraints::symmetric_boxes(&[10.0], &[10.0]).unwrap();
        for eta in [0.1, 0.5, 0.9] {
            assert!(!design_feasible(
                &m(1, 1, &[1.5]),
                &m(1, 1, &[0.0]),
                &bounds,
                &c,
                0.5,
                eta,
                &SolverSettings::default()
            )
            .unwrap());
        }
    }

    #[test]
    fn design_program_shape_for_four_states_two_inputs() {
        let a = DMatrix::identity(4, 4);
        let b = DMatrix::zeros(4, 2);
        let bounds = UncertaintyBounds::new(
            1e-3,
            DVector::from_element(4, 1e-5),
            DVector::from_element(4, 1e-4),
        )
        .unwrap();
        let c = PolytopeConstraints::symmetric_boxes(&[5.0, 7.0, 5.0, 7.0], &[5.0, 5.0]).unwrap();
        let problem = build_design_sdp(&a, &b, &bounds, &c, 0.9, 0.9).unwrap();
        let vars = problem.variables();
        assert_eq!(vars.len(), 2);
        assert_eq!(vars[0].kind.shape(), (4, 4));
        assert_eq!(vars[1].kind.shape(), (2, 4));
        let sizes: Vec<usize> = problem.constraints().iter().map(|l| l.dim()).collect();
        assert_eq!(sizes.iter().filter(|s| **s == 1).count(), 8);
        assert_eq!(sizes.iter().filter(|s| **s == 5).count(), 4);
        assert_eq!(sizes.iter().filter(|s| **s == 8).count(), 1);
        assert_eq!(sizes.iter().filter(|s| **s == 4).count(), 1);
        assert_eq!(sizes.len(), 14);
    }

    #[test]
    fn degenerate_inputs_are_rejected() {
        let a = DMatrix::identity(2, 2);
        let b = DMatrix::identity(2, 2);
        let c = PolytopeConstraints::symmetric_boxes(&[1.0, 1.0], &[1.0, 1.0]).unwrap();
        let bounds = UncertaintyBounds::new(0.1, DVector::zeros(2), DVector::zeros(2)).unwrap();
        assert!(build_design_sdp(&a, &b, &bounds, &c, 0.5, 0.0).is_err());
        assert!(build_design_sdp(&a, &b, &bounds, &c, 0.5, 1.0).is_err());
        assert!(build_design_sdp(&a, &b, &bounds, &c, 1.0, 0.5).is_err());
        // Θ = 2n/(1−p)·diag(0, 1) is singular but not zero.
        let singular =
            UncertaintyBounds::new(0.0, DVector::zeros(2), DVector::from_vec(vec![0.0, 1.0]))
                .unwrap();
        assert!(matches!(
            build_design_sdp(&a, &b, &singular, &c, 0.5, 0.5),
            Err(Error::Singular(_))
        ));
    }

    #[test]
    fn noise_free_design_reaches_ceiling() {
        let a = m(2, 2, &[1.0, 0.1, 0.0, 1.0]);
        let b = m(2, 1, &[0.005, 0.1]);
        let c = PolytopeConstraints::symmetric_boxes(&[5.0, 5.0], &[5.0]).unwrap();
        let config = SynthesisConfig {
            eta_grid: uniform_eta_grid(5),
            ..Default::default()
        };
        let res = synthesize(&a, &b, &UncertaintyBounds::zero(2), &c, &config).unwrap();
        assert!(res.p_star >= 1.0 - config.delta, "{}", res.p_star);
        assert_eq!(res.bisection_iterations, 10);
        assert!(res.check.passed());
        assert!(res.check.disturbance_margin.is_none());
    }

    #[test]
    fn double_integrator_design_passes_recheck() {
        let a = m(2, 2, &[1.0, 0.1, 0.0, 1.0]);
        let b = m(2, 1, &[0.005, 0.1]);
        let bounds = UncertaintyBounds::new(
            1e-6,
            DVector::from_element(2, 1e-7),
            DVector::from_element(2, 1e-6),
        )
        .unwrap();
        let c = PolytopeConstraints::symmetric_boxes(&[5.0, 5.0], &[5.0]).unwrap();
        let config = SynthesisConfig {
            eta_grid: uniform_eta_grid(6),
            ..Default::default()
        };
        let res = synthesize(&a, &b, &bounds, &c, &config).unwrap();
        assert!(res.p_star > 0.9, "{}", res.p_star);
        assert!(res.check.passed(), "{:?}", res.check.failures());
        assert!((&res.l - &res.m * &res.p).amax() <= 1e-8 * res.l.amax().max(1.0));
        assert!((&res.w * &res.p - DMatrix::identity(2, 2)).amax() < 1e-8);
        // The winning cell has the largest volume among feasible cells at p*.
        let feasible: Vec<f64> = res
            .feasibility_log
            .iter()
            .filter(|e| e.p == res.p_star && e.status == "feasible")
            .map(|e| e.eta)
            .collect();
        assert!(feasible.contains(&res.eta_star));
        let back = res.to_document();
        assert_eq!(back.certificate().unwrap(), res.p);
        assert_eq!(back.gain().unwrap(), res.l);
        assert!(back.feasibility_log.iter().all(|e| e.solve_ms.is_none()));
    }

    #[test]
    fn infeasible_everywhere_is_an_error() {
        let c = PolytopeConstraints::symmetric_boxes(&[0.01], &[0.01]).unwrap();
        let bounds = UncertaintyBounds::new(
            1.0,
            DVector::from_element(1, 1.0),
            DVector::from_element(1, 1.0),
        )
        .unwrap();
        let config = SynthesisConfig {
            eta_grid: uniform_eta_grid(3),
            ..Default::default()
        };
        let err = synthesize(&m(1, 1, &[1.0]), &m(1, 1, &[1.0]), &bounds, &c, &config).unwrap_err();
        assert!(matches!(err, Error::Infeasible(_)), "{err}");
    }

    #[test]
    fn monotone_check_on_trivial_instances() {
        let a = m(1, 1, &[0.5]);
        let b = m(1, 1, &[1.0]);
        let c = PolytopeConstraints::symmetric_boxes(&[1.0], &[1.0]).unwrap();
        let ps = [0.0, 0.3, 0.6, 0.9];
        let s = SolverSettings::default();
        assert!(feasibility_is_monotone_check(
            &a,
            &b,
            &UncertaintyBounds::zero(1),
            &c,
            0.5,
            &ps,
            &s
        )
        .unwrap());
        let huge =
            UncertaintyBounds::new(0.0, DVector::zeros(1), DVector::from_element(1, 1e3)).unwrap();
        assert!(feasibility_is_monotone_check(&a, &b, &huge, &c, 0.5, &ps, &s).unwrap());
        assert!(!design_feasible(&a, &b, &huge, &c, 0.0, 0.5, &s).unwrap());
        assert!(feasibility_is_monotone_check(&a, &b, &huge, &c, 0.5, &[0.5, 0.1], &s).is_err());
    }

    #[test]
    fn scalar_margin_agrees_with_worst_case() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let w = rng.random_range(0.01..4.0);
            let eta = rng.random_range(0.05..0.95);
            let theta = rng.random_range(0.0001..1.0);
            let excess = scalar_worst_case_excess(w, eta, theta);
            if excess.abs() < 1e-10 {
                continue;
            }
            assert_eq!(
                scalar_margin_satisfied(w, eta, theta).unwrap(),
                excess <= 0.0,
                "{w} {eta} {theta}"
            );
        }
    }
}
