//! Barrier-method solver for small dense LMI problems.
//!
//! The problem is compiled to standard form `Fⱼ(y) = Fⱼ₀ + Σ yᵢ Fⱼᵢ ⪰ 0` over
//! the free scalars `y` of all variables, each bounded by `|yᵢ| ≤ R`.
//!
//! Phase I maximizes a common margin `s` with `Fⱼ(y) − s·I ⪰ 0`. A positive
//! margin at a central point gives a strictly feasible start; an upper bound
//! `s + m/t < 0` certifies infeasibility. Phase II follows the central path of
//! `t·(cᵀy + log det G(y)) + Σ log det Fⱼ(y)`, which handles linear and
//! log-determinant objectives alike (no linearized MAXDET surrogate needed).

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};

use crate::error::SdpError;
use crate::problem::{ConstraintCheck, LmiProblem, Objective, VarId};

const CENTERING_TOL: f64 = 1e-9;
const PATH_FACTOR: f64 = 12.0;
const MAX_OUTER: usize = 80;

#[derive(Debug, Clone, PartialEq)]
pub struct SolverSettings {
    /// Target duality-gap bound (relative to the objective magnitude).
    pub tolerance: f64,
    /// Newton steps allowed per centering.
    pub max_iterations: usize,
    /// Box bound `R` on every free scalar.
    pub variable_bound: f64,
    /// Relative eigenvalue slack accepted by the final re-check.
    pub recheck_tolerance: f64,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            tolerance: 1e-8,
            max_iterations: 200,
            variable_bound: 1e6,
            recheck_tolerance: 1e-7,
        }
    }
}

impl SolverSettings {
    fn validate(&self) -> Result<(), SdpError> {
        if !(self.tolerance > 0.0) {
            return Err(SdpError::InvalidSettings(
                "tolerance must be positive".into(),
            ));
        }
        if self.max_iterations == 0 {
            return Err(SdpError::InvalidSettings(
                "max_iterations must be at least 1".into(),
            ));
        }
        if !(self.variable_bound > 0.0) || !self.variable_bound.is_finite() {
            return Err(SdpError::InvalidSettings(
                "variable_bound must be finite and positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SolveStatus {
    Feasible,
    Infeasible,
    Inaccurate,
    IterationLimit,
}

impl SolveStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            SolveStatus::Feasible => "feasible",
            SolveStatus::Infeasible => "infeasible",
            SolveStatus::Inaccurate => "inaccurate",
            SolveStatus::IterationLimit => "iteration_limit",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Residuals {
    /// Largest relative eigenvalue violation over all constraints at the point.
    pub primal: f64,
    /// Duality-gap bound `m/t` at termination (phase-I bound for infeasibility).
    pub gap: f64,
}

#[derive(Debug, Clone)]
pub struct SolveOutcome {
    pub status: SolveStatus,
    pub point: Option<BTreeMap<String, DMatrix<f64>>>,
    pub objective_value: Option<f64>,
    pub residuals: Residuals,
    /// Largest phase-I margin bound when infeasibility was certified.
    pub infeasibility_bound: Option<f64>,
    pub newton_steps: usize,
    pub checks: Vec<ConstraintCheck>,
}

impl SolveOutcome {
    pub fn is_feasible(&self) -> bool {
        self.status == SolveStatus::Feasible
    }

    pub fn value(&self, name: &str) -> Option<&DMatrix<f64>> {
        self.point.as_ref().and_then(|p| p.get(name))
    }

    fn without_point(status: SolveStatus, gap: f64, steps: usize) -> Self {
        Self {
            status,
            point: None,
            objective_value: None,
            residuals: Residuals {
                primal: f64::NAN,
                gap,
            },
            infeasibility_bound: None,
            newton_steps: steps,
            checks: Vec::new(),
        }
    }
}

/// Solves `problem` according to its objective.
pub fn solve(problem: &LmiProblem, settings: &SolverSettings) -> Result<SolveOutcome, SdpError> {
    problem.validate()?;
    settings.validate()?;
    let form = StdForm::compile(problem, settings.variable_bound);
    let mut steps = 0usize;

    let y = match phase_one(&form, settings, &mut steps) {
        PhaseOne::Feasible(y) => y,
        PhaseOne::Infeasible { bound, gap } => {
            let mut out = SolveOutcome::without_point(SolveStatus::Infeasible, gap, steps);
            out.infeasibility_bound = Some(bound);
            return Ok(out);
        }
        PhaseOne::Undetermined(status, gap) => {
            return Ok(SolveOutcome::without_point(status, gap, steps));
        }
    };

    let (y, gap, phase_two_status) = if form.has_objective() {
        match phase_two(&form, y.clone(), settings, &mut steps) {
            Ok((y, gap)) => (y, gap, None),
            Err((y, gap, status)) => (y, gap, Some(status)),
        }
    } else {
        (y, f64::NAN, None)
    };

    let values = form.unpack(problem, &y);
    let checks = problem.check_point(&values);
    let primal = checks
        .iter()
        .map(|c| (-c.min_eigenvalue / c.scale).max(0.0))
        .fold(0.0, f64::max);
    let recheck_ok = checks
        .iter()
        .all(|c| c.satisfied(settings.recheck_tolerance));
    let status = match (recheck_ok, phase_two_status) {
        (false, _) => SolveStatus::Inaccurate,
        (true, None) => SolveStatus::Feasible,
        (true, Some(s)) => s,
    };
    let objective_value = objective_value(problem, &values);
    let point = problem
        .variables()
        .iter()
        .zip(values)
        .map(|(d, v)| (d.name.clone(), v))
        .collect();
    Ok(SolveOutcome {
        status,
        point: Some(point),
        objective_value,
        residuals: Residuals { primal, gap },
        infeasibility_bound: None,
        newton_steps: steps,
        checks,
    })
}

/// Maximizes `log det` of the named symmetric variable subject to the problem's constraints.
pub fn maximize_logdet(
    problem: &LmiProblem,
    target: &str,
    settings: &SolverSettings,
) -> Result<SolveOutcome, SdpError> {
    let id = problem
        .var_by_name(target)
        .ok_or_else(|| SdpError::UnknownVariable(target.to_string()))?;
    let mut p = problem.clone();
    p.set_objective(Objective::MaximizeLogDet(id));
    solve(&p, settings)
}

fn objective_value(problem: &LmiProblem, values: &[DMatrix<f64>]) -> Option<f64> {
    match problem.objective() {
        Objective::Feasibility => None,
        Objective::MaximizeLinear(terms) => Some(
            terms
                .iter()
                .map(|(id, c)| c.component_mul(&values[id.index()]).sum())
                .sum(),
        ),
        Objective::MaximizeLogDet(id) => values[id.index()]
            .clone()
            .cholesky()
            .map(|ch| 2.0 * ch.l().diagonal().iter().map(|d| d.ln()).sum::<f64>()),
    }
}

#[derive(Debug, Clone)]
struct Block {
    f0: DMatrix<f64>,
    coeffs: Vec<(usize, DMatrix<f64>)>,
}

impl Block {
    fn dim(&self) -> usize {
        self.f0.nrows()
    }

    fn at(&self, y: &DVector<f64>) -> DMatrix<f64> {
        let mut m = self.f0.clone();
        for (i, fi) in &self.coeffs {
            if y[*i] != 0.0 {
                m += fi * y[*i];
            }
        }
        m
    }

    fn min_eigenvalue(&self, y: &DVector<f64>) -> f64 {
        let m = self.at(y);
        if m.nrows() == 0 {
            return f64::INFINITY;
        }
        m.symmetric_eigenvalues().min()
    }

    /// Drops rows/columns that are identically zero in every coefficient.
    fn pruned(self) -> Self {
        let n = self.dim();
        let keep: Vec<usize> = (0..n)
            .filter(|&r| {
                self.f0.row(r).iter().any(|v| *v != 0.0)
                    || self
                        .coeffs
                        .iter()
                        .any(|(_, f)| f.row(r).iter().any(|v| *v != 0.0))
            })
            .collect();
        if keep.len() == n {
            return self;
        }
        let sel = |m: &DMatrix<f64>| m.select_rows(keep.iter()).select_columns(keep.iter());
        Block {
            f0: sel(&self.f0),
            coeffs: self.coeffs.iter().map(|(i, f)| (*i, sel(f))).collect(),
        }
    }
}

#[derive(Debug, Clone)]
struct StdForm {
    nvars: usize,
    offsets: Vec<usize>,
    blocks: Vec<Block>,
    linear: DVector<f64>,
    logdet: Option<Block>,
    /// The first `boxed` scalars carry the `|yᵢ| ≤ bound` barrier.
    boxed: usize,
    bound: f64,
}

impl StdForm {
    fn compile(problem: &LmiProblem, bound: f64) -> Self {
        let mut offsets = Vec::with_capacity(problem.variables().len());
        let mut nvars = 0;
        for v in problem.variables() {
            offsets.push(nvars);
            nvars += v.kind.scalar_count();
        }
        let basis_block = |id: VarId| -> Vec<(usize, DMatrix<f64>)> {
            let kind = problem.variables()[id.index()].kind;
            (0..kind.scalar_count())
                .map(|k| (offsets[id.index()] + k, kind.basis(k)))
                .collect()
        };

        let mut blocks = Vec::new();
        for lmi in problem.constraints() {
            let f0 = lmi.constant_part();
            let mut coeffs = Vec::new();
            for id in lmi.vars() {
                for (idx, e) in basis_block(id) {
                    let fi = lmi.linear_part(id, &e);
                    if fi.iter().any(|v| *v != 0.0) {
                        coeffs.push((idx, fi));
                    }
                }
            }
            let b = Block { f0, coeffs }.pruned();
            if b.dim() > 0 {
                blocks.push(b);
            }
        }

        let mut linear = DVector::zeros(nvars);
        let mut logdet = None;
        match problem.objective() {
            Objective::Feasibility => {}
            Objective::MaximizeLinear(terms) => {
                for (id, c) in terms {
                    for (idx, e) in basis_block(*id) {
                        linear[idx] += c.component_mul(&e).sum();
                    }
                }
            }
            Objective::MaximizeLogDet(id) => {
                let n = problem.variables()[id.index()].kind.shape().0;
                logdet = Some(Block {
                    f0: DMatrix::zeros(n, n),
                    coeffs: basis_block(*id),
                });
            }
        }
        Self {
            nvars,
            offsets,
            blocks,
            linear,
            logdet,
            boxed: nvars,
            bound,
        }
    }

    fn has_objective(&self) -> bool {
        self.logdet.is_some() || self.linear.iter().any(|c| *c != 0.0)
    }

    fn unpack(&self, problem: &LmiProblem, y: &DVector<f64>) -> Vec<DMatrix<f64>> {
        problem
            .variables()
            .iter()
            .zip(&self.offsets)
            .map(|(v, &o)| v.kind.unpack(&y.as_slice()[o..o + v.kind.scalar_count()]))
            .collect()
    }

    /// Barrier parameter count `m` (gap bound is `m/t`).
    fn barrier_degree(&self) -> f64 {
        (self.blocks.iter().map(Block::dim).sum::<usize>() + 2 * self.boxed) as f64
    }

    fn linear_value(&self, y: &DVector<f64>) -> f64 {
        self.linear.dot(y)
    }

    /// Precomputes the barrier along `y + s·dx`, so that its change can be
    /// evaluated without cancellation against the (possibly huge) barrier value.
    fn line_profile(&self, y: &DVector<f64>, dx: &DVector<f64>) -> Option<LineProfile> {
        let whitened = |b: &Block| -> Option<Vec<f64>> {
            let l = b.at(y).cholesky()?.unpack();
            let mut d = DMatrix::zeros(b.dim(), b.dim());
            for (i, fi) in &b.coeffs {
                if dx[*i] != 0.0 {
                    d += fi * dx[*i];
                }
            }
            let x = l.solve_lower_triangular(&d)?;
            let m = l.solve_lower_triangular(&x.transpose())?;
            let m = (&m + m.transpose()) * 0.5;
            Some(m.symmetric_eigenvalues().iter().copied().collect())
        };
        let mut barrier = Vec::new();
        for b in &self.blocks {
            barrier.extend(whitened(b)?);
        }
        let objective = match &self.logdet {
            Some(g) => whitened(g)?,
            None => Vec::new(),
        };
        for i in 0..self.boxed {
            barrier.push(dx[i] / (self.bound + y[i]));
            barrier.push(-dx[i] / (self.bound - y[i]));
        }
        Some(LineProfile {
            linear_slope: self.linear.dot(dx),
            objective,
            barrier,
        })
    }

    fn gradient_hessian(&self, y: &DVector<f64>, t: f64) -> Option<(DVector<f64>, DMatrix<f64>)> {
        let n = self.nvars;
        let mut g = -&self.linear * t;
        let mut h = DMatrix::zeros(n, n);
        for b in &self.blocks {
            accumulate_logdet_derivatives(b, y, 1.0, &mut g, &mut h)?;
        }
        if let Some(gb) = &self.logdet {
            accumulate_logdet_derivatives(gb, y, t, &mut g, &mut h)?;
        }
        for i in 0..self.boxed {
            let (lo, hi) = (self.bound + y[i], self.bound - y[i]);
            g[i] += 1.0 / hi - 1.0 / lo;
            h[(i, i)] += 1.0 / (hi * hi) + 1.0 / (lo * lo);
        }
        Some((g, h))
    }
}

/// Eigenvalues `λ` of the whitened direction for every log term: along the
/// line each term contributes `log(1 + s·λ)`.
struct LineProfile {
    linear_slope: f64,
    objective: Vec<f64>,
    barrier: Vec<f64>,
}

impl LineProfile {
    /// Barrier change from `y` to `y + s·dx`, or `None` outside the domain.
    fn change(&self, s: f64, t: f64) -> Option<f64> {
        let sum = |ls: &[f64]| -> Option<f64> {
            let mut acc = 0.0;
            for l in ls {
                let z = s * l;
                if z <= -1.0 {
                    return None;
                }
                acc += z.ln_1p();
            }
            Some(acc)
        };
        Some(-t * (s * self.linear_slope + sum(&self.objective)?) - sum(&self.barrier)?)
    }
}

fn log_det(m: DMatrix<f64>) -> Option<f64> {
    if m.nrows() == 0 {
        return Some(0.0);
    }
    let ch = m.cholesky()?;
    Some(2.0 * ch.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>())
}

/// Adds the derivatives of `−w·log det F(y)` into `g` and `h`.
fn accumulate_logdet_derivatives(
    b: &Block,
    y: &DVector<f64>,
    weight: f64,
    g: &mut DVector<f64>,
    h: &mut DMatrix<f64>,
) -> Option<()> {
    let inv = b.at(y).cholesky()?.inverse();
    let us: Vec<(usize, DMatrix<f64>)> = b.coeffs.iter().map(|(i, f)| (*i, &inv * f)).collect();
    let uts: Vec<DMatrix<f64>> = us.iter().map(|(_, u)| u.transpose()).collect();
    for (a, (ia, ua)) in us.iter().enumerate() {
        g[*ia] -= weight * ua.trace();
        for (bidx, (ib, _)) in us.iter().enumerate().skip(a) {
            let v = weight * ua.dot(&uts[bidx]);
            h[(*ia, *ib)] += v;
            if ia != ib {
                h[(*ib, *ia)] += v;
            }
        }
    }
    Some(())
}

fn newton_direction(g: &DVector<f64>, h: DMatrix<f64>) -> Option<DVector<f64>> {
    let rhs = -g;
    if let Some(ch) = h.clone().cholesky() {
        return Some(ch.solve(&rhs));
    }
    let reg = 1e-12 * (1.0 + h.diagonal().amax());
    let n = h.nrows();
    let hr = h + DMatrix::identity(n, n) * reg;
    match hr.clone().cholesky() {
        Some(ch) => Some(ch.solve(&rhs)),
        None => hr.lu().solve(&rhs),
    }
}

enum CenterError {
    IterationLimit,
    Stalled,
}

/// Damped Newton minimization of the barrier at fixed `t`.
fn center(
    form: &StdForm,
    y: &mut DVector<f64>,
    t: f64,
    settings: &SolverSettings,
    steps: &mut usize,
) -> Result<(), CenterError> {
    let mut local = 0usize;
    loop {
        let (g, h) = form.gradient_hessian(y, t).ok_or(CenterError::Stalled)?;
        let dx = newton_direction(&g, h).ok_or(CenterError::Stalled)?;
        let slope = g.dot(&dx);
        let decrement = -slope;
        if !decrement.is_finite() {
            return Err(CenterError::Stalled);
        }
        if decrement / 2.0 <= CENTERING_TOL {
            return Ok(());
        }
        if local >= settings.max_iterations {
            return Err(CenterError::IterationLimit);
        }
        let profile = form.line_profile(y, &dx).ok_or(CenterError::Stalled)?;
        let mut step = 1.0;
        loop {
            if let Some(df) = profile.change(step, t) {
                if df <= 0.25 * step * slope {
                    *y += &dx * step;
                    break;
                }
            }
            step *= 0.5;
            if step < 1e-14 {
                // Line search exhausted at the limit of floating-point resolution.
                return if decrement < 1e-6 {
                    Ok(())
                } else {
                    Err(CenterError::Stalled)
                };
            }
        }
        local += 1;
        *steps += 1;
    }
}

enum PhaseOne {
    Feasible(DVector<f64>),
    Infeasible { bound: f64, gap: f64 },
    Undetermined(SolveStatus, f64),
}

fn phase_one(form: &StdForm, settings: &SolverSettings, steps: &mut usize) -> PhaseOne {
    let n = form.nvars;
    let s_idx = n;
    let mut blocks: Vec<Block> = form.blocks.clone();
    if let Some(g) = &form.logdet {
        blocks.push(g.clone());
    }
    if blocks.is_empty() {
        return PhaseOne::Feasible(DVector::zeros(n));
    }
    for b in blocks.iter_mut() {
        let d = b.dim();
        b.coeffs.push((s_idx, -DMatrix::identity(d, d)));
    }
    let mut linear = DVector::zeros(n + 1);
    linear[s_idx] = 1.0;
    let aux = StdForm {
        nvars: n + 1,
        offsets: Vec::new(),
        blocks,
        linear,
        logdet: None,
        boxed: n,
        bound: form.bound,
    };

    let mut y = DVector::zeros(n + 1);
    let lmin = aux
        .blocks
        .iter()
        .map(|b| b.min_eigenvalue(&y))
        .fold(f64::INFINITY, f64::min);
    y[s_idx] = lmin - 1.0_f64.max(0.1 * lmin.abs());

    let m = aux.barrier_degree();
    let mut t = 1.0 / (1.0 + lmin.abs());
    for _ in 0..MAX_OUTER {
        match center(&aux, &mut y, t, settings, steps) {
            Ok(()) => {}
            Err(CenterError::IterationLimit) => {
                return PhaseOne::Undetermined(SolveStatus::IterationLimit, m / t)
            }
            Err(CenterError::Stalled) => {
                return PhaseOne::Undetermined(SolveStatus::Inaccurate, m / t)
            }
        }
        let s = y[s_idx];
        let gap = m / t;
        if s > 0.0 {
            return PhaseOne::Feasible(y.rows(0, n).into_owned());
        }
        // The bound is only trusted once the gap is small against the margin,
        // so a slightly inexact centering cannot flip its sign.
        if s + gap < -settings.tolerance || (s + 2.0 * gap < 0.0 && s + gap < -1e-14) {
            return PhaseOne::Infeasible {
                bound: s + gap,
                gap,
            };
        }
        if gap < 1e-3 * settings.tolerance {
            // Margin converged to zero: feasible set (if any) has no interior.
            return PhaseOne::Undetermined(SolveStatus::Inaccurate, gap);
        }
        log::trace!("phase I: t = {t:e}, margin = {s:e}, bound = {:e}", s + gap);
        t *= PATH_FACTOR;
    }
    PhaseOne::Undetermined(SolveStatus::IterationLimit, m / t)
}

type PhaseTwoFailure = (DVector<f64>, f64, SolveStatus);

fn phase_two(
    form: &StdForm,
    mut y: DVector<f64>,
    settings: &SolverSettings,
    steps: &mut usize,
) -> Result<(DVector<f64>, f64), PhaseTwoFailure> {
    let m = form.barrier_degree();
    let mut t = 1.0;
    let mut last_good = y.clone();
    for _ in 0..MAX_OUTER {
        match center(form, &mut y, t, settings, steps) {
            Ok(()) => last_good = y.clone(),
            Err(e) => {
                let status = match e {
                    CenterError::IterationLimit => SolveStatus::IterationLimit,
                    CenterError::Stalled => SolveStatus::Inaccurate,
                };
                return Err((last_good, m / t, status));
            }
        }
        let obj = form.linear_value(&y)
            + form
                .logdet
                .as_ref()
                .and_then(|g| log_det(g.at(&y)))
                .unwrap_or(0.0);
        let gap = m / t;
        log::debug!("phase II: t = {t:e}, objective = {obj:.12e}, gap bound = {gap:e}");
        if gap <= settings.tolerance * obj.abs().max(1.0) {
            return Ok((y, gap));
        }
        t *= PATH_FACTOR;
    }
    Err((last_good, m / t, SolveStatus::IterationLimit))
}
