//! Invariance certificates for ellipsoids under bounded disturbances, and the
//! linear state/input constraint checks that go with them.

use nalgebra::{DMatrix, DVector};
use pcis_sdp::{AffineExpr, Lmi, LmiProblem, SolveStatus, SolverSettings};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ellipsoid::{psd_inv_sqrt, Ellipsoid};
use crate::error::{check_dim, check_probability, Error, Result};
use crate::gpssm::UncertaintyBounds;
use crate::linalg::{random_unit_vector, require_square};

/// Lower bound imposed on every certificate matrix.
pub const CERTIFICATE_FLOOR: f64 = 1e-8;
/// Shape used for a disturbance channel that carries nothing.
pub const ABSENT_CHANNEL_EPS: f64 = 1e-12;
/// Relative eigenvalue slack accepted when re-checking a returned certificate.
pub const VERIFY_RECHECK_TOL: f64 = 1e-9;
/// Slack on `βᵀP⁻¹β ≤ 1` style checks.
pub const CONSTRAINT_TOL: f64 = 1e-7;

/// `z⁺ = 𝒜z + ℬd + 𝒞v` with `d ∈ E(μ_d, Σ_d)` and `v ∈ E(μ_v, Σ_v)`.
///
/// A channel may have dimension zero, in which case it is left out of every LMI.
#[derive(Debug, Clone, PartialEq)]
pub struct DisturbedLinearSystem {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    c: DMatrix<f64>,
    d_set: Ellipsoid,
    v_set: Ellipsoid,
    d_precision: DMatrix<f64>,
    v_precision: DMatrix<f64>,
}

fn precision(e: &Ellipsoid, what: &str) -> Result<DMatrix<f64>> {
    if e.dim() == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    e.shape()
        .clone()
        .cholesky()
        .map(|c| c.inverse())
        .ok_or_else(|| Error::Singular(format!("{what} shape must be positive definite")))
}

impl DisturbedLinearSystem {
    pub fn new(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        c: DMatrix<f64>,
        d_set: Ellipsoid,
        v_set: Ellipsoid,
    ) -> Result<Self> {
        require_square("system matrix", &a)?;
        let n = a.nrows();
        check_dim("disturbance matrix rows", n, b.nrows())?;
        check_dim("noise matrix rows", n, c.nrows())?;
        check_dim("disturbance set", b.ncols(), d_set.dim())?;
        check_dim("noise set", c.ncols(), v_set.dim())?;
        if a.iter()
            .chain(b.iter())
            .chain(c.iter())
            .any(|v| !v.is_finite())
        {
            return Err(Error::InvalidArgument(
                "system matrices have non-finite entries".into(),
            ));
        }
        let d_precision = precision(&d_set, "disturbance set")?;
        let v_precision = precision(&v_set, "noise set")?;
        Ok(Self {
            a,
            b,
            c,
            d_set,
            v_set,
            d_precision,
            v_precision,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn c(&self) -> &DMatrix<f64> {
        &self.c
    }

    pub fn d_set(&self) -> &Ellipsoid {
        &self.d_set
    }

    pub fn v_set(&self) -> &Ellipsoid {
        &self.v_set
    }

    pub fn step(&self, z: &DVector<f64>, d: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
        &self.a * z + &self.b * d + &self.c * v
    }
}

/// Block layout `[z, d, v, 1]` of the invariance LMI, with empty channels dropped.
struct RisBlocks {
    sizes: Vec<usize>,
    blocks: Vec<(usize, usize, AffineExpr)>,
    offset: usize,
}

/// Builds the S-procedure blocks of `−G₁ + α G₀ ⪰ 0`, where
/// `G₁ = V(z⁺) − V(z)` and `G₀ = −V(z) + ½D(d) + ½W(v)` with
/// `V(z) = (z−c)ᵀ𝒫(z−c)`, `D(d) = (d−μ_d)ᵀΣ_d⁻¹(d−μ_d)` and likewise for `W`.
fn ris_blocks(
    sys: &DisturbedLinearSystem,
    c: &DVector<f64>,
    alpha: f64,
    p: &AffineExpr,
) -> RisBlocks {
    let a = &sys.a;
    let at = a.transpose();
    let cm = DMatrix::from_column_slice(c.len(), 1, c.as_slice());
    let p_c = p.right_mul(&cm);
    let at_p = p.left_mul(&at);

    let mut sizes = vec![sys.state_dim()];
    let mut blocks = vec![(0, 0, p.scale(1.0 - alpha) - p.congruence(a))];
    // Constant term: α(½μ_dᵀΣ_d⁻¹μ_d + ½μ_vᵀΣ_v⁻¹μ_v) − α cᵀ𝒫c.
    let mut offset_const = 0.0;
    let z_to_one = p_c.scale(alpha - 1.0) + at_p.right_mul(&cm);

    let channels = [
        (&sys.b, &sys.d_set, &sys.d_precision),
        (&sys.c, &sys.v_set, &sys.v_precision),
    ];
    let mut present: Vec<(usize, &DMatrix<f64>)> = Vec::new();
    for (mat, set, prec) in channels {
        if set.dim() == 0 {
            continue;
        }
        let idx = sizes.len();
        sizes.push(set.dim());
        let mt = mat.transpose();
        let mu = set.center();
        blocks.push((0, idx, -(at_p.right_mul(mat))));
        blocks.push((
            idx,
            idx,
            AffineExpr::constant(prec * (0.5 * alpha)) - p.congruence(mat),
        ));
        let prec_mu = prec * mu;
        let mu_col = DMatrix::from_column_slice(mu.len(), 1, (prec_mu * (-0.5 * alpha)).as_slice());
        present.push((idx, mat));
        blocks.push((
            idx,
            usize::MAX,
            p_c.left_mul(&mt) + AffineExpr::constant(mu_col),
        ));
        offset_const += 0.5 * alpha * mu.dot(&(prec * mu));
    }
    for (i, &(ii, mi)) in present.iter().enumerate() {
        for &(jj, mj) in &present[i + 1..] {
            blocks.push((ii, jj, -(p.left_mul(&mi.transpose()).right_mul(mj))));
        }
    }
    let offset = sizes.len();
    sizes.push(1);
    for blk in blocks.iter_mut() {
        if blk.1 == usize::MAX {
            blk.1 = offset;
        }
    }
    blocks.push((0, offset, z_to_one));
    blocks.push((
        offset,
        offset,
        AffineExpr::scalar(offset_const) - p.congruence(&cm).scale(alpha),
    ));
    RisBlocks {
        sizes,
        blocks,
        offset,
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha.is_finite() && alpha >= 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "alpha must be finite and nonnegative, got {alpha}"
        )))
    }
}

/// LMI in the symmetric variable `P` whose feasibility certifies that
/// `E(c, P⁻¹)` is robustly positively invariant for `sys`.
pub fn build_ris_lmi(
    sys: &DisturbedLinearSystem,
    c: &DVector<f64>,
    alpha: f64,
) -> Result<LmiProblem> {
    check_alpha(alpha)?;
    check_dim("ellipsoid center", sys.state_dim(), c.len())?;
    let mut problem = LmiProblem::new();
    let pid = problem.symmetric("P", sys.state_dim());
    let rb = ris_blocks(sys, c, alpha, &problem.var(pid));
    let mut lmi = Lmi::new("invariance", rb.sizes);
    for (i, j, e) in rb.blocks {
        lmi = lmi.with_block(i, j, e);
    }
    problem.add(lmi);
    problem.require_lower_bound(pid, CERTIFICATE_FLOOR);
    Ok(problem)
}

/// Disturbed system seen by the closed loop `x⁺ = (A+BL)x + μ̂ + w`: the
/// mean-error channel `E(0, φI)` and the stacked noise channel
/// `E(0, (n/(1−p))Q̄)` entering through `[I I]`.
pub fn closed_loop_system(
    bounds: &UncertaintyBounds,
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    l: &DMatrix<f64>,
    p: f64,
) -> Result<DisturbedLinearSystem> {
    check_probability(p)?;
    require_square("A", a)?;
    let n = a.nrows();
    check_dim("noise bounds", n, bounds.state_dim())?;
    check_dim("B rows", n, b.nrows())?;
    check_dim("gain rows", b.ncols(), l.nrows())?;
    check_dim("gain columns", n, l.ncols())?;
    let a_bl = a + b * l;
    let q_bar = bounds.q_bar();
    if q_bar.diagonal().iter().any(|v| *v <= 0.0) {
        return Err(Error::Singular(
            "stacked noise covariance BlkDiag(Σ̂, Q) has a zero diagonal entry".into(),
        ));
    }
    let v_set = Ellipsoid::centered(q_bar * (n as f64 / (1.0 - p)))?;
    let (b_d, d_set) = if bounds.phi > 0.0 {
        (
            DMatrix::identity(n, n),
            Ellipsoid::centered(DMatrix::identity(n, n) * bounds.phi)?,
        )
    } else {
        (
            DMatrix::zeros(n, 0),
            Ellipsoid::centered(DMatrix::zeros(0, 0))?,
        )
    };
    let mut stack = DMatrix::zeros(n, 2 * n);
    stack.view_mut((0, 0), (n, n)).fill_with_identity();
    stack.view_mut((0, n), (n, n)).fill_with_identity();
    DisturbedLinearSystem::new(a_bl, b_d, stack, d_set, v_set)
}

/// Probabilistic invariance LMI for the closed loop: the general builder with
/// a zero center and zero-mean channels, whose constant row then vanishes.
pub fn build_gpssm_verification_lmi(
    bounds: &UncertaintyBounds,
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    l: &DMatrix<f64>,
    p: f64,
    alpha: f64,
) -> Result<LmiProblem> {
    check_alpha(alpha)?;
    let sys = closed_loop_system(bounds, a, b, l, p)?;
    let n = sys.state_dim();
    let mut problem = LmiProblem::new();
    let pid = problem.symmetric("P", n);
    let rb = ris_blocks(&sys, &DVector::zeros(n), alpha, &problem.var(pid));
    let mut lmi = Lmi::new("closed-loop invariance", rb.sizes[..rb.offset].to_vec());
    for (i, j, e) in rb.blocks {
        if i == rb.offset || j == rb.offset {
            debug_assert!(e.evaluate(&[DMatrix::identity(n, n)]).amax() == 0.0);
            continue;
        }
        lmi = lmi.with_block(i, j, e);
    }
    problem.add(lmi);
    problem.require_lower_bound(pid, CERTIFICATE_FLOOR);
    Ok(problem)
}

/// `V = E(0, (n_z/(1−p)) Σ̄ᵥ)`: a disturbance set which, used in place of a
/// robust one, yields a certificate holding with probability `p`.
pub fn pis_from_ris_substitution(
    cov_bound: &DMatrix<f64>,
    p: f64,
    n_z: usize,
) -> Result<Ellipsoid> {
    check_probability(p)?;
    Ellipsoid::centered(cov_bound * (n_z as f64 / (1.0 - p)))
}

/// `X = {x : βᵢᵀx ≤ 1}` and `U = {u : ζⱼᵀu ≤ 1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolytopeConstraints {
    state_rows: Vec<DVector<f64>>,
    input_rows: Vec<DVector<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateRow {
    pub beta: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputRow {
    pub zeta: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxDocument {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ConstraintsDocument {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub state: Vec<StateRow>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub input: Vec<InputRow>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub box_state: Option<BoxDocument>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub box_input: Option<BoxDocument>,
}

/// Rows `e_i/upper_i` and `−e_i/|lower_i|`; infinite bounds give no row.
fn box_rows(lower: &[f64], upper: &[f64], what: &str) -> Result<Vec<DVector<f64>>> {
    if lower.len() != upper.len() {
        return Err(Error::InvalidArgument(format!(
            "{what} box has {} lower and {} upper bounds",
            lower.len(),
            upper.len()
        )));
    }
    let n = lower.len();
    let mut rows = Vec::new();
    for i in 0..n {
        let (lo, hi) = (lower[i], upper[i]);
        if lo.is_nan() || hi.is_nan() || !(lo < 0.0 && hi > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "{what} box [{lo}, {hi}] in coordinate {} must contain the origin in its interior",
                i + 1
            )));
        }
        if hi.is_finite() {
            let mut r = DVector::zeros(n);
            r[i] = 1.0 / hi;
            rows.push(r);
        }
        if lo.is_finite() {
            let mut r = DVector::zeros(n);
            r[i] = 1.0 / lo;
            rows.push(r);
        }
    }
    Ok(rows)
}

impl PolytopeConstraints {
    pub fn new(state_rows: Vec<DVector<f64>>, input_rows: Vec<DVector<f64>>) -> Result<Self> {
        for (rows, what) in [(&state_rows, "state"), (&input_rows, "input")] {
            if let Some(first) = rows.first() {
                if rows.iter().any(|r| r.len() != first.len()) {
                    return Err(Error::InvalidArgument(format!(
                        "{what} rows have different lengths"
                    )));
                }
            }
            if rows.iter().flat_map(|r| r.iter()).any(|v| !v.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "{what} rows must be finite"
                )));
            }
        }
        Ok(Self {
            state_rows,
            input_rows,
        })
    }

    /// Symmetric boxes `|x_i| ≤ x_bound_i`, `|u_j| ≤ u_bound_j`.
    pub fn symmetric_boxes(x_bound: &[f64], u_bound: &[f64]) -> Result<Self> {
        let neg = |v: &[f64]| v.iter().map(|b| -b).collect::<Vec<_>>();
        Self::new(
            box_rows(&neg(x_bound), x_bound, "state")?,
            box_rows(&neg(u_bound), u_bound, "input")?,
        )
    }

    pub fn state_rows(&self) -> &[DVector<f64>] {
        &self.state_rows
    }

    pub fn input_rows(&self) -> &[DVector<f64>] {
        &self.input_rows
    }

    pub fn is_empty(&self) -> bool {
        self.state_rows.is_empty() && self.input_rows.is_empty()
    }

    /// Checks the row lengths against the system dimensions.
    pub fn check_dims(&self, n: usize, m: usize) -> Result<()> {
        if let Some(r) = self.state_rows.first() {
            check_dim("state constraint rows", n, r.len())?;
        }
        if let Some(r) = self.input_rows.first() {
            check_dim("input constraint rows", m, r.len())?;
        }
        Ok(())
    }

    pub fn from_document(doc: &ConstraintsDocument) -> Result<Self> {
        let mut state: Vec<DVector<f64>> = doc
            .state
            .iter()
            .map(|r| DVector::from_vec(r.beta.clone()))
            .collect();
        let mut input: Vec<DVector<f64>> = doc
            .input
            .iter()
            .map(|r| DVector::from_vec(r.zeta.clone()))
            .collect();
        if let Some(bx) = &doc.box_state {
            state.extend(box_rows(&bx.lower, &bx.upper, "state")?);
        }
        if let Some(bx) = &doc.box_input {
            input.extend(box_rows(&bx.lower, &bx.upper, "input")?);
        }
        Self::new(state, input)
    }

    pub fn to_document(&self) -> ConstraintsDocument {
        ConstraintsDocument {
            state: self
                .state_rows
                .iter()
                .map(|r| StateRow {
                    beta: r.iter().copied().collect(),
                })
                .collect(),
            input: self
                .input_rows
                .iter()
                .map(|r| InputRow {
                    zeta: r.iter().copied().collect(),
                })
                .collect(),
            box_state: None,
            box_input: None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: ConstraintsDocument = serde_json::from_str(text)?;
        Self::from_document(&doc)
    }

    /// Whether `x` satisfies every state row (with slack `tol`).
    pub fn state_admissible(&self, x: &DVector<f64>, tol: f64) -> bool {
        self.state_rows.iter().all(|b| b.dot(x) <= 1.0 + tol)
    }

    pub fn input_admissible(&self, u: &DVector<f64>, tol: f64) -> bool {
        self.input_rows.iter().all(|z| z.dot(u) <= 1.0 + tol)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConstraintKind {
    State,
    Input,
}

/// `βᵀP⁻¹β` for a state row or `ζᵀLP⁻¹Lᵀζ` for an input row; the row holds
/// on the whole ellipsoid `E(0, P⁻¹)` when the value is at most one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintMargin {
    pub kind: ConstraintKind,
    pub index: usize,
    pub row: Vec<f64>,
    pub value: f64,
}

impl ConstraintMargin {
    pub fn satisfied(&self) -> bool {
        self.value <= 1.0 + CONSTRAINT_TOL
    }

    pub fn describe(&self) -> String {
        let (kind, sym) = match self.kind {
            ConstraintKind::State => ("state", "beta"),
            ConstraintKind::Input => ("input", "zeta"),
        };
        format!(
            "{kind} constraint {} ({sym} = {:?}): margin {:.6} {} 1",
            self.index + 1,
            self.row,
            self.value,
            if self.satisfied() { "<=" } else { ">" }
        )
    }
}

/// Per-row margins of `E(0, P⁻¹)` against the state rows and of its image
/// `L·E(0, P⁻¹)` against the input rows.
pub fn check_constraints(
    p: &DMatrix<f64>,
    l: &DMatrix<f64>,
    constraints: &PolytopeConstraints,
) -> Result<Vec<ConstraintMargin>> {
    require_square("certificate", p)?;
    let n = p.nrows();
    check_dim("gain columns", n, l.ncols())?;
    constraints.check_dims(n, l.nrows())?;
    let chol = p
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Singular("certificate P is not positive definite".into()))?;
    let quad = |v: &DVector<f64>| v.dot(&chol.solve(v));
    let mut out = Vec::new();
    for (i, beta) in constraints.state_rows.iter().enumerate() {
        out.push(ConstraintMargin {
            kind: ConstraintKind::State,
            index: i,
            row: beta.iter().copied().collect(),
            value: quad(beta),
        });
    }
    for (j, zeta) in constraints.input_rows.iter().enumerate() {
        out.push(ConstraintMargin {
            kind: ConstraintKind::Input,
            index: j,
            row: zeta.iter().copied().collect(),
            value: quad(&(l.transpose() * zeta)),
        });
    }
    Ok(out)
}

/// Adds `[[P, g],[gᵀ, 1]] ⪰ 0` (that is `gᵀP⁻¹g ≤ 1`) for every constraint row.
fn add_constraint_lmis(
    problem: &mut LmiProblem,
    l: &DMatrix<f64>,
    constraints: &PolytopeConstraints,
) {
    let pid = problem.var_by_name("P").expect("certificate variable");
    let p = problem.var(pid);
    let n = l.ncols();
    let rows = constraints
        .state_rows
        .iter()
        .map(|b| (ConstraintKind::State, b.clone()))
        .chain(
            constraints
                .input_rows
                .iter()
                .map(|z| (ConstraintKind::Input, l.transpose() * z)),
        );
    for (k, (kind, g)) in rows.enumerate() {
        let lmi = Lmi::new(format!("{kind:?} row {k}"), vec![n, 1])
            .with_block(0, 0, p.clone())
            .with_block(
                0,
                1,
                AffineExpr::constant(DMatrix::from_column_slice(n, 1, g.as_slice())),
            )
            .with_block(1, 1, AffineExpr::scalar(1.0));
        problem.add(lmi);
    }
}

/// 25 log-spaced and 25 evenly spaced multipliers in `[0.01, 0.99]`, sorted.
pub fn default_alpha_grid() -> Vec<f64> {
    let (lo, hi) = (0.01f64, 0.99f64);
    let count = 25;
    let mut grid: Vec<f64> = (0..count)
        .flat_map(|k| {
            let t = k as f64 / (count - 1) as f64;
            [
                (lo.ln() + t * (hi.ln() - lo.ln())).exp(),
                lo + t * (hi - lo),
            ]
        })
        .collect();
    grid.sort_by(f64::total_cmp);
    grid.dedup_by(|a, b| (*a - *b).abs() <= 1e-12);
    grid
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyOptions {
    pub alpha_grid: Vec<f64>,
    pub solver: SolverSettings,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            alpha_grid: default_alpha_grid(),
            solver: SolverSettings {
                recheck_tolerance: VERIFY_RECHECK_TOL,
                ..SolverSettings::default()
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    /// An invariant ellipsoid exists and lies inside the constraints.
    Certified,
    /// Invariant ellipsoids exist, but none found inside the constraints.
    ConstraintViolation,
    /// The solver proved infeasibility at every attempted multiplier.
    InfeasibleOnGrid,
    /// No certificate found and at least one solve ended inconclusively.
    Undetermined,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaAttempt {
    pub alpha: f64,
    pub with_constraints: bool,
    pub status: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerificationReport {
    pub verdict: Verdict,
    pub alpha: Option<f64>,
    pub certificate: Option<DMatrix<f64>>,
    pub margins: Vec<ConstraintMargin>,
    pub attempts: Vec<AlphaAttempt>,
}

impl VerificationReport {
    pub fn violations(&self) -> impl Iterator<Item = &ConstraintMargin> {
        self.margins.iter().filter(|m| !m.satisfied())
    }
}

/// Scans the multiplier grid for a certificate `P` of probabilistic
/// invariance of `E(0, P⁻¹)` under `u = Lx`.
///
/// With constraints, the search first asks for a `P` whose ellipsoid also
/// satisfies them; failing that it looks for any invariant ellipsoid and
/// reports how far it is from the constraints.
pub fn verify_controller(
    bounds: &UncertaintyBounds,
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    l: &DMatrix<f64>,
    p: f64,
    constraints: Option<&PolytopeConstraints>,
    options: &VerifyOptions,
) -> Result<VerificationReport> {
    if options.alpha_grid.is_empty() {
        return Err(Error::InvalidArgument("alpha grid is empty".into()));
    }
    if let Some(bad) = options.alpha_grid.iter().find(|a| !(0.0..1.0).contains(*a)) {
        return Err(Error::InvalidArgument(format!(
            "alpha {bad} outside [0, 1)"
        )));
    }
    if let Some(c) = constraints {
        c.check_dims(a.nrows(), b.ncols())?;
    }
    let mut attempts = Vec::new();
    let mut inconclusive = false;
    let constrained = constraints.filter(|c| !c.is_empty());

    let mut scan = |with: Option<&PolytopeConstraints>| -> Result<Option<(f64, DMatrix<f64>)>> {
        for &alpha in &options.alpha_grid {
            let mut problem = build_gpssm_verification_lmi(bounds, a, b, l, p, alpha)?;
            if let Some(c) = with {
                add_constraint_lmis(&mut problem, l, c);
            }
            let out = pcis_sdp::solve(&problem, &options.solver)?;
            attempts.push(AlphaAttempt {
                alpha,
                with_constraints: with.is_some(),
                status: out.status.as_str().to_string(),
            });
            log::debug!("alpha {alpha:.4}: {}", out.status.as_str());
            match out.status {
                SolveStatus::Feasible => {
                    let pm = out.value("P").expect("feasible point").clone();
                    return Ok(Some((alpha, pm)));
                }
                SolveStatus::Infeasible => {}
                _ => inconclusive = true,
            }
        }
        Ok(None)
    };

    let mut found = scan(constrained)?;
    let mut verdict = Verdict::Certified;
    if found.is_none() && constrained.is_some() {
        found = scan(None)?;
        verdict = Verdict::ConstraintViolation;
    }
    let Some((alpha, pm)) = found else {
        return Ok(VerificationReport {
            verdict: if inconclusive {
                Verdict::Undetermined
            } else {
                Verdict::InfeasibleOnGrid
            },
            alpha: None,
            certificate: None,
            margins: Vec::new(),
            attempts,
        });
    };
    let margins = match constraints {
        Some(c) => check_constraints(&pm, l, c)?,
        None => Vec::new(),
    };
    if margins.iter().any(|m| !m.satisfied()) {
        verdict = Verdict::ConstraintViolation;
    }
    Ok(VerificationReport {
        verdict,
        alpha: Some(alpha),
        certificate: Some(pm),
        margins,
        attempts,
    })
}

fn sample_in<R: Rng + ?Sized>(set: &Ellipsoid, rng: &mut R) -> DVector<f64> {
    if set.dim() == 0 {
        return DVector::zeros(0);
    }
    if rng.random_bool(0.5) {
        set.sample_boundary(rng)
    } else {
        set.sample_uniform(rng)
    }
}

/// Brute-force check of quadratic boundedness: for sampled `z` on or outside
/// the boundary of `E(c, P⁻¹)` and admissible `d`, `v`, the successor must not
/// increase `(z−c)ᵀP(z−c)`.
pub fn sampled_invariance_oracle<R: Rng + ?Sized>(
    sys: &DisturbedLinearSystem,
    c: &DVector<f64>,
    p: &DMatrix<f64>,
    samples: usize,
    rng: &mut R,
) -> Result<bool> {
    let n = sys.state_dim();
    check_dim("ellipsoid center", n, c.len())?;
    check_dim("certificate", n, p.nrows())?;
    let root = psd_inv_sqrt(p)?;
    let v_of = |z: &DVector<f64>| {
        let e = z - c;
        e.dot(&(p * &e))
    };
    for _ in 0..samples {
        let radius = if rng.random_bool(0.5) {
            1.0
        } else {
            rng.random_range(1.0..3.0)
        };
        let z = c + &root * random_unit_vector(n, rng) * radius;
        let d = sample_in(&sys.d_set, rng);
        let v = sample_in(&sys.v_set, rng);
        let before = v_of(&z);
        let after = v_of(&sys.step(&z, &d, &v));
        if after > before * (1.0 + 1e-9) + 1e-12 {
            log::debug!("oracle violation: V(z) = {before}, V(z+) = {after}");
            return Ok(false);
        }
    }
    Ok(true)
}
