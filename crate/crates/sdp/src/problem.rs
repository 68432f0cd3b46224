//! Symbolic block LMIs over named matrix variables.
//!
//! Every constraint is a symmetric block matrix whose blocks are affine
//! expressions `C + Σ Lₖ·Vₖ·Rₖ` (or `Lₖ·Vₖᵀ·Rₖ`) in the declared variables.
//! Only the upper block triangle is stored; the lower triangle is defined as
//! its transpose, so an assembled constraint is symmetric by construction.

use std::collections::BTreeMap;
use std::ops::{Add, Mul, Neg, Sub};

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::SdpError;

/// Handle to a declared decision variable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VarId(pub(crate) usize);

impl VarId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VarKind {
    Symmetric(usize),
    Rectangular(usize, usize),
}

impl VarKind {
    pub fn shape(&self) -> (usize, usize) {
        match *self {
            VarKind::Symmetric(n) => (n, n),
            VarKind::Rectangular(r, c) => (r, c),
        }
    }

    /// Number of free scalars behind the variable.
    pub fn scalar_count(&self) -> usize {
        match *self {
            VarKind::Symmetric(n) => n * (n + 1) / 2,
            VarKind::Rectangular(r, c) => r * c,
        }
    }

    /// Basis matrix for the `k`-th free scalar.
    pub(crate) fn basis(&self, k: usize) -> DMatrix<f64> {
        match *self {
            VarKind::Symmetric(n) => {
                let (r, c) = upper_index(n, k);
                let mut e = DMatrix::zeros(n, n);
                e[(r, c)] = 1.0;
                e[(c, r)] = 1.0;
                e
            }
            VarKind::Rectangular(rows, cols) => {
                let mut e = DMatrix::zeros(rows, cols);
                e[(k / cols, k % cols)] = 1.0;
                e
            }
        }
    }

    /// Packs the scalars of `m` in basis order.
    #[cfg(test)]
    pub(crate) fn pack(&self, m: &DMatrix<f64>, out: &mut Vec<f64>) {
        match *self {
            VarKind::Symmetric(n) => {
                for r in 0..n {
                    for c in r..n {
                        out.push(m[(r, c)]);
                    }
                }
            }
            VarKind::Rectangular(rows, cols) => {
                for r in 0..rows {
                    for c in 0..cols {
                        out.push(m[(r, c)]);
                    }
                }
            }
        }
    }

    pub(crate) fn unpack(&self, y: &[f64]) -> DMatrix<f64> {
        match *self {
            VarKind::Symmetric(n) => {
                let mut m = DMatrix::zeros(n, n);
                let mut k = 0;
                for r in 0..n {
                    for c in r..n {
                        m[(r, c)] = y[k];
                        m[(c, r)] = y[k];
                        k += 1;
                    }
                }
                m
            }
            VarKind::Rectangular(rows, cols) => DMatrix::from_row_slice(rows, cols, y),
        }
    }
}

/// Row/column of the `k`-th upper-triangular entry (row-major) of an n×n matrix.
fn upper_index(n: usize, mut k: usize) -> (usize, usize) {
    for r in 0..n {
        let len = n - r;
        if k < len {
            return (r, r + k);
        }
        k -= len;
    }
    panic!("basis index out of range");
}

#[derive(Debug, Clone)]
pub struct VarDecl {
    pub name: String,
    pub kind: VarKind,
}

#[derive(Debug, Clone)]
struct Term {
    var: VarId,
    var_shape: (usize, usize),
    left: DMatrix<f64>,
    right: DMatrix<f64>,
    transposed: bool,
}

impl Term {
    fn eval(&self, value: &DMatrix<f64>) -> DMatrix<f64> {
        if self.transposed {
            &self.left * value.transpose() * &self.right
        } else {
            &self.left * value * &self.right
        }
    }
}

/// Affine matrix expression in the problem variables.
#[derive(Debug, Clone)]
pub struct AffineExpr {
    rows: usize,
    cols: usize,
    constant: DMatrix<f64>,
    terms: Vec<Term>,
}

impl AffineExpr {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            constant: DMatrix::zeros(rows, cols),
            terms: Vec::new(),
        }
    }

    pub fn constant(m: DMatrix<f64>) -> Self {
        Self {
            rows: m.nrows(),
            cols: m.ncols(),
            constant: m,
            terms: Vec::new(),
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::constant(DMatrix::identity(n, n))
    }

    pub fn scalar(v: f64) -> Self {
        Self::constant(DMatrix::from_element(1, 1, v))
    }

    fn variable(var: VarId, kind: VarKind) -> Self {
        let (r, c) = kind.shape();
        Self {
            rows: r,
            cols: c,
            constant: DMatrix::zeros(r, c),
            terms: vec![Term {
                var,
                var_shape: (r, c),
                left: DMatrix::identity(r, r),
                right: DMatrix::identity(c, c),
                transposed: false,
            }],
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_constant(&self) -> bool {
        self.terms.is_empty()
    }

    /// `m · self`
    pub fn left_mul(&self, m: &DMatrix<f64>) -> Self {
        assert_eq!(m.ncols(), self.rows, "left_mul: dimension mismatch");
        Self {
            rows: m.nrows(),
            cols: self.cols,
            constant: m * &self.constant,
            terms: self
                .terms
                .iter()
                .map(|t| Term {
                    left: m * &t.left,
                    ..t.clone()
                })
                .collect(),
        }
    }

    /// `self · m`
    pub fn right_mul(&self, m: &DMatrix<f64>) -> Self {
        assert_eq!(m.nrows(), self.cols, "right_mul: dimension mismatch");
        Self {
            rows: self.rows,
            cols: m.ncols(),
            constant: &self.constant * m,
            terms: self
                .terms
                .iter()
                .map(|t| Term {
                    right: &t.right * m,
                    ..t.clone()
                })
                .collect(),
        }
    }

    /// `mᵀ · self · m`
    pub fn congruence(&self, m: &DMatrix<f64>) -> Self {
        self.left_mul(&m.transpose()).right_mul(m)
    }

    pub fn transpose(&self) -> Self {
        Self {
            rows: self.cols,
            cols: self.rows,
            constant: self.constant.transpose(),
            terms: self
                .terms
                .iter()
                .map(|t| Term {
                    var: t.var,
                    var_shape: t.var_shape,
                    left: t.right.transpose(),
                    right: t.left.transpose(),
                    transposed: !t.transposed,
                })
                .collect(),
        }
    }

    pub fn scale(&self, k: f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            constant: &self.constant * k,
            terms: self
                .terms
                .iter()
                .map(|t| Term {
                    left: &t.left * k,
                    ..t.clone()
                })
                .collect(),
        }
    }

    pub fn vars(&self) -> impl Iterator<Item = VarId> + '_ {
        self.terms.iter().map(|t| t.var)
    }

    /// Value of the expression at `values` (indexed by `VarId`).
    pub fn evaluate(&self, values: &[DMatrix<f64>]) -> DMatrix<f64> {
        let mut out = self.constant.clone();
        for t in &self.terms {
            out += t.eval(&values[t.var.0]);
        }
        out
    }

    /// Linear part only, with a single variable set to `value` and all others zero.
    fn linear_in(&self, var: VarId, value: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.rows, self.cols);
        for t in self.terms.iter().filter(|t| t.var == var) {
            out += t.eval(value);
        }
        out
    }
}

impl Add for AffineExpr {
    type Output = AffineExpr;
    fn add(mut self, rhs: AffineExpr) -> AffineExpr {
        assert_eq!(self.shape(), rhs.shape(), "add: dimension mismatch");
        self.constant += rhs.constant;
        self.terms.extend(rhs.terms);
        self
    }
}

impl Sub for AffineExpr {
    type Output = AffineExpr;
    fn sub(self, rhs: AffineExpr) -> AffineExpr {
        self + (-rhs)
    }
}

impl Neg for AffineExpr {
    type Output = AffineExpr;
    fn neg(self) -> AffineExpr {
        self.scale(-1.0)
    }
}

impl Mul<f64> for AffineExpr {
    type Output = AffineExpr;
    fn mul(self, k: f64) -> AffineExpr {
        self.scale(k)
    }
}

/// A single constraint `F(vars) ⪰ 0` with block structure.
#[derive(Debug, Clone)]
pub struct Lmi {
    pub label: String,
    sizes: Vec<usize>,
    blocks: BTreeMap<(usize, usize), AffineExpr>,
}

impl Lmi {
    pub fn new(label: impl Into<String>, sizes: Vec<usize>) -> Self {
        Self {
            label: label.into(),
            sizes,
            blocks: BTreeMap::new(),
        }
    }

    /// A constraint made of a single (symmetric) block.
    pub fn single(label: impl Into<String>, expr: AffineExpr) -> Self {
        let (r, c) = expr.shape();
        assert_eq!(r, c, "single-block LMI must be square");
        Self::new(label, vec![r]).with_block(0, 0, expr)
    }

    /// Sets block `(i, j)` of the upper block triangle (`i ≤ j`).
    pub fn with_block(mut self, i: usize, j: usize, expr: AffineExpr) -> Self {
        assert!(i <= j, "only upper-triangular blocks are stored");
        assert_eq!(
            expr.shape(),
            (self.sizes[i], self.sizes[j]),
            "block ({i},{j}) of `{}` has the wrong shape",
            self.label
        );
        self.blocks.insert((i, j), expr);
        self
    }

    pub fn block_sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn block(&self, i: usize, j: usize) -> Option<&AffineExpr> {
        self.blocks.get(&(i, j))
    }

    pub fn dim(&self) -> usize {
        self.sizes.iter().sum()
    }

    fn offsets(&self) -> Vec<usize> {
        let mut acc = 0;
        self.sizes
            .iter()
            .map(|s| {
                let o = acc;
                acc += s;
                o
            })
            .collect()
    }

    /// Assembles the full symmetric matrix from per-block values.
    fn assemble(&self, mut block_value: impl FnMut(&AffineExpr) -> DMatrix<f64>) -> DMatrix<f64> {
        let n = self.dim();
        let offs = self.offsets();
        let mut m = DMatrix::zeros(n, n);
        for (&(i, j), expr) in &self.blocks {
            let b = block_value(expr);
            let (oi, oj) = (offs[i], offs[j]);
            for r in 0..b.nrows() {
                let c0 = if i == j { r } else { 0 };
                for c in c0..b.ncols() {
                    m[(oi + r, oj + c)] = b[(r, c)];
                    m[(oj + c, oi + r)] = b[(r, c)];
                }
            }
        }
        m
    }

    pub fn evaluate(&self, values: &[DMatrix<f64>]) -> DMatrix<f64> {
        self.assemble(|e| e.evaluate(values))
    }

    pub(crate) fn constant_part(&self) -> DMatrix<f64> {
        self.assemble(|e| e.constant.clone())
    }

    pub(crate) fn linear_part(&self, var: VarId, value: &DMatrix<f64>) -> DMatrix<f64> {
        self.assemble(|e| e.linear_in(var, value))
    }

    pub(crate) fn vars(&self) -> Vec<VarId> {
        let mut v: Vec<VarId> = self.blocks.values().flat_map(|e| e.vars()).collect();
        v.sort();
        v.dedup();
        v
    }
}

#[derive(Debug, Clone)]
pub enum Objective {
    Feasibility,
    /// maximize Σ ⟨Cₖ, Vₖ⟩
    MaximizeLinear(Vec<(VarId, DMatrix<f64>)>),
    /// maximize log det V for a symmetric variable V
    MaximizeLogDet(VarId),
}

/// Result of evaluating one constraint at a point.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintCheck {
    pub label: String,
    pub min_eigenvalue: f64,
    /// max(1, spectral radius of the evaluated matrix)
    pub scale: f64,
}

impl ConstraintCheck {
    pub fn satisfied(&self, rel_tol: f64) -> bool {
        self.min_eigenvalue >= -rel_tol * self.scale
    }
}

/// A set of block LMIs over named variables, plus an objective.
#[derive(Debug, Clone)]
pub struct LmiProblem {
    vars: Vec<VarDecl>,
    constraints: Vec<Lmi>,
    objective: Objective,
}

impl Default for LmiProblem {
    fn default() -> Self {
        Self::new()
    }
}

impl LmiProblem {
    pub fn new() -> Self {
        Self {
            vars: Vec::new(),
            constraints: Vec::new(),
            objective: Objective::Feasibility,
        }
    }

    fn declare(&mut self, name: &str, kind: VarKind) -> VarId {
        assert!(
            self.var_by_name(name).is_none(),
            "variable `{name}` declared twice"
        );
        self.vars.push(VarDecl {
            name: name.to_string(),
            kind,
        });
        VarId(self.vars.len() - 1)
    }

    pub fn symmetric(&mut self, name: &str, n: usize) -> VarId {
        self.declare(name, VarKind::Symmetric(n))
    }

    pub fn rectangular(&mut self, name: &str, rows: usize, cols: usize) -> VarId {
        self.declare(name, VarKind::Rectangular(rows, cols))
    }

    /// Expression consisting of the bare variable.
    pub fn var(&self, id: VarId) -> AffineExpr {
        AffineExpr::variable(id, self.vars[id.0].kind)
    }

    pub fn var_by_name(&self, name: &str) -> Option<VarId> {
        self.vars.iter().position(|v| v.name == name).map(VarId)
    }

    pub fn variables(&self) -> &[VarDecl] {
        &self.vars
    }

    pub fn constraints(&self) -> &[Lmi] {
        &self.constraints
    }

    pub fn objective(&self) -> &Objective {
        &self.objective
    }

    pub fn set_objective(&mut self, objective: Objective) {
        self.objective = objective;
    }

    pub fn add(&mut self, lmi: Lmi) {
        self.constraints.push(lmi);
    }

    /// `expr ⪰ 0` for a square symmetric expression.
    pub fn require_psd(&mut self, label: impl Into<String>, expr: AffineExpr) {
        self.add(Lmi::single(label, expr));
    }

    /// `V ⪰ eps·I` for a symmetric variable.
    pub fn require_lower_bound(&mut self, id: VarId, eps: f64) {
        let n = match self.vars[id.0].kind {
            VarKind::Symmetric(n) => n,
            VarKind::Rectangular(..) => panic!("lower bound on a rectangular variable"),
        };
        let label = format!("{} >= {eps:e} I", self.vars[id.0].name);
        self.require_psd(label, self.var(id) - AffineExpr::identity(n).scale(eps));
    }

    /// Zero matrices for every variable.
    pub fn zero_point(&self) -> Vec<DMatrix<f64>> {
        self.vars
            .iter()
            .map(|v| {
                let (r, c) = v.kind.shape();
                DMatrix::zeros(r, c)
            })
            .collect()
    }

    /// Converts a name-keyed point into `VarId` order.
    pub fn point_from_map(
        &self,
        map: &BTreeMap<String, DMatrix<f64>>,
    ) -> Result<Vec<DMatrix<f64>>, SdpError> {
        self.vars
            .iter()
            .map(|v| {
                map.get(&v.name)
                    .cloned()
                    .ok_or_else(|| SdpError::UnknownVariable(v.name.clone()))
            })
            .collect()
    }

    /// Structural validation: declared variables, consistent shapes, symmetric diagonal blocks.
    pub fn validate(&self) -> Result<(), SdpError> {
        for lmi in &self.constraints {
            for (&(i, j), expr) in &lmi.blocks {
                for t in &expr.terms {
                    let decl = self.vars.get(t.var.0).ok_or(SdpError::UndeclaredVariable {
                        constraint: lmi.label.clone(),
                        var: t.var.0,
                    })?;
                    if decl.kind.shape() != t.var_shape {
                        return Err(SdpError::ShapeMismatch {
                            constraint: lmi.label.clone(),
                            detail: format!(
                                "variable `{}` used with shape {:?}, declared {:?}",
                                decl.name,
                                t.var_shape,
                                decl.kind.shape()
                            ),
                        });
                    }
                }
                if i == j {
                    self.check_block_symmetry(lmi, i, expr)?;
                }
            }
        }
        match &self.objective {
            Objective::MaximizeLogDet(id) => match self.vars.get(id.0) {
                Some(VarDecl {
                    kind: VarKind::Symmetric(_),
                    ..
                }) => {}
                Some(v) => return Err(SdpError::LogDetTargetNotSymmetric(v.name.clone())),
                None => return Err(SdpError::UnknownVariable(format!("#{}", id.0))),
            },
            Objective::MaximizeLinear(terms) => {
                for (id, c) in terms {
                    let v = self
                        .vars
                        .get(id.0)
                        .ok_or_else(|| SdpError::UnknownVariable(format!("#{}", id.0)))?;
                    if v.kind.shape() != c.shape() {
                        return Err(SdpError::ShapeMismatch {
                            constraint: "objective".into(),
                            detail: format!("coefficient for `{}` has wrong shape", v.name),
                        });
                    }
                }
            }
            Objective::Feasibility => {}
        }
        Ok(())
    }

    fn check_block_symmetry(
        &self,
        lmi: &Lmi,
        block: usize,
        expr: &AffineExpr,
    ) -> Result<(), SdpError> {
        let asym = |m: &DMatrix<f64>| {
            let d = (m - m.transpose()).amax();
            (d, d > 1e-12 * (1.0 + m.amax()))
        };
        let (dev, bad) = asym(&expr.constant);
        if bad {
            return Err(SdpError::AsymmetricConstraint {
                constraint: lmi.label.clone(),
                block,
                deviation: dev,
            });
        }
        let mut vars: Vec<VarId> = expr.vars().collect();
        vars.sort();
        vars.dedup();
        for var in vars {
            let kind = self.vars[var.0].kind;
            for k in 0..kind.scalar_count() {
                let (dev, bad) = asym(&expr.linear_in(var, &kind.basis(k)));
                if bad {
                    return Err(SdpError::AsymmetricConstraint {
                        constraint: lmi.label.clone(),
                        block,
                        deviation: dev,
                    });
                }
            }
        }
        Ok(())
    }

    /// Independent eigenvalue evaluation of every constraint at `point`.
    pub fn check_point(&self, point: &[DMatrix<f64>]) -> Vec<ConstraintCheck> {
        self.constraints
            .iter()
            .map(|lmi| {
                let m = lmi.evaluate(point);
                if m.nrows() == 0 {
                    return ConstraintCheck {
                        label: lmi.label.clone(),
                        min_eigenvalue: 0.0,
                        scale: 1.0,
                    };
                }
                let eig = SymmetricEigen::new(m).eigenvalues;
                let min = eig.min();
                let radius = eig.amax();
                ConstraintCheck {
                    label: lmi.label.clone(),
                    min_eigenvalue: min,
                    scale: radius.max(1.0),
                }
            })
            .collect()
    }
}
