//! Narrow conic-optimization layer: symbolic block LMIs over named matrix
//! variables, and a dense barrier-method solver for feasibility, linear, and
//! log-determinant objectives.
//!
//! Every feasible outcome is re-checked by evaluating each constraint at the
//! returned point and computing its eigenvalues, independently of the solver
//! internals.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod error;
mod problem;
mod solver;

pub use error::SdpError;
pub use problem::{
    AffineExpr, ConstraintCheck, Lmi, LmiProblem, Objective, VarDecl, VarId, VarKind,
};
pub use solver::{maximize_logdet, solve, Residuals, SolveOutcome, SolveStatus, SolverSettings};
