//! Solver-neutral LP / MILP / convex-QP representations and reference
//! solvers.
//!
//! Everything here is self-contained: a bounded-variable revised primal
//! simplex for LPs, plain best-first branch-and-bound for MILPs, and an
//! ADMM method with an active-set polish step for convex QPs. No external
//! solver process or library is involved, so every run is reproducible.
//! [`check_lp_solution`] and friends re-verify any reported optimum from
//! the raw problem data, independent of solver internals.
//!
//! Problems are always minimization. Row and variable bounds are closed
//! intervals where `lower == upper` encodes an equality and infinities
//! encode one-sided or free constraints.

mod lp;
mod lpfmt;
mod milp;
mod qp;
mod verify;

pub use lp::{solve_lp, solve_lp_opts, LpOptions};
pub use lpfmt::{write_lp_text, write_qp_text};
pub use milp::{solve_milp, solve_milp_opts, MilpOptions};
pub use qp::{solve_qp, solve_qp_opts, PreparedQp, QpOptions};
pub use verify::{check_lp_solution, check_milp_solution, check_qp_solution, CheckReport};

use thiserror::Error;

// ---- tolerances ----
//
// One place for every numeric threshold the solvers rely on, so cross-module
// comparisons stay consistent.

/// Default primal/dual feasibility tolerance for LP and QP solves.
/// Residuals at a reported optimum are guaranteed below this.
pub const FEAS_TOL: f64 = 1e-7;

/// Default relative optimality gap at which branch-and-bound stops:
/// `(incumbent - best_bound) / max(1, |incumbent|)`.
pub const MILP_REL_GAP: f64 = 1e-6;

/// A relaxed binary counts as integral when within this of 0 or 1.
pub const INT_TOL: f64 = 1e-6;

/// Pivot elements smaller than this are treated as zero by the simplex;
/// also the threshold for "degenerate" steps when deciding to fall back to
/// Bland's rule.
pub const PIVOT_TOL: f64 = 1e-10;

// ---- problem types ----

/// Objective sense. Only minimization is supported; negate costs to
/// maximize.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Sense {
    #[default]
    Min,
}

/// A closed interval `[lower, upper]`; `lower == upper` is an equality,
/// infinite ends make it one-sided or free.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bound {
    pub lower: f64,
    pub upper: f64,
}

impl Bound {
    pub fn fixed(v: f64) -> Self {
        Self { lower: v, upper: v }
    }
    pub fn range(lower: f64, upper: f64) -> Self {
        Self { lower, upper }
    }
    pub fn at_least(lower: f64) -> Self {
        Self { lower, upper: f64::INFINITY }
    }
    pub fn at_most(upper: f64) -> Self {
        Self { lower: f64::NEG_INFINITY, upper }
    }
    pub fn free() -> Self {
        Self { lower: f64::NEG_INFINITY, upper: f64::INFINITY }
    }

    pub fn contains(&self, v: f64, tol: f64) -> bool {
        v >= self.lower - tol && v <= self.upper + tol
    }

    fn is_valid(&self) -> bool {
        !self.lower.is_nan() && !self.upper.is_nan() && self.lower <= self.upper
    }
}

/// `min cᵀx` subject to `row_bounds ≤ Ax ≤ row_bounds` and
/// `var_bounds ≤ x ≤ var_bounds`, with `A` in sparse triplet form.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LinearProgram {
    pub sense: Sense,
    pub cost: Vec<f64>,
    /// `(row, col, value)` triplets; duplicates sum.
    pub entries: Vec<(usize, usize, f64)>,
    pub row_bounds: Vec<Bound>,
    pub var_bounds: Vec<Bound>,
    /// One name per variable, for diagnostics and text dumps.
    pub var_names: Vec<String>,
}

impl LinearProgram {
    pub fn n_vars(&self) -> usize {
        self.cost.len()
    }

    pub fn n_rows(&self) -> usize {
        self.row_bounds.len()
    }

    /// Structural sanity: consistent dimensions, in-range indices, finite
    /// matrix and cost entries, ordered bounds.
    pub fn validate(&self) -> Result<(), SolverError> {
        let n = self.n_vars();
        let m = self.n_rows();
        if self.var_bounds.len() != n || self.var_names.len() != n {
            return Err(SolverError::BadProblem(format!(
                "inconsistent variable dimensions: {} costs, {} bounds, {} names",
                n,
                self.var_bounds.len(),
                self.var_names.len()
            )));
        }
        for (i, c) in self.cost.iter().enumerate() {
            if !c.is_finite() {
                return Err(SolverError::BadProblem(format!(
                    "cost of variable {} ({}) is not finite",
                    i, self.var_names[i]
                )));
            }
        }
        for &(r, c, v) in &self.entries {
            if r >= m || c >= n {
                return Err(SolverError::BadProblem(format!(
                    "entry ({r},{c}) outside {m}x{n} matrix"
                )));
            }
            if !v.is_finite() {
                return Err(SolverError::BadProblem(format!(
                    "entry ({r},{c}) is not finite"
                )));
            }
        }
        for (i, b) in self.var_bounds.iter().enumerate() {
            if !b.is_valid() {
                return Err(SolverError::BadProblem(format!(
                    "variable {} ({}) has invalid bounds [{}, {}]",
                    i, self.var_names[i], b.lower, b.upper
                )));
            }
        }
        for (r, b) in self.row_bounds.iter().enumerate() {
            if !b.is_valid() {
                return Err(SolverError::BadProblem(format!(
                    "row {r} has invalid bounds [{}, {}]",
                    b.lower, b.upper
                )));
            }
        }
        Ok(())
    }

    /// Dense column `j` of the constraint matrix (duplicates summed).
    pub(crate) fn dense_column(&self, j: usize) -> Vec<f64> {
        let mut col = vec![0.0; self.n_rows()];
        for &(r, c, v) in &self.entries {
            if c == j {
                col[r] += v;
            }
        }
        col
    }

    /// Row activities `Ax` for a given point.
    pub fn row_activity(&self, x: &[f64]) -> Vec<f64> {
        let mut act = vec![0.0; self.n_rows()];
        for &(r, c, v) in &self.entries {
            act[r] += v * x[c];
        }
        act
    }

    /// Objective value `cᵀx`.
    pub fn objective_value(&self, x: &[f64]) -> f64 {
        self.cost.iter().zip(x).map(|(c, v)| c * v).sum()
    }
}

/// A [`LinearProgram`] plus a mask of binary variables.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MixedIntegerProgram {
    pub lp: LinearProgram,
    /// `integral[j]` marks variable `j` binary; its bounds must lie within
    /// `[0, 1]`.
    pub integral: Vec<bool>,
}

impl MixedIntegerProgram {
    pub fn validate(&self) -> Result<(), SolverError> {
        self.lp.validate()?;
        if self.integral.len() != self.lp.n_vars() {
            return Err(SolverError::BadProblem(format!(
                "integrality mask covers {} of {} variables",
                self.integral.len(),
                self.lp.n_vars()
            )));
        }
        for (j, &int) in self.integral.iter().enumerate() {
            let b = self.lp.var_bounds[j];
            if int && !(b.lower >= -1e-12 && b.upper <= 1.0 + 1e-12) {
                return Err(SolverError::BadProblem(format!(
                    "binary variable {} ({}) has bounds [{}, {}] outside [0,1]",
                    j, self.lp.var_names[j], b.lower, b.upper
                )));
            }
        }
        Ok(())
    }
}

/// A [`LinearProgram`] plus a symmetric PSD quadratic term:
/// `min ½ xᵀQx + cᵀx`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct QuadraticProgram {
    pub lp: LinearProgram,
    /// `(row, col, value)` triplets of Q; duplicates sum. Q must come out
    /// symmetric.
    pub q_entries: Vec<(usize, usize, f64)>,
}

impl QuadraticProgram {
    /// Dense symmetric Q.
    pub(crate) fn dense_q(&self) -> nalgebra::DMatrix<f64> {
        let n = self.lp.n_vars();
        let mut q = nalgebra::DMatrix::zeros(n, n);
        for &(r, c, v) in &self.q_entries {
            q[(r, c)] += v;
        }
        q
    }

    /// Structural checks plus symmetry and PSD-ness (the latter by
    /// attempted Cholesky factorization of a lightly shifted Q).
    pub fn validate(&self) -> Result<(), SolverError> {
        self.lp.validate()?;
        let n = self.lp.n_vars();
        for &(r, c, v) in &self.q_entries {
            if r >= n || c >= n {
                return Err(SolverError::BadProblem(format!(
                    "quadratic entry ({r},{c}) outside {n}x{n}"
                )));
            }
            if !v.is_finite() {
                return Err(SolverError::BadProblem(format!(
                    "quadratic entry ({r},{c}) is not finite"
                )));
            }
        }
        let q = self.dense_q();
        let scale = q.amax().max(1.0);
        for r in 0..n {
            for c in (r + 1)..n {
                if (q[(r, c)] - q[(c, r)]).abs() > 1e-9 * scale {
                    return Err(SolverError::BadProblem(format!(
                        "quadratic term not symmetric at ({r},{c}): {} vs {}",
                        q[(r, c)],
                        q[(c, r)]
                    )));
                }
            }
        }
        let shifted = &q + nalgebra::DMatrix::identity(n, n) * (1e-9 * scale);
        if shifted.cholesky().is_none() {
            return Err(SolverError::BadProblem(
                "quadratic term is not positive semidefinite".into(),
            ));
        }
        Ok(())
    }

    /// Objective value `½xᵀQx + cᵀx`.
    pub fn objective_value(&self, x: &[f64]) -> f64 {
        let mut quad = 0.0;
        for &(r, c, v) in &self.q_entries {
            quad += v * x[r] * x[c];
        }
        0.5 * quad + self.lp.objective_value(x)
    }
}

// ---- solution ----

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum SolveStatus {
    Optimal,
    Infeasible,
    Unbounded,
    /// Ran out of iterations / nodes; `x` holds the best point found, if
    /// any.
    IterationLimit,
}

/// Result of any solve. `row_duals` is populated by the LP and QP solvers
/// under one shared convention: stationarity reads `c (+ Qx) + Aᵀy = 0`
/// over inactive variable bounds, with `y_i ≥ 0` on rows at their upper
/// bound and `y_i ≤ 0` at their lower bound. `best_bound` / `rel_gap` are
/// meaningful for MILPs (for LPs they mirror the objective and 0).
#[derive(Debug, Clone)]
pub struct Solution {
    pub status: SolveStatus,
    pub x: Vec<f64>,
    pub objective: f64,
    pub row_duals: Vec<f64>,
    pub best_bound: f64,
    pub rel_gap: f64,
}

impl Solution {
    pub(crate) fn of_status(status: SolveStatus) -> Self {
        Self {
            status,
            x: Vec::new(),
            objective: f64::NAN,
            row_duals: Vec::new(),
            best_bound: f64::NAN,
            rel_gap: f64::NAN,
        }
    }

    pub fn is_optimal(&self) -> bool {
        self.status == SolveStatus::Optimal
    }
}

/// Errors for malformed problems; mathematical outcomes (infeasible,
/// unbounded, iteration limit) are [`SolveStatus`] values, not errors.
#[derive(Debug, Error)]
pub enum SolverError {
    #[error("invalid problem: {0}")]
    BadProblem(String),
}
