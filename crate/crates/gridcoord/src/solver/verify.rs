//! Independent solution checker.
//!
//! Re-verifies a reported optimum from nothing but the problem data and the
//! returned point: primal feasibility, objective consistency, and (when
//! duals are present) stationarity, dual sign, and complementarity under
//! the convention documented on [`Solution`]. Deliberately shares no code
//! with the solvers beyond the problem types.

use super::{
    LinearProgram, MixedIntegerProgram, QuadraticProgram, Solution, SolveStatus,
};

/// Outcome of re-verification. `ok` is the verdict; residuals are reported
/// even on success so tests can assert margins.
#[derive(Debug, Clone, Default)]
pub struct CheckReport {
    pub ok: bool,
    /// Largest bound violation across rows and variables (scaled).
    pub max_primal_residual: f64,
    /// Largest stationarity / dual-sign / complementarity violation
    /// (scaled); zero when no duals were provided.
    pub max_dual_residual: f64,
    pub messages: Vec<String>,
}

impl CheckReport {
    fn fail(&mut self, msg: String) {
        self.ok = false;
        self.messages.push(msg);
    }
}

/// Verify an LP solution. Only `Optimal` solutions are examined; anything
/// else passes trivially with a note.
pub fn check_lp_solution(lp: &LinearProgram, sol: &Solution, tol: f64) -> CheckReport {
    check_linear(lp, None, sol, tol)
}

/// Verify a MILP solution: LP feasibility plus integrality of the masked
/// variables and bound/gap bookkeeping. Duals are not expected.
pub fn check_milp_solution(
    mip: &MixedIntegerProgram,
    sol: &Solution,
    tol: f64,
) -> CheckReport {
    let mut rep = check_linear(&mip.lp, None, sol, tol);
    if sol.status != SolveStatus::Optimal {
        return rep;
    }
    for (j, &int) in mip.integral.iter().enumerate() {
        if int {
            let frac = (sol.x[j] - sol.x[j].round()).abs();
            if frac > super::INT_TOL * 10.0 {
                rep.fail(format!(
                    "binary variable {} ({}) is fractional: {}",
                    j, mip.lp.var_names[j], sol.x[j]
                ));
            }
            rep.max_primal_residual = rep.max_primal_residual.max(frac);
        }
    }
    let slack = tol.max(sol.rel_gap) * sol.objective.abs().max(1.0);
    if sol.best_bound > sol.objective + slack {
        rep.fail(format!(
            "best bound {} exceeds objective {}",
            sol.best_bound, sol.objective
        ));
    }
    if sol.rel_gap < 0.0 {
        rep.fail(format!("negative relative gap {}", sol.rel_gap));
    }
    rep
}

/// Verify a QP solution including the quadratic term in stationarity.
pub fn check_qp_solution(qp: &QuadraticProgram, sol: &Solution, tol: f64) -> CheckReport {
    check_linear(&qp.lp, Some(qp), sol, tol)
}

fn check_linear(
    lp: &LinearProgram,
    qp: Option<&QuadraticProgram>,
    sol: &Solution,
    tol: f64,
) -> CheckReport {
    let mut rep = CheckReport { ok: true, ..CheckReport::default() };
    if sol.status != SolveStatus::Optimal {
        rep.messages.push(format!("status {:?}: nothing to verify", sol.status));
        return rep;
    }
    let n = lp.n_vars();
    let m = lp.n_rows();
    if sol.x.len() != n {
        rep.fail(format!("primal has {} entries, expected {n}", sol.x.len()));
        return rep;
    }
    if sol.x.iter().any(|v| !v.is_finite()) {
        rep.fail("primal contains non-finite entries".into());
        return rep;
    }

    // Primal feasibility.
    let act = lp.row_activity(&sol.x);
    for (r, (&a, b)) in act.iter().zip(&lp.row_bounds).enumerate() {
        let scale = 1.0 + a.abs();
        let viol = (b.lower - a).max(a - b.upper).max(0.0) / scale;
        rep.max_primal_residual = rep.max_primal_residual.max(viol);
        if viol > tol {
            rep.fail(format!(
                "row {r} activity {a} outside [{}, {}]",
                b.lower, b.upper
            ));
        }
    }
    for (j, (&v, b)) in sol.x.iter().zip(&lp.var_bounds).enumerate() {
        let scale = 1.0 + v.abs();
        let viol = (b.lower - v).max(v - b.upper).max(0.0) / scale;
        rep.max_primal_residual = rep.max_primal_residual.max(viol);
        if viol > tol {
            rep.fail(format!(
                "variable {} ({}) value {v} outside [{}, {}]",
                j, lp.var_names[j], b.lower, b.upper
            ));
        }
    }

    // Objective consistency.
    let obj = match qp {
        Some(q) => q.objective_value(&sol.x),
        None => lp.objective_value(&sol.x),
    };
    if (obj - sol.objective).abs() > tol * (1.0 + obj.abs()) {
        rep.fail(format!(
            "reported objective {} differs from recomputed {obj}",
            sol.objective
        ));
    }

    // Dual side, when provided: reduced costs g = c (+Qx) + Aᵀy must point
    // away from the active variable bound, row duals must match the active
    // row side, and both must vanish off the active set.
    if sol.row_duals.len() == m && m > 0 {
        let y = &sol.row_duals;
        if y.iter().any(|v| !v.is_finite()) {
            rep.fail("duals contain non-finite entries".into());
            return rep;
        }
        let mut g = lp.cost.clone();
        if let Some(q) = qp {
            for &(r, c, v) in &q.q_entries {
                g[r] += v * sol.x[c];
            }
        }
        for &(r, c, v) in &lp.entries {
            g[c] += v * y[r];
        }
        let gscale = 1.0
            + lp.cost.iter().fold(0.0f64, |a, &c| a.max(c.abs()))
            + y.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
        let dtol = tol * gscale;

        for (j, (&gj, b)) in g.iter().zip(&lp.var_bounds).enumerate() {
            if b.lower == b.upper {
                continue; // fixed: multiplier unconstrained
            }
            let at_lower = sol.x[j] <= b.lower + tol * (1.0 + b.lower.abs());
            let at_upper = sol.x[j] >= b.upper - tol * (1.0 + b.upper.abs());
            let viol = if at_lower && !at_upper {
                (-gj).max(0.0) // needs g ≥ 0
            } else if at_upper && !at_lower {
                gj.max(0.0) // needs g ≤ 0
            } else if !at_lower && !at_upper {
                gj.abs()
            } else {
                0.0
            };
            rep.max_dual_residual = rep.max_dual_residual.max(viol / gscale);
            if viol > dtol {
                rep.fail(format!(
                    "variable {} ({}) reduced cost {gj} inconsistent with position {}",
                    j, lp.var_names[j], sol.x[j]
                ));
            }
        }
        for (r, (&yr, b)) in y.iter().zip(&lp.row_bounds).enumerate() {
            if b.lower == b.upper {
                continue;
            }
            let a = act[r];
            let at_lower = a <= b.lower + tol * (1.0 + b.lower.abs());
            let at_upper = a >= b.upper - tol * (1.0 + b.upper.abs());
            let viol = if at_lower && !at_upper {
                yr.max(0.0) // needs y ≤ 0
            } else if at_upper && !at_lower {
                (-yr).max(0.0) // needs y ≥ 0
            } else if !at_lower && !at_upper {
                yr.abs()
            } else {
                0.0
            };
            rep.max_dual_residual = rep.max_dual_residual.max(viol / gscale);
            if viol > dtol {
                rep.fail(format!(
                    "row {r} dual {yr} inconsistent with activity {a} in [{}, {}]",
                    b.lower, b.upper
                ));
            }
        }
    }
    rep
}
