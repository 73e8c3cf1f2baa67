//! Bounded-variable revised primal simplex with a composite phase 1.
//!
//! Rows `lo ≤ aᵀx ≤ hi` become equalities `aᵀx - s = 0` with the row
//! bounds moved onto the slack `s`, so the working problem is always
//! `Ax̃ = 0` over `n + m` bounded variables. Phase 1 minimizes the total
//! bound violation of basic variables (costs ±1 on violated variables,
//! blocking at the bound being approached); once feasible, phase 2
//! minimizes the true cost. The basis inverse is kept explicitly and
//! refactorized periodically from an LU decomposition to bound drift.
//! Dantzig pricing with a Bland's-rule fallback after a run of degenerate
//! steps guarantees termination.

use nalgebra::{DMatrix, DVector};

use super::{Bound, LinearProgram, Solution, SolveStatus, SolverError, FEAS_TOL, PIVOT_TOL};

/// Knobs for [`solve_lp_opts`].
#[derive(Debug, Clone, Copy)]
pub struct LpOptions {
    /// Primal/dual feasibility tolerance.
    pub tol: f64,
    /// Hard cap on simplex pivots before giving up with
    /// [`SolveStatus::IterationLimit`].
    pub max_iters: usize,
}

impl Default for LpOptions {
    fn default() -> Self {
        Self { tol: FEAS_TOL, max_iters: 50_000 }
    }
}

/// Solve with default iteration limit; see [`solve_lp_opts`].
pub fn solve_lp(lp: &LinearProgram, tol: f64) -> Result<Solution, SolverError> {
    solve_lp_opts(lp, &LpOptions { tol, ..LpOptions::default() })
}

/// Solve a linear program.
///
/// On `Optimal`, `x` is a vertex with primal residuals ≤ `tol` and
/// `row_duals` satisfy the stationarity convention shared with the QP
/// solver: reduced costs are `c + Aᵀy`, with `y_i ≥ 0` on rows at their
/// upper bound and `≤ 0` at their lower bound. On `Infeasible`,
/// `row_duals` carries the phase-1 price vector as a certificate.
pub fn solve_lp_opts(lp: &LinearProgram, opts: &LpOptions) -> Result<Solution, SolverError> {
    lp.validate()?;
    let mut s = Simplex::new(lp, opts);
    Ok(s.run())
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum VState {
    Basic,
    AtLower,
    AtUpper,
    /// Nonbasic free variable parked at zero.
    FreeZero,
}

struct Simplex<'a> {
    lp: &'a LinearProgram,
    tol: f64,
    max_iters: usize,
    n: usize,
    m: usize,
    /// Dense columns of `[A | -I]`, length `n + m`.
    cols: Vec<DVector<f64>>,
    lo: Vec<f64>,
    hi: Vec<f64>,
    cost: Vec<f64>,
    value: Vec<f64>,
    state: Vec<VState>,
    /// Variable basic in each row position.
    basis: Vec<usize>,
    binv: DMatrix<f64>,
    pivots_since_refactor: usize,
    degenerate_streak: usize,
    bland: bool,
}

enum Step {
    Done,
    Pivoted,
    Unbounded,
    Stalled,
}

impl<'a> Simplex<'a> {
    fn new(lp: &'a LinearProgram, opts: &LpOptions) -> Self {
        let n = lp.n_vars();
        let m = lp.n_rows();
        let mut cols = Vec::with_capacity(n + m);
        for j in 0..n {
            cols.push(DVector::from_vec(lp.dense_column(j)));
        }
        for r in 0..m {
            let mut col = DVector::zeros(m);
            col[r] = -1.0;
            cols.push(col);
        }
        let mut lo = Vec::with_capacity(n + m);
        let mut hi = Vec::with_capacity(n + m);
        for b in lp.var_bounds.iter().chain(lp.row_bounds.iter()) {
            lo.push(b.lower);
            hi.push(b.upper);
        }
        let mut cost = lp.cost.clone();
        cost.resize(n + m, 0.0);

        // Slack basis: structural variables parked at a finite bound (or
        // zero when free), slacks basic.
        let mut value = vec![0.0; n + m];
        let mut state = vec![VState::Basic; n + m];
        for j in 0..n {
            if lo[j].is_finite() {
                value[j] = lo[j];
                state[j] = VState::AtLower;
            } else if hi[j].is_finite() {
                value[j] = hi[j];
                state[j] = VState::AtUpper;
            } else {
                value[j] = 0.0;
                state[j] = VState::FreeZero;
            }
        }
        let basis: Vec<usize> = (n..n + m).collect();

        let mut s = Self {
            lp,
            tol: opts.tol,
            max_iters: opts.max_iters,
            n,
            m,
            cols,
            lo,
            hi,
            cost,
            value,
            state,
            basis,
            binv: -DMatrix::identity(m, m),
            pivots_since_refactor: 0,
            degenerate_streak: 0,
            bland: false,
        };
        s.recompute_basic_values();
        s
    }

    /// `v_B = B⁻¹ (0 - Σ nonbasic columns · values)`.
    fn recompute_basic_values(&mut self) {
        let mut rhs = DVector::zeros(self.m);
        for j in 0..self.n + self.m {
            if self.state[j] != VState::Basic && self.value[j] != 0.0 {
                rhs.axpy(-self.value[j], &self.cols[j], 1.0);
            }
        }
        let vb = &self.binv * rhs;
        for (i, &b) in self.basis.iter().enumerate() {
            self.value[b] = vb[i];
        }
    }

    fn refactor(&mut self) -> bool {
        let mut bmat = DMatrix::zeros(self.m, self.m);
        for (i, &b) in self.basis.iter().enumerate() {
            bmat.set_column(i, &self.cols[b]);
        }
        match bmat.lu().try_inverse() {
            Some(inv) => {
                self.binv = inv;
                self.recompute_basic_values();
                self.pivots_since_refactor = 0;
                true
            }
            None => false,
        }
    }

    /// Phase-1 cost: ±1 on basic variables outside their bounds.
    fn phase1_cost(&self) -> Option<Vec<f64>> {
        let ftol = self.tol;
        let mut pc = vec![0.0; self.n + self.m];
        let mut any = false;
        for &b in &self.basis {
            if self.value[b] > self.hi[b] + ftol {
                pc[b] = 1.0;
                any = true;
            } else if self.value[b] < self.lo[b] - ftol {
                pc[b] = -1.0;
                any = true;
            }
        }
        any.then_some(pc)
    }

    fn duals_for(&self, pc: &[f64]) -> DVector<f64> {
        let cb = DVector::from_iterator(self.m, self.basis.iter().map(|&b| pc[b]));
        self.binv.transpose() * cb
    }

    fn run(&mut self) -> Solution {
        for _ in 0..self.max_iters {
            let (pc, phase1) = match self.phase1_cost() {
                Some(pc) => (pc, true),
                None => (self.cost.clone(), false),
            };
            let y = self.duals_for(&pc);
            let step = self.pivot_once(&pc, &y, phase1);
            match step {
                Step::Pivoted => continue,
                Step::Done if phase1 => {
                    // Phase-1 optimum with violations left: infeasible,
                    // with the phase-1 prices as certificate.
                    return Solution {
                        row_duals: y.iter().map(|v| -v).collect(),
                        ..Solution::of_status(SolveStatus::Infeasible)
                    };
                }
                Step::Done => {
                    self.refactor();
                    let x = self.value[..self.n].to_vec();
                    let y = self.duals_for(&self.cost);
                    let objective = self.lp.objective_value(&x);
                    return Solution {
                        status: SolveStatus::Optimal,
                        objective,
                        best_bound: objective,
                        rel_gap: 0.0,
                        // Negated: the simplex prices satisfy d = c - Aᵀy,
                        // the reported convention is d = c + Aᵀy.
                        row_duals: y.iter().map(|v| -v).collect(),
                        x,
                    };
                }
                Step::Unbounded if phase1 => {
                    // The piecewise phase-1 objective is bounded below, so
                    // an unblocked ray is numerical noise.
                    return Solution::of_status(SolveStatus::IterationLimit);
                }
                Step::Unbounded => return Solution::of_status(SolveStatus::Unbounded),
                Step::Stalled => return Solution::of_status(SolveStatus::IterationLimit),
            }
        }
        let x = self.value[..self.n].to_vec();
        let objective = self.lp.objective_value(&x);
        Solution {
            status: SolveStatus::IterationLimit,
            objective,
            x,
            ..Solution::of_status(SolveStatus::IterationLimit)
        }
    }

    fn pivot_once(&mut self, pc: &[f64], y: &DVector<f64>, phase1: bool) -> Step {
        let dtol = self.tol * (1.0 + pc.iter().fold(0.0f64, |a, &c| a.max(c.abs())));

        // Pricing: most attractive reduced cost, or lowest index in Bland
        // mode.
        let mut enter: Option<(usize, f64, f64)> = None; // (var, dir, score)
        for j in 0..self.n + self.m {
            // Fixed variables cannot move; pricing them would flip-cycle.
            if self.hi[j] - self.lo[j] <= 0.0 {
                continue;
            }
            let (dir, eligible_score) = match self.state[j] {
                VState::Basic => continue,
                VState::AtLower | VState::AtUpper | VState::FreeZero => {
                    let d = pc[j] - y.dot(&self.cols[j]);
                    match self.state[j] {
                        VState::AtLower if d < -dtol => (1.0, -d),
                        VState::AtUpper if d > dtol => (-1.0, d),
                        VState::FreeZero if d.abs() > dtol => (-d.signum(), d.abs()),
                        _ => continue,
                    }
                }
            };
            if self.bland {
                enter = Some((j, dir, eligible_score));
                break;
            }
            if enter.map_or(true, |(_, _, s)| eligible_score > s) {
                enter = Some((j, dir, eligible_score));
            }
        }
        let Some((jin, dir, _)) = enter else {
            return Step::Done;
        };

        let w = &self.binv * &self.cols[jin];

        // Ratio test. The entering variable is limited by its own range;
        // each basic variable blocks at the bound it approaches. In phase 1
        // a variable beyond a bound blocks when it reaches that bound
        // (where its penalty vanishes) and is unblocked when moving further
        // out: that growth is already priced into the reduced cost.
        let ftol = self.tol;
        let own_range = self.hi[jin] - self.lo[jin]; // may be +inf
        let mut t_best = own_range.max(0.0);
        let mut leave: Option<(usize, VState, f64)> = None; // (pos, exit state, |pivot|)
        for i in 0..self.m {
            let rate = -dir * w[i];
            if rate.abs() <= PIVOT_TOL {
                continue;
            }
            let b = self.basis[i];
            let v = self.value[b];
            let above = phase1 && v > self.hi[b] + ftol;
            let below = phase1 && v < self.lo[b] - ftol;
            let (t, exit) = if above {
                if rate < 0.0 {
                    ((v - self.hi[b]) / -rate, VState::AtUpper)
                } else {
                    continue;
                }
            } else if below {
                if rate > 0.0 {
                    ((self.lo[b] - v) / rate, VState::AtLower)
                } else {
                    continue;
                }
            } else if rate > 0.0 {
                if self.hi[b].is_finite() {
                    ((self.hi[b] - v) / rate, VState::AtUpper)
                } else {
                    continue;
                }
            } else if self.lo[b].is_finite() {
                ((v - self.lo[b]) / -rate, VState::AtLower)
            } else {
                continue;
            };
            let t = t.max(0.0);
            let better = match leave {
                _ if t < t_best - 1e-12 => true,
                // Near-ties: prefer the biggest pivot for stability, or the
                // lowest basis position under Bland's rule.
                Some((pos, _, piv)) if (t - t_best).abs() <= 1e-12 => {
                    if self.bland {
                        self.basis[i] < self.basis[pos]
                    } else {
                        w[i].abs() > piv
                    }
                }
                None if t <= t_best => true,
                _ => false,
            };
            if better {
                t_best = t;
                leave = Some((i, exit, w[i].abs()));
            }
        }

        if t_best.is_infinite() {
            return Step::Unbounded;
        }

        // Track degeneracy for the Bland fallback.
        if t_best <= 1e-11 {
            self.degenerate_streak += 1;
            if self.degenerate_streak > 60 {
                self.bland = true;
            }
        } else {
            self.degenerate_streak = 0;
            self.bland = false;
        }

        // Apply the step.
        self.value[jin] += dir * t_best;
        for i in 0..self.m {
            self.value[self.basis[i]] -= dir * t_best * w[i];
        }

        match leave {
            None => {
                // Bound-to-bound flip of the entering variable.
                self.state[jin] = if dir > 0.0 { VState::AtUpper } else { VState::AtLower };
                self.value[jin] = if dir > 0.0 { self.hi[jin] } else { self.lo[jin] };
            }
            Some((p, exit, _)) => {
                let bout = self.basis[p];
                self.state[bout] = exit;
                // Snap exactly onto the bound to stop drift.
                self.value[bout] = match exit {
                    VState::AtLower => self.lo[bout],
                    VState::AtUpper => self.hi[bout],
                    _ => unreachable!(),
                };
                self.state[jin] = VState::Basic;
                self.basis[p] = jin;

                let pivot = w[p];
                if pivot.abs() <= PIVOT_TOL {
                    return Step::Stalled;
                }
                // B⁻¹ update: eliminate w into e_p.
                let prow = self.binv.row(p) / pivot;
                for r in 0..self.m {
                    if r != p {
                        let f = w[r];
                        if f != 0.0 {
                            let update = &prow * f;
                            let mut row = self.binv.row_mut(r);
                            row -= update.clone_owned();
                        }
                    }
                }
                self.binv.set_row(p, &prow);

                self.pivots_since_refactor += 1;
                if self.pivots_since_refactor >= 64 && !self.refactor() {
                    return Step::Stalled;
                }
            }
        }
        Step::Pivoted
    }
}

// Convenience used by builders all over the crate.
impl LinearProgram {
    /// Append a variable, returning its index.
    pub fn add_var(&mut self, name: impl Into<String>, cost: f64, bounds: Bound) -> usize {
        let j = self.cost.len();
        self.cost.push(cost);
        self.var_bounds.push(bounds);
        self.var_names.push(name.into());
        j
    }

    /// Append a row `bounds.lower ≤ Σ coeff·var ≤ bounds.upper`, returning
    /// its index.
    pub fn add_row(&mut self, bounds: Bound, terms: &[(usize, f64)]) -> usize {
        let r = self.row_bounds.len();
        self.row_bounds.push(bounds);
        for &(col, v) in terms {
            self.entries.push((r, col, v));
        }
        r
    }
}
