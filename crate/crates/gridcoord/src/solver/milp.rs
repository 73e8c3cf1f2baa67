//! Best-first branch-and-bound over binary variables.
//!
//! Nodes carry bound overrides for the branched binaries and are explored
//! in order of their parent LP relaxation bound (FIFO among exact ties, so
//! runs are deterministic). Branching picks the most fractional binary,
//! ties broken by lowest variable index.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use super::{
    solve_lp_opts, Bound, LpOptions, MixedIntegerProgram, Solution, SolveStatus, SolverError,
    FEAS_TOL, INT_TOL, MILP_REL_GAP,
};

/// Knobs for [`solve_milp_opts`].
#[derive(Debug, Clone, Copy)]
pub struct MilpOptions {
    /// Stop when `(incumbent - best_bound) / max(1, |incumbent|)` is below
    /// this.
    pub rel_gap: f64,
    /// A relaxed binary within this of an integer counts as integral.
    pub int_tol: f64,
    /// Tolerance handed to the node LP solves.
    pub lp_tol: f64,
    /// Hard cap on explored nodes.
    pub max_nodes: usize,
}

impl Default for MilpOptions {
    fn default() -> Self {
        Self {
            rel_gap: MILP_REL_GAP,
            int_tol: INT_TOL,
            lp_tol: FEAS_TOL,
            max_nodes: 100_000,
        }
    }
}

/// Solve with defaults apart from `rel_gap`; see [`solve_milp_opts`].
pub fn solve_milp(mip: &MixedIntegerProgram, rel_gap: f64) -> Result<Solution, SolverError> {
    solve_milp_opts(mip, &MilpOptions { rel_gap, ..MilpOptions::default() })
}

struct Node {
    /// `(variable, value)` fixings accumulated down the tree.
    fixings: Vec<(usize, u8)>,
    /// Parent relaxation objective: a valid lower bound for this node.
    bound: f64,
    seq: u64,
}

impl PartialEq for Node {
    fn eq(&self, other: &Self) -> bool {
        self.bound == other.bound && self.seq == other.seq
    }
}
impl Eq for Node {}
impl PartialOrd for Node {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Node {
    // BinaryHeap is a max-heap; order so the smallest bound (then the
    // oldest node) pops first.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .bound
            .partial_cmp(&self.bound)
            .unwrap_or(Ordering::Equal)
            .then(other.seq.cmp(&self.seq))
    }
}

/// Solve a mixed-binary program.
///
/// On `Optimal` the returned objective is within `rel_gap` of the global
/// optimum, `x` is the incumbent, and `best_bound` / `rel_gap` report the
/// proven bound and the achieved gap.
pub fn solve_milp_opts(
    mip: &MixedIntegerProgram,
    opts: &MilpOptions,
) -> Result<Solution, SolverError> {
    mip.validate()?;
    if opts.rel_gap < 0.0 {
        return Err(SolverError::BadProblem(format!(
            "rel_gap must be >= 0, got {}",
            opts.rel_gap
        )));
    }
    let lp_opts = LpOptions { tol: opts.lp_tol, ..LpOptions::default() };

    let mut heap = BinaryHeap::new();
    let mut seq = 0u64;
    heap.push(Node { fixings: Vec::new(), bound: f64::NEG_INFINITY, seq });

    let mut incumbent: Option<Solution> = None;
    let mut nodes_explored = 0usize;

    while let Some(node) = heap.pop() {
        // Bound from the still-open subtrees (this node has the smallest).
        let open_bound = node.bound;
        if let Some(inc) = &incumbent {
            let gap = rel_gap_of(inc.objective, open_bound);
            if gap <= opts.rel_gap {
                return Ok(finish(inc.clone(), open_bound));
            }
            if open_bound >= inc.objective - absolute_slack(inc.objective, opts.rel_gap) {
                // Nothing left can beat the incumbent.
                return Ok(finish(inc.clone(), open_bound));
            }
        }

        if nodes_explored >= opts.max_nodes {
            return Ok(match incumbent {
                Some(inc) => {
                    let mut sol = finish(inc, open_bound);
                    sol.status = SolveStatus::IterationLimit;
                    sol
                }
                None => Solution::of_status(SolveStatus::IterationLimit),
            });
        }
        nodes_explored += 1;

        let lp = apply_fixings(&mip.lp, &node.fixings);
        let relax = solve_lp_opts(&lp, &lp_opts)?;
        match relax.status {
            SolveStatus::Infeasible => continue,
            SolveStatus::Unbounded => {
                // An unbounded relaxation at the root means the MILP is
                // unbounded or infeasible; deeper it can only mean
                // unbounded continuous directions.
                return Ok(Solution::of_status(SolveStatus::Unbounded));
            }
            SolveStatus::IterationLimit => {
                return Ok(Solution::of_status(SolveStatus::IterationLimit))
            }
            SolveStatus::Optimal => {}
        }

        if let Some(inc) = &incumbent {
            if relax.objective >= inc.objective - absolute_slack(inc.objective, opts.rel_gap) {
                continue; // dominated subtree
            }
        }

        match most_fractional(mip, &relax.x, opts.int_tol) {
            None => {
                // Integral: candidate incumbent.
                let better = incumbent
                    .as_ref()
                    .map_or(true, |inc| relax.objective < inc.objective);
                if better {
                    incumbent = Some(relax);
                }
            }
            Some(j) => {
                for fix in [0u8, 1u8] {
                    let mut fixings = node.fixings.clone();
                    fixings.push((j, fix));
                    seq += 1;
                    heap.push(Node { fixings, bound: relax.objective, seq });
                }
            }
        }
    }

    Ok(match incumbent {
        Some(inc) => {
            let bound = inc.objective;
            finish(inc, bound) // tree exhausted: proven optimal
        }
        None => Solution::of_status(SolveStatus::Infeasible),
    })
}

fn apply_fixings(lp: &super::LinearProgram, fixings: &[(usize, u8)]) -> super::LinearProgram {
    let mut lp = lp.clone();
    for &(j, v) in fixings {
        lp.var_bounds[j] = Bound::fixed(v as f64);
    }
    lp
}

/// Binary furthest from integrality (closest to one half); `None` when all
/// are within `int_tol`. Ties resolve to the lowest index because the scan
/// requires a strict improvement.
fn most_fractional(mip: &MixedIntegerProgram, x: &[f64], int_tol: f64) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (j, &int) in mip.integral.iter().enumerate() {
        if !int {
            continue;
        }
        let frac = (x[j] - x[j].round()).abs();
        if frac <= int_tol {
            continue;
        }
        if best.map_or(true, |(_, f)| frac > f) {
            best = Some((j, frac));
        }
    }
    best.map(|(j, _)| j)
}

fn rel_gap_of(incumbent: f64, bound: f64) -> f64 {
    if bound.is_infinite() {
        return f64::INFINITY;
    }
    (incumbent - bound) / incumbent.abs().max(1.0)
}

fn absolute_slack(incumbent: f64, rel_gap: f64) -> f64 {
    rel_gap * incumbent.abs().max(1.0)
}

fn finish(mut inc: Solution, open_bound: f64) -> Solution {
    let bound = if open_bound.is_finite() {
        open_bound.min(inc.objective)
    } else {
        inc.objective
    };
    inc.best_bound = bound;
    inc.rel_gap = rel_gap_of(inc.objective, bound).max(0.0);
    inc.row_duals = Vec::new(); // duals are not meaningful for a MILP
    inc.status = SolveStatus::Optimal;
    inc
}
