//! Whole-network expansion benchmark.
//!
//! Builds the single-coordinator planning problem over all regions at once:
//! binary build decisions, per-scenario dispatch, DC power flow. Solved two
//! ways that must agree and keep each other honest:
//!
//! * a mixed-integer program in which an unbuilt candidate's flow equation
//!   is deactivated by a big-M pair, solved by branch and bound;
//! * exhaustive enumeration of build vectors, each evaluated as a plain
//!   dispatch LP with the build decision substituted out (the product of
//!   `u` and the flow equation becomes linear once `u` is a constant).
//!
//! The fixed-build LP doubles as the dispatch oracle used by the
//! consensus stages and the investment game.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::netmodel::{CandidateLine, CaseError, Network, ScenId, validate};
use crate::solver::{
    Bound, LinearProgram, MixedIntegerProgram, Solution, SolveStatus, SolverError, solve_lp,
    solve_milp, FEAS_TOL,
};

/// Largest candidate count [`brute_force_plan`] will enumerate (2^16 LPs).
pub const MAX_BRUTE_FORCE_CANDIDATES: usize = 16;

#[derive(Debug, Error)]
pub enum PlanError {
    #[error("invalid network: {0}")]
    InvalidNetwork(String),
    #[error("too many candidate lines to enumerate: {count} > {max}")]
    TooManyCandidates { count: usize, max: usize },
    #[error("build vector has {got} entries, network has {want} candidates")]
    BuildVectorShape { got: usize, want: usize },
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Case(#[from] CaseError),
    #[error("plan failed verification: {0}")]
    Invariant(String),
}

/// A complete investment-plus-dispatch answer.
///
/// All physical fields are indexed `[scenario][element]`. For non-optimal
/// statuses the physical fields are empty and the costs are NaN.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlanResult {
    pub status: SolveStatus,
    /// Build decision per candidate line.
    pub build: Vec<bool>,
    /// Total output per generator, MW.
    pub generation: Vec<Vec<f64>>,
    /// Flow per existing line, MW, positive from `from` to `to`.
    pub existing_flow: Vec<Vec<f64>>,
    /// Flow per candidate line, MW; exactly zero when not built.
    pub candidate_flow: Vec<Vec<f64>>,
    /// Voltage angle per node, rad.
    pub angles: Vec<Vec<f64>>,
    /// Scenario-weighted generation cost, $.
    pub operational_cost: f64,
    /// Sum of annualized build costs over built candidates, $.
    pub investment_cost: f64,
    /// `operational_cost + investment_cost`, $.
    pub objective: f64,
}

impl PlanResult {
    pub fn is_optimal(&self) -> bool {
        self.status == SolveStatus::Optimal
    }

    fn non_optimal(status: SolveStatus) -> Self {
        PlanResult {
            status,
            build: Vec::new(),
            generation: Vec::new(),
            existing_flow: Vec::new(),
            candidate_flow: Vec::new(),
            angles: Vec::new(),
            operational_cost: f64::NAN,
            investment_cost: f64::NAN,
            objective: f64::NAN,
        }
    }
}

/// Deactivation constant for a candidate's flow equation: with the angle box
/// `|θ| ≤ b` the angle-difference flow lies in `±2b/x`, and the line flow
/// variable in `±L`, so their gap never exceeds `2b/x + L`. The smallest
/// constant that makes the relaxed equation vacuous for `u = 0`.
pub fn big_m(cand: &CandidateLine, net: &Network) -> f64 {
    2.0 * net.angle_bound / cand.reactance + cand.capacity
}

/// Variable layout shared by the mixed-integer and fixed-build models.
///
/// Candidate build variables (if present) come first, then one identically
/// shaped block per scenario: generator segment variables, node angles,
/// existing-line flows, candidate-line flows.
#[derive(Debug, Clone)]
struct VarMap {
    n_u: usize,
    block: usize,
    /// Offset of each generator's first segment variable within a block.
    seg_off: Vec<usize>,
    angle_off: usize,
    eflow_off: usize,
    cflow_off: usize,
}

impl VarMap {
    fn new(net: &Network, with_u: bool) -> VarMap {
        let mut seg_off = Vec::with_capacity(net.generators.len());
        let mut at = 0;
        for g in &net.generators {
            seg_off.push(at);
            at += g.segments.len();
        }
        let angle_off = at;
        let eflow_off = angle_off + net.nodes.len();
        let cflow_off = eflow_off + net.existing_lines.len();
        VarMap {
            n_u: if with_u { net.candidate_lines.len() } else { 0 },
            block: cflow_off + net.candidate_lines.len(),
            seg_off,
            angle_off,
            eflow_off,
            cflow_off,
        }
    }

    fn u(&self, k: usize) -> usize {
        debug_assert!(k < self.n_u);
        k
    }
    fn seg(&self, s: usize, g: usize, i: usize) -> usize {
        self.n_u + s * self.block + self.seg_off[g] + i
    }
    fn angle(&self, s: usize, n: usize) -> usize {
        self.n_u + s * self.block + self.angle_off + n
    }
    fn eflow(&self, s: usize, h: usize) -> usize {
        self.n_u + s * self.block + self.eflow_off + h
    }
    fn cflow(&self, s: usize, k: usize) -> usize {
        self.n_u + s * self.block + self.cflow_off + k
    }
}

/// The common LP skeleton: all continuous variables and every constraint
/// that does not involve a build decision. Candidate flow variables are
/// created with their full `±capacity` range; callers couple or fix them.
fn dispatch_skeleton(net: &Network, map: &VarMap) -> LinearProgram {
    let mut lp = LinearProgram::default();
    let n_scen = net.scenarios.len();

    // The single network-wide angle reference: first node by name.
    let reference = (0..net.nodes.len())
        .min_by(|&a, &b| net.nodes[a].name.cmp(&net.nodes[b].name))
        .expect("validated networks have nodes");

    for s in 0..n_scen {
        let w = net.scenarios[s].weight;
        for (g, gen) in net.generators.iter().enumerate() {
            let mut lo = 0.0;
            for (i, seg) in gen.segments.iter().enumerate() {
                let j = lp.add_var(
                    format!("s{s}_p_{}_{i}", gen.name),
                    w * seg.marginal_cost,
                    Bound::range(0.0, seg.upper_bound - lo),
                );
                debug_assert_eq!(j, map.seg(s, g, i));
                lo = seg.upper_bound;
            }
        }
        for (n, node) in net.nodes.iter().enumerate() {
            let b = if n == reference {
                Bound::fixed(0.0)
            } else {
                Bound::range(-net.angle_bound, net.angle_bound)
            };
            let j = lp.add_var(format!("s{s}_th_{}", node.name), 0.0, b);
            debug_assert_eq!(j, map.angle(s, n));
        }
        for (h, line) in net.existing_lines.iter().enumerate() {
            let j = lp.add_var(
                format!("s{s}_f_{}", line.name),
                0.0,
                Bound::range(-line.capacity, line.capacity),
            );
            debug_assert_eq!(j, map.eflow(s, h));
        }
        for (k, cand) in net.candidate_lines.iter().enumerate() {
            let j = lp.add_var(
                format!("s{s}_fc_{}", cand.name),
                0.0,
                Bound::range(-cand.capacity, cand.capacity),
            );
            debug_assert_eq!(j, map.cflow(s, k));
        }
    }

    let gens_at = net.gens_by_node();
    let loads_at = net.loads_by_node();
    for s in 0..n_scen {
        let sid = ScenId(s);
        // Existing-line flow follows the angle difference.
        for (h, line) in net.existing_lines.iter().enumerate() {
            let inv_x = 1.0 / line.reactance;
            lp.add_row(
                Bound::fixed(0.0),
                &[
                    (map.eflow(s, h), 1.0),
                    (map.angle(s, line.from.0), -inv_x),
                    (map.angle(s, line.to.0), inv_x),
                ],
            );
        }
        // Nodal balance: generation plus net imports equals demand.
        for n in 0..net.nodes.len() {
            let mut terms = Vec::new();
            for &g in &gens_at[n] {
                for i in 0..net.generators[g.0].segments.len() {
                    terms.push((map.seg(s, g.0, i), 1.0));
                }
            }
            for (h, line) in net.existing_lines.iter().enumerate() {
                if line.to.0 == n {
                    terms.push((map.eflow(s, h), 1.0));
                } else if line.from.0 == n {
                    terms.push((map.eflow(s, h), -1.0));
                }
            }
            for (k, cand) in net.candidate_lines.iter().enumerate() {
                if cand.to.0 == n {
                    terms.push((map.cflow(s, k), 1.0));
                } else if cand.from.0 == n {
                    terms.push((map.cflow(s, k), -1.0));
                }
            }
            let demand: f64 = loads_at[n].iter().map(|&d| net.demand(sid, d)).sum();
            lp.add_row(Bound::fixed(demand), &terms);
        }
        // Generator output window, scenario-adjusted.
        for (g, gen) in net.generators.iter().enumerate() {
            let (p_min, p_max) = net.gen_limits(sid, crate::netmodel::GenId(g));
            let terms: Vec<(usize, f64)> = (0..gen.segments.len())
                .map(|i| (map.seg(s, g, i), 1.0))
                .collect();
            lp.add_row(Bound::range(p_min, p_max), &terms);
        }
    }
    lp
}

/// The full investment model with binary build decisions.
#[derive(Debug, Clone)]
pub struct CentralizedModel {
    pub mip: MixedIntegerProgram,
    map: VarMap,
}

/// Build the investment MILP: dispatch skeleton plus one binary per
/// candidate, capacity coupling `|flow| ≤ u·L`, and the big-M pair that
/// enforces the flow-angle equation exactly when `u = 1` and not at all
/// when `u = 0`.
pub fn build_centralized(net: &Network) -> Result<CentralizedModel, PlanError> {
    let report = validate(net);
    if !report.is_valid() {
        return Err(PlanError::InvalidNetwork(report.violations.join("; ")));
    }

    let map = VarMap::new(net, true);
    let mut lp = LinearProgram::default();
    for (k, cand) in net.candidate_lines.iter().enumerate() {
        let annual = net.annualized_build_cost(crate::netmodel::CandId(k))?;
        let j = lp.add_var(format!("u_{}", cand.name), annual, Bound::range(0.0, 1.0));
        debug_assert_eq!(j, map.u(k));
    }
    let skeleton = dispatch_skeleton(net, &VarMap { n_u: 0, ..map.clone() });
    let base = lp.n_vars();
    for (name, (cost, bounds)) in skeleton
        .var_names
        .iter()
        .zip(skeleton.cost.iter().copied().zip(skeleton.var_bounds.iter().copied()))
    {
        lp.add_var(name.clone(), cost, bounds);
    }
    for (r, bounds) in skeleton.row_bounds.iter().enumerate() {
        let terms: Vec<(usize, f64)> = skeleton
            .entries
            .iter()
            .filter(|&&(rr, _, _)| rr == r)
            .map(|&(_, c, v)| (base + c, v))
            .collect();
        lp.add_row(*bounds, &terms);
    }

    for s in 0..net.scenarios.len() {
        for (k, cand) in net.candidate_lines.iter().enumerate() {
            let m = big_m(cand, net);
            let inv_x = 1.0 / cand.reactance;
            let flow = map.cflow(s, k);
            let th_i = map.angle(s, cand.from.0);
            let th_j = map.angle(s, cand.to.0);
            // flow - Δθ/x ∈ ±M(1-u), written with u moved to the left.
            lp.add_row(
                Bound::at_most(m),
                &[(flow, 1.0), (th_i, -inv_x), (th_j, inv_x), (map.u(k), m)],
            );
            lp.add_row(
                Bound::at_least(-m),
                &[(flow, 1.0), (th_i, -inv_x), (th_j, inv_x), (map.u(k), -m)],
            );
            // |flow| ≤ u·L.
            lp.add_row(
                Bound::at_most(0.0),
                &[(flow, 1.0), (map.u(k), -cand.capacity)],
            );
            lp.add_row(
                Bound::at_least(0.0),
                &[(flow, 1.0), (map.u(k), cand.capacity)],
            );
        }
    }

    let mut integral = vec![false; lp.n_vars()];
    for k in 0..net.candidate_lines.len() {
        integral[map.u(k)] = true;
    }
    Ok(CentralizedModel {
        mip: MixedIntegerProgram { lp, integral },
        map,
    })
}

impl CentralizedModel {
    /// The model's LP relaxation with the build vector pinned. Used to test
    /// that the big-M form and the product form agree for every fixed `u`.
    pub fn with_fixed_build(&self, build: &[bool]) -> Result<LinearProgram, PlanError> {
        if build.len() != self.map.n_u {
            return Err(PlanError::BuildVectorShape {
                got: build.len(),
                want: self.map.n_u,
            });
        }
        let mut lp = self.mip.lp.clone();
        for (k, &b) in build.iter().enumerate() {
            lp.var_bounds[self.map.u(k)] = Bound::fixed(if b { 1.0 } else { 0.0 });
        }
        Ok(lp)
    }

    fn extract(&self, net: &Network, sol: &Solution) -> Result<PlanResult, PlanError> {
        let build: Vec<bool> = (0..self.map.n_u)
            .map(|k| sol.x[self.map.u(k)] > 0.5)
            .collect();
        assemble_plan(net, &self.map, &sol.x, &build, sol.objective)
    }
}

/// Solve the investment MILP and return the verified plan.
pub fn solve_centralized(net: &Network, rel_gap: f64) -> Result<PlanResult, PlanError> {
    let model = build_centralized(net)?;
    let sol = solve_milp(&model.mip, rel_gap)?;
    if sol.status != SolveStatus::Optimal {
        return Ok(PlanResult::non_optimal(sol.status));
    }
    let plan = model.extract(net, &sol)?;
    verify_plan(net, &plan, FEAS_TOL.sqrt())?;
    Ok(plan)
}

/// Dispatch-only model for a known build vector (the product of `u` with
/// the flow equation made linear by substitution): built candidates get an
/// exact flow-angle equality, unbuilt ones a flow pinned to zero.
#[derive(Debug, Clone)]
pub struct FixedBuildModel {
    pub lp: LinearProgram,
    map: VarMap,
    build: Vec<bool>,
}

pub fn build_fixed_u_lp(net: &Network, build: &[bool]) -> Result<FixedBuildModel, PlanError> {
    let report = validate(net);
    if !report.is_valid() {
        return Err(PlanError::InvalidNetwork(report.violations.join("; ")));
    }
    if build.len() != net.candidate_lines.len() {
        return Err(PlanError::BuildVectorShape {
            got: build.len(),
            want: net.candidate_lines.len(),
        });
    }
    let map = VarMap::new(net, false);
    let mut lp = dispatch_skeleton(net, &map);
    for s in 0..net.scenarios.len() {
        for (k, cand) in net.candidate_lines.iter().enumerate() {
            if build[k] {
                let inv_x = 1.0 / cand.reactance;
                lp.add_row(
                    Bound::fixed(0.0),
                    &[
                        (map.cflow(s, k), 1.0),
                        (map.angle(s, cand.from.0), -inv_x),
                        (map.angle(s, cand.to.0), inv_x),
                    ],
                );
            } else {
                lp.var_bounds[map.cflow(s, k)] = Bound::fixed(0.0);
            }
        }
    }
    Ok(FixedBuildModel {
        lp,
        map,
        build: build.to_vec(),
    })
}

impl FixedBuildModel {
    pub fn extract(&self, net: &Network, sol: &Solution) -> Result<PlanResult, PlanError> {
        let investment: f64 = investment_cost(net, &self.build)?;
        assemble_plan(net, &self.map, &sol.x, &self.build, sol.objective + investment)
    }
}

/// Solve dispatch for a fixed build vector; the ground-truth evaluator the
/// distributed stages and the investment game are checked against.
pub fn solve_fixed_u(net: &Network, build: &[bool]) -> Result<PlanResult, PlanError> {
    let model = build_fixed_u_lp(net, build)?;
    let sol = solve_lp(&model.lp, FEAS_TOL)?;
    if sol.status != SolveStatus::Optimal {
        return Ok(PlanResult::non_optimal(sol.status));
    }
    let plan = model.extract(net, &sol)?;
    verify_plan(net, &plan, FEAS_TOL.sqrt())?;
    Ok(plan)
}

fn investment_cost(net: &Network, build: &[bool]) -> Result<f64, PlanError> {
    let mut total = 0.0;
    for (k, &b) in build.iter().enumerate() {
        if b {
            total += net.annualized_build_cost(crate::netmodel::CandId(k))?;
        }
    }
    Ok(total)
}

fn assemble_plan(
    net: &Network,
    map: &VarMap,
    x: &[f64],
    build: &[bool],
    objective: f64,
) -> Result<PlanResult, PlanError> {
    let n_scen = net.scenarios.len();
    let mut generation = Vec::with_capacity(n_scen);
    let mut existing_flow = Vec::with_capacity(n_scen);
    let mut candidate_flow = Vec::with_capacity(n_scen);
    let mut angles = Vec::with_capacity(n_scen);
    for s in 0..n_scen {
        generation.push(
            net.generators
                .iter()
                .enumerate()
                .map(|(g, gen)| (0..gen.segments.len()).map(|i| x[map.seg(s, g, i)]).sum())
                .collect(),
        );
        existing_flow.push((0..net.existing_lines.len()).map(|h| x[map.eflow(s, h)]).collect());
        candidate_flow.push(
            (0..net.candidate_lines.len())
                .map(|k| {
                    if build[k] {
                        x[map.cflow(s, k)]
                    } else {
                        0.0
                    }
                })
                .collect(),
        );
        angles.push((0..net.nodes.len()).map(|n| x[map.angle(s, n)]).collect());
    }
    let investment = investment_cost(net, build)?;
    Ok(PlanResult {
        status: SolveStatus::Optimal,
        build: build.to_vec(),
        generation,
        existing_flow,
        candidate_flow,
        angles,
        operational_cost: objective - investment,
        investment_cost: investment,
        objective,
    })
}

/// Re-check a plan against the physical model from scratch: nodal balance,
/// line limits, flow-angle consistency, and the cost decomposition.
pub fn verify_plan(net: &Network, plan: &PlanResult, tol: f64) -> Result<(), PlanError> {
    let fail = |msg: String| Err(PlanError::Invariant(msg));
    if !plan.is_optimal() {
        return fail(format!("cannot verify a {:?} plan", plan.status));
    }
    let loads_at = net.loads_by_node();
    let gens_at = net.gens_by_node();
    for s in 0..net.scenarios.len() {
        let sid = ScenId(s);
        for (n, node) in net.nodes.iter().enumerate() {
            let mut net_injection: f64 = gens_at[n]
                .iter()
                .map(|&g| plan.generation[s][g.0])
                .sum();
            for (h, line) in net.existing_lines.iter().enumerate() {
                if line.to.0 == n {
                    net_injection += plan.existing_flow[s][h];
                }
                if line.from.0 == n {
                    net_injection -= plan.existing_flow[s][h];
                }
            }
            for (k, cand) in net.candidate_lines.iter().enumerate() {
                if cand.to.0 == n {
                    net_injection += plan.candidate_flow[s][k];
                }
                if cand.from.0 == n {
                    net_injection -= plan.candidate_flow[s][k];
                }
            }
            let demand: f64 = loads_at[n].iter().map(|&d| net.demand(sid, d)).sum();
            if (net_injection - demand).abs() > tol * (1.0 + demand.abs()) {
                return fail(format!(
                    "scenario {s}: node {} imbalance {net_injection} vs demand {demand}",
                    node.name
                ));
            }
        }
        for (h, line) in net.existing_lines.iter().enumerate() {
            let f = plan.existing_flow[s][h];
            if f.abs() > line.capacity + tol * (1.0 + line.capacity) {
                return fail(format!("scenario {s}: line {} over capacity: {f}", line.name));
            }
            let physics =
                (plan.angles[s][line.from.0] - plan.angles[s][line.to.0]) / line.reactance;
            if (f - physics).abs() > tol * (1.0 + f.abs()) {
                return fail(format!(
                    "scenario {s}: line {} flow {f} vs angle-implied {physics}",
                    line.name
                ));
            }
        }
        for (k, cand) in net.candidate_lines.iter().enumerate() {
            let f = plan.candidate_flow[s][k];
            if !plan.build[k] {
                if f != 0.0 {
                    return fail(format!(
                        "scenario {s}: unbuilt candidate {} carries {f}",
                        cand.name
                    ));
                }
                continue;
            }
            if f.abs() > cand.capacity + tol * (1.0 + cand.capacity) {
                return fail(format!(
                    "scenario {s}: candidate {} over capacity: {f}",
                    cand.name
                ));
            }
            let physics =
                (plan.angles[s][cand.from.0] - plan.angles[s][cand.to.0]) / cand.reactance;
            if (f - physics).abs() > tol * (1.0 + f.abs()) {
                return fail(format!(
                    "scenario {s}: candidate {} flow {f} vs angle-implied {physics}",
                    cand.name
                ));
            }
        }
    }

    let investment = investment_cost(net, &plan.build)?;
    if (investment - plan.investment_cost).abs() > 1e-9 * (1.0 + investment.abs()) {
        return fail(format!(
            "investment mismatch: {} vs recomputed {investment}",
            plan.investment_cost
        ));
    }
    let operational: f64 = net
        .scenarios
        .iter()
        .enumerate()
        .map(|(s, sc)| {
            sc.weight
                * plan.generation[s]
                    .iter()
                    .enumerate()
                    .map(|(g, &p)| net.generation_cost(crate::netmodel::GenId(g), p))
                    .sum::<f64>()
        })
        .sum();
    if (operational - plan.operational_cost).abs() > tol * (1.0 + operational.abs()) {
        return fail(format!(
            "operational cost mismatch: {} vs recomputed {operational}",
            plan.operational_cost
        ));
    }
    let total = plan.operational_cost + plan.investment_cost;
    if (total - plan.objective).abs() > tol * (1.0 + total.abs()) {
        return fail(format!(
            "objective {} does not decompose into {} + {}",
            plan.objective, plan.operational_cost, plan.investment_cost
        ));
    }
    Ok(())
}

/// Independent oracle: enumerate every build vector, dispatch each with the
/// fixed-build LP, and keep the cheapest total. Exponential in candidates.
pub fn brute_force_plan(net: &Network) -> Result<PlanResult, PlanError> {
    let report = validate(net);
    if !report.is_valid() {
        return Err(PlanError::InvalidNetwork(report.violations.join("; ")));
    }
    let n_cand = net.candidate_lines.len();
    if n_cand > MAX_BRUTE_FORCE_CANDIDATES {
        return Err(PlanError::TooManyCandidates {
            count: n_cand,
            max: MAX_BRUTE_FORCE_CANDIDATES,
        });
    }
    let mut best: Option<PlanResult> = None;
    for mask in 0..(1u32 << n_cand) {
        let build: Vec<bool> = (0..n_cand).map(|k| (mask >> k) & 1 == 1).collect();
        let plan = solve_fixed_u(net, &build)?;
        if plan.is_optimal() && best.as_ref().map_or(true, |b| plan.objective < b.objective) {
            best = Some(plan);
        }
    }
    Ok(best.unwrap_or_else(|| PlanResult::non_optimal(SolveStatus::Infeasible)))
}
