//! Distributed negotiation of the build plan.
//!
//! Each regional planner repeatedly solves a small expansion MILP over its
//! own nodes plus copies of the boundary quantities it shares with
//! neighbours: build decisions, inter-regional flows, and normalized
//! end-to-end angle differences. A neutral coordinator keeps a global copy
//! of every shared quantity. After each round the two sides' copies are
//! compared and per-region reward/penalty prices (duals) move by a
//! diminishing step times the disagreement, until either every copy agrees
//! (consensus) or a lower/upper bound gap closes.
//!
//! Exchange is gauge-normalized: a region reports the angle difference
//! `d = θ_i − θ_j` of a shared element as the pair `(d/2, −d/2)` and the
//! coordinator keeps one difference variable per element. Absolute angle
//! levels never cross a region boundary, so the (physically meaningless)
//! common level of an isolated region cannot be priced or fought over.
//!
//! Duals frozen at zero residual make consensus an absorbing state. Bounds:
//! the lower bound adds the LP relaxations of all subproblems at the
//! current prices (valid at any price vector); the upper bound follows the
//! recovery recipe of re-evaluating the coordinator at each region's own
//! proposal, and is *not* guaranteed to dominate a feasible plan, so
//! [`Stage1Result`] also records `ub_phys`, the checked cost of actually
//! operating the network under the decided build vector.

use serde::{Deserialize, Serialize};

use crate::centralized::{big_m, solve_fixed_u, PlanError, PlanResult};
use crate::netmodel::{validate, CandId, CaseError, LineId, Network, NodeId, RegionId};
use crate::solver::{
    solve_lp, solve_milp, Bound, LinearProgram, MixedIntegerProgram, SolveStatus, SolverError,
    FEAS_TOL, MILP_REL_GAP,
};

/// How flow copies are compared between a region and the coordinator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FlowConsensusMode {
    /// Consensus on signed flows. Physically consistent with the
    /// coordinator's flow/angle coupling; the default.
    Signed,
    /// Consensus on flow magnitudes: both sides exchange `t = |flow|`,
    /// modeled exactly with one auxiliary binary per (scenario, element)
    /// on the region and the coordinator alike, and all flow prices apply
    /// to the magnitudes. Converges like [`Self::Signed`] but leaves flow
    /// directions unpriced; kept as an option for comparison.
    Magnitude,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Stage1Config {
    /// Initial step scale; the step at a region's update count ν is
    /// `alpha0 / (1 + ν/nu0) / beta`.
    pub alpha0: f64,
    /// Step half-life style decay constant (larger = slower decay).
    pub nu0: f64,
    /// Per-region step divisor; `None` uses the region count.
    pub beta: Option<f64>,
    /// Relative bound gap `1 − LB/UB` below which negotiation stops.
    pub epsilon: f64,
    /// Flow copy agreement tolerance, MW.
    pub consensus_flow_tol: f64,
    /// Angle copy agreement tolerance, rad (on the exchanged half-values).
    pub consensus_angle_tol: f64,
    pub mode: FlowConsensusMode,
    pub max_rounds: usize,
    /// Relative gap for the MILP subproblem solves.
    pub milp_rel_gap: f64,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            alpha0: 1.0,
            nu0: 10.0,
            beta: None,
            epsilon: 1e-3,
            consensus_flow_tol: 1e-4,
            consensus_angle_tol: 1e-6,
            mode: FlowConsensusMode::Signed,
            max_rounds: 500,
            milp_rel_gap: MILP_REL_GAP,
        }
    }
}

/// Reward/penalty prices one region holds against the coordinator's copies.
///
/// Indexed over all candidates `k`, all shared existing lines (by position
/// in the engine's shared-line list), and all shared elements (candidates
/// first, then shared existing lines); only entries for elements the region
/// actually touches are ever updated or priced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualSet {
    /// Build-decision price per candidate, $.
    pub pi: Vec<f64>,
    /// Flow price per (scenario, candidate), $/MW.
    pub mu_cand: Vec<Vec<f64>>,
    /// Flow price per (scenario, shared existing line), $/MW.
    pub mu_line: Vec<Vec<f64>>,
    /// Angle price per (scenario, shared element, end), $/rad. The two
    /// ends stay antisymmetric under the normalized exchange.
    pub xi: Vec<Vec<[f64; 2]>>,
}

impl DualSet {
    fn zeros(scenarios: usize, cands: usize, shared: usize) -> Self {
        Self {
            pi: vec![0.0; cands],
            mu_cand: vec![vec![0.0; cands]; scenarios],
            mu_line: vec![vec![0.0; shared]; scenarios],
            xi: vec![vec![[0.0; 2]; cands + shared]; scenarios],
        }
    }

    /// Sum of absolute values over every price.
    pub fn l1_norm(&self) -> f64 {
        let mut n: f64 = self.pi.iter().map(|v| v.abs()).sum();
        for s in &self.mu_cand {
            n += s.iter().map(|v| v.abs()).sum::<f64>();
        }
        for s in &self.mu_line {
            n += s.iter().map(|v| v.abs()).sum::<f64>();
        }
        for s in &self.xi {
            n += s.iter().map(|e| e[0].abs() + e[1].abs()).sum::<f64>();
        }
        n
    }
}

/// One side's values for every shared quantity: build decisions, flows on
/// candidates and shared existing lines per scenario, and the normalized
/// end-to-end angle difference per shared element per scenario.
///
/// Used both for the coordinator's global copies and for each region's own
/// copies; in a regional proposal, entries for elements the region does not
/// touch are zero and carry no meaning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalCopies {
    pub u: Vec<bool>,
    /// `[scenario][candidate]`, MW, in the line's from→to orientation.
    pub flow_cand: Vec<Vec<f64>>,
    /// `[scenario][shared existing line]`, MW.
    pub flow_line: Vec<Vec<f64>>,
    /// `[scenario][shared element]`: `θ_from − θ_to`, rad. Elements list
    /// candidates first, then shared existing lines.
    pub diff: Vec<Vec<f64>>,
}

impl GlobalCopies {
    fn zeros(scenarios: usize, cands: usize, shared: usize) -> Self {
        Self {
            u: vec![false; cands],
            flow_cand: vec![vec![0.0; cands]; scenarios],
            flow_line: vec![vec![0.0; shared]; scenarios],
            diff: vec![vec![0.0; cands + shared]; scenarios],
        }
    }
}

/// A region's subproblem optimum for one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionalProposal {
    pub region: usize,
    pub round: usize,
    pub copies: GlobalCopies,
    /// Exact subproblem optimum, including price terms.
    pub objective: f64,
    /// LP relaxation optimum of the same subproblem.
    pub relaxation: f64,
}

/// The coordinator's optimum for one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TpcDecision {
    pub round: usize,
    pub copies: GlobalCopies,
    /// Exact coordinator optimum (ties broken toward not building, then
    /// toward minimal copy magnitudes).
    pub objective: f64,
    /// LP relaxation optimum of the coordinator subproblem.
    pub relaxation: f64,
    /// Per-region recovery evaluation: coordinator re-solved with that
    /// region's copies pinned. `+inf` when the pin is unreachable.
    pub ub_tpc: Vec<f64>,
}

/// One trace line per (round, region).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage1TraceRow {
    pub nu: usize,
    pub region: String,
    /// Region's build proposal, one char per candidate: `0`, `1`, or `-`
    /// where the region holds no stake.
    pub u_prop: String,
    /// Coordinator's build decision, one char per candidate.
    pub u_tpc: String,
    pub lb: f64,
    pub ub: f64,
    pub gap: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StopReason {
    /// Every stakeholder copy agrees with the coordinator within tolerance.
    Consensus,
    /// `1 − LB/UB ≤ epsilon` with a positive upper bound.
    GapClosed,
    /// Round limit hit first.
    RoundLimit,
}

/// Mutable negotiation state: prices, latest copies from every participant,
/// bound history, and the trace.
#[derive(Debug, Clone)]
pub struct Stage1State {
    pub round: usize,
    /// Per-region count of price updates applied (drives the step decay).
    pub nu: Vec<usize>,
    pub duals: Vec<DualSet>,
    pub proposals: Vec<Option<RegionalProposal>>,
    pub decision: Option<TpcDecision>,
    /// Best (largest) lower bound seen; valid at any price vector.
    pub best_lb: f64,
    /// Current round's recovery upper bound (deliberately not latched:
    /// early recovery values routinely undershoot the final cost and a
    /// running minimum would freeze the gap test).
    pub ub: f64,
    pub gap: f64,
    pub trace: Vec<Stage1TraceRow>,
}

/// Final state of the negotiation.
#[derive(Debug, Clone)]
pub struct Stage1Result {
    pub reason: StopReason,
    /// Whether full copy consensus held at the final round.
    pub consensus: bool,
    pub rounds: usize,
    /// The coordinator's final build vector.
    pub u_star: Vec<bool>,
    pub best_lb: f64,
    pub ub: f64,
    pub gap: f64,
    pub duals: Vec<DualSet>,
    pub globals: GlobalCopies,
    pub proposals: Vec<RegionalProposal>,
    /// Checked cost of operating the network under `u_star`; the auditable
    /// companion to the recovery bound `ub`. Non-optimal status means the
    /// decided plan cannot serve load.
    pub ub_phys: PlanResult,
    pub trace: Vec<Stage1TraceRow>,
}

#[derive(Debug, thiserror::Error)]
pub enum Stage1Error {
    #[error("invalid network: {0}")]
    InvalidNetwork(String),
    #[error("region {region} subproblem came back {status:?} at round {round}")]
    Subproblem {
        region: String,
        status: SolveStatus,
        round: usize,
    },
    #[error("coordinator subproblem came back {status:?} at round {round}")]
    Coordinator { status: SolveStatus, round: usize },
    #[error("negotiation state broken: {0}")]
    Invariant(String),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Case(#[from] CaseError),
    #[error(transparent)]
    Plan(#[from] PlanError),
}

// Gap values this far below zero are numerical dust on a genuinely closed
// gap; anything lower is a real bound crossing and must not stop the run.
const GAP_DUST: f64 = -1e-9;

fn b2f(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

// ---- per-region static structure ----

struct RegionCtx {
    name: String,
    /// Own nodes, ascending.
    nodes: Vec<NodeId>,
    gens: Vec<usize>,
    /// Existing lines with both ends inside the region.
    internal_lines: Vec<usize>,
    /// Positions into the engine's shared-line list, ascending.
    shared_local: Vec<usize>,
    /// Candidates this region holds a stake in, ascending.
    stakes: Vec<usize>,
    /// Foreign endpoint nodes of shared elements, ascending; one angle
    /// copy per node, so parallel elements stay mutually consistent.
    foreign: Vec<NodeId>,
    /// Shared element ids this region touches (candidates then lines).
    elements: Vec<usize>,
}

/// Variable indices of one region's cached subproblem. Only objective
/// coefficients change between rounds.
struct RegionalModel {
    mip: MixedIntegerProgram,
    base_cost: Vec<f64>,
    u_var: Vec<usize>,
    flow_cand_var: Vec<Vec<usize>>,
    flow_line_var: Vec<Vec<usize>>,
    /// `t = |flow|` epigraph variables, magnitude mode only.
    t_cand_var: Vec<Vec<usize>>,
    t_line_var: Vec<Vec<usize>>,
    /// Angle variable pair per (scenario, touched element).
    elem_ends: Vec<Vec<(usize, usize)>>,
}

struct TpcModel {
    mip: MixedIntegerProgram,
    u_var: Vec<usize>,
    flow_cand_var: Vec<Vec<usize>>,
    flow_line_var: Vec<Vec<usize>>,
    diff_var: Vec<Vec<usize>>,
    /// Magnitude mode only: the coordinator's copy of each flow is its
    /// magnitude, matching what regions are priced on.
    t_cand_var: Vec<Vec<usize>>,
    t_line_var: Vec<Vec<usize>>,
}

impl TpcModel {
    /// The coordinator variable playing the role of the shared flow copy.
    fn copy_cand(&self, mode: FlowConsensusMode, s: usize, k: usize) -> usize {
        match mode {
            FlowConsensusMode::Signed => self.flow_cand_var[s][k],
            FlowConsensusMode::Magnitude => self.t_cand_var[s][k],
        }
    }

    fn copy_line(&self, mode: FlowConsensusMode, s: usize, hs: usize) -> usize {
        match mode {
            FlowConsensusMode::Signed => self.flow_line_var[s][hs],
            FlowConsensusMode::Magnitude => self.t_line_var[s][hs],
        }
    }
}

/// The negotiation engine: cached subproblem structure plus
/// [`Stage1State`]. Each public step is pure bookkeeping around solver
/// calls so an external driver can interleave them with messaging without
/// changing any arithmetic.
pub struct Stage1Engine {
    net: Network,
    cfg: Stage1Config,
    shared_lines: Vec<LineId>,
    stakeholders: Vec<Vec<RegionId>>,
    regions: Vec<RegionCtx>,
    models: Vec<RegionalModel>,
    tpc: TpcModel,
    pub state: Stage1State,
}

impl Stage1Engine {
    pub fn new(net: &Network, cfg: Stage1Config) -> Result<Self, Stage1Error> {
        let report = validate(net);
        if !report.is_valid() {
            return Err(Stage1Error::InvalidNetwork(report.violations.join("; ")));
        }
        if !(cfg.alpha0 > 0.0 && cfg.nu0 > 0.0 && cfg.epsilon > 0.0) {
            return Err(Stage1Error::InvalidNetwork(
                "step and gap parameters must be positive".into(),
            ));
        }
        if let Some(b) = cfg.beta {
            if !(b > 0.0) {
                return Err(Stage1Error::InvalidNetwork("beta must be positive".into()));
            }
        }
        let shared_lines = net.shared_existing_lines();
        let stakeholders: Vec<Vec<RegionId>> = (0..net.candidate_lines.len())
            .map(|k| net.candidate_stakeholders(CandId(k)))
            .collect();
        let regions: Vec<RegionCtx> = (0..net.regions.len())
            .map(|z| build_region_ctx(net, RegionId(z), &shared_lines, &stakeholders))
            .collect();
        let models = regions
            .iter()
            .map(|ctx| build_regional_model(net, ctx, &shared_lines, cfg.mode))
            .collect::<Result<Vec<_>, _>>()?;
        let tpc = build_tpc_model(net, &shared_lines, cfg.mode)?;
        let n_z = net.regions.len();
        let n_s = net.scenarios.len();
        let n_k = net.candidate_lines.len();
        let n_h = shared_lines.len();
        let state = Stage1State {
            round: 0,
            nu: vec![0; n_z],
            duals: vec![DualSet::zeros(n_s, n_k, n_h); n_z],
            proposals: vec![None; n_z],
            decision: None,
            best_lb: f64::NEG_INFINITY,
            ub: f64::INFINITY,
            gap: f64::INFINITY,
            trace: Vec::new(),
        };
        Ok(Self {
            net: net.clone(),
            cfg,
            shared_lines,
            stakeholders,
            regions,
            models,
            tpc,
            state,
        })
    }

    pub fn config(&self) -> &Stage1Config {
        &self.cfg
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn n_regions(&self) -> usize {
        self.regions.len()
    }

    pub fn region_name(&self, z: usize) -> &str {
        &self.regions[z].name
    }

    /// Starts the next round.
    pub fn begin_round(&mut self) -> usize {
        self.state.round += 1;
        self.state.round
    }

    /// Step factor applied to region `z`'s next price update.
    pub fn step_size(&self, z: usize) -> f64 {
        let beta = self.cfg.beta.unwrap_or(self.regions.len() as f64);
        let alpha = self.cfg.alpha0 / (1.0 + self.state.nu[z] as f64 / self.cfg.nu0);
        alpha / beta
    }

    /// Solves region `z`'s subproblem at the current prices.
    pub fn solve_region(&mut self, z: usize) -> Result<RegionalProposal, Stage1Error> {
        self.refresh_regional_cost(z);
        let model = &self.models[z];
        let sol = solve_milp(&model.mip, self.cfg.milp_rel_gap)?;
        if sol.status != SolveStatus::Optimal {
            return Err(Stage1Error::Subproblem {
                region: self.regions[z].name.clone(),
                status: sol.status,
                round: self.state.round,
            });
        }
        let relax = solve_lp(&model.mip.lp, FEAS_TOL)?;
        if relax.status != SolveStatus::Optimal {
            return Err(Stage1Error::Subproblem {
                region: self.regions[z].name.clone(),
                status: relax.status,
                round: self.state.round,
            });
        }

        let net = &self.net;
        let ctx = &self.regions[z];
        let n_s = net.scenarios.len();
        let n_k = net.candidate_lines.len();
        let n_h = self.shared_lines.len();
        let mut copies = GlobalCopies::zeros(n_s, n_k, n_h);
        for (ik, &k) in ctx.stakes.iter().enumerate() {
            copies.u[k] = sol.x[model.u_var[ik]] > 0.5;
        }
        for s in 0..n_s {
            for (ik, &k) in ctx.stakes.iter().enumerate() {
                copies.flow_cand[s][k] = sol.x[model.flow_cand_var[s][ik]];
            }
            for (il, &hs) in ctx.shared_local.iter().enumerate() {
                copies.flow_line[s][hs] = sol.x[model.flow_line_var[s][il]];
            }
            for (ie, &e) in ctx.elements.iter().enumerate() {
                let (vi, vj) = model.elem_ends[s][ie];
                copies.diff[s][e] = sol.x[vi] - sol.x[vj];
            }
        }
        Ok(RegionalProposal {
            region: z,
            round: self.state.round,
            copies,
            objective: sol.objective,
            relaxation: relax.objective,
        })
    }

    pub fn ingest_proposal(&mut self, prop: RegionalProposal) {
        let z = prop.region;
        self.state.proposals[z] = Some(prop);
    }

    /// Solves the coordinator subproblem at the current prices, breaking
    /// objective ties toward not building and then toward minimal copy
    /// magnitudes, and evaluates the per-region recovery terms.
    pub fn solve_tpc(&mut self) -> Result<TpcDecision, Stage1Error> {
        self.refresh_tpc_cost();
        let n_s = self.net.scenarios.len();
        let n_k = self.net.candidate_lines.len();
        let n_h = self.shared_lines.len();
        let n_z = self.regions.len();
        if self.tpc.mip.lp.n_vars() == 0 {
            return Ok(TpcDecision {
                round: self.state.round,
                copies: GlobalCopies::zeros(n_s, n_k, n_h),
                objective: 0.0,
                relaxation: 0.0,
                ub_tpc: vec![0.0; n_z],
            });
        }

        let relax = solve_lp(&self.tpc.mip.lp, FEAS_TOL)?;
        let primary = solve_milp(&self.tpc.mip, self.cfg.milp_rel_gap)?;
        if relax.status != SolveStatus::Optimal || primary.status != SolveStatus::Optimal {
            return Err(Stage1Error::Coordinator {
                status: primary.status,
                round: self.state.round,
            });
        }
        let v_star = primary.objective;
        let budget = v_star + 1e-7 * (1.0 + v_star.abs());

        // Tie level 1: among optimal points, build as little as possible.
        let mut secondary = self.tpc.mip.clone();
        let cost_terms: Vec<(usize, f64)> = secondary
            .lp
            .cost
            .iter()
            .enumerate()
            .filter(|(_, &c)| c != 0.0)
            .map(|(j, &c)| (j, c))
            .collect();
        secondary.lp.add_row(Bound::at_most(budget), &cost_terms);
        secondary.lp.cost = vec![0.0; secondary.lp.n_vars()];
        for &uv in &self.tpc.u_var {
            secondary.lp.cost[uv] = 1.0;
        }
        let sec_sol = solve_milp(&secondary, self.cfg.milp_rel_gap)?;
        if sec_sol.status != SolveStatus::Optimal {
            return Err(Stage1Error::Coordinator {
                status: sec_sol.status,
                round: self.state.round,
            });
        }
        let u: Vec<bool> = self.tpc.u_var.iter().map(|&uv| sec_sol.x[uv] > 0.5).collect();

        // Tie level 2: restrict to the exact optimal face, then keep every
        // copy as close to zero as possible so unpriced copies rest at
        // zero. Complementary slackness pins the face: variables with a
        // nonzero reduced cost sit exactly at a bound and are frozen
        // there, rows with a nonzero dual stay binding at their exact
        // bound. A budget row would instead hold priced copies only
        // within the feasibility tolerance, letting them drift off their
        // vertex by tolerance-sized amounts that the regions can never
        // match.
        let mut tertiary = self.tpc.mip.lp.clone();
        for (j, &int) in self.tpc.mip.integral.iter().enumerate() {
            if int {
                tertiary.var_bounds[j] = Bound::fixed(sec_sol.x[j].round());
            }
        }
        let face = solve_lp(&tertiary, FEAS_TOL)?;
        if face.status != SolveStatus::Optimal {
            return Err(Stage1Error::Coordinator {
                status: face.status,
                round: self.state.round,
            });
        }
        let mut reduced = tertiary.cost.clone();
        let mut scale = vec![1.0f64; tertiary.n_vars()];
        for &(i, j, a) in &tertiary.entries {
            reduced[j] -= a * face.row_duals[i];
            scale[j] += (a * face.row_duals[i]).abs();
        }
        for j in 0..tertiary.n_vars() {
            if reduced[j].abs() > 1e-6 * scale[j] {
                tertiary.var_bounds[j] = Bound::fixed(face.x[j]);
            }
        }
        let mut activity = vec![0.0f64; tertiary.n_rows()];
        for &(i, j, a) in &tertiary.entries {
            activity[i] += a * face.x[j];
        }
        let dual_scale = 1.0 + face.row_duals.iter().fold(0.0f64, |m, y| m.max(y.abs()));
        for i in 0..tertiary.n_rows() {
            if face.row_duals[i].abs() > 1e-7 * dual_scale {
                let b = tertiary.row_bounds[i];
                let side = if (activity[i] - b.lower).abs() <= (activity[i] - b.upper).abs() {
                    b.lower
                } else {
                    b.upper
                };
                tertiary.row_bounds[i] = Bound::fixed(side);
            }
        }
        tertiary.cost = vec![0.0; tertiary.n_vars()];
        let mut copy_vars: Vec<usize> = Vec::new();
        for s in 0..n_s {
            copy_vars.extend(&self.tpc.flow_cand_var[s]);
            copy_vars.extend(&self.tpc.flow_line_var[s]);
            copy_vars.extend(&self.tpc.diff_var[s]);
            copy_vars.extend(&self.tpc.t_cand_var[s]);
            copy_vars.extend(&self.tpc.t_line_var[s]);
        }
        for &v in &copy_vars {
            let t = tertiary.add_var("t_norm", 1.0, Bound::at_least(0.0));
            tertiary.add_row(Bound::at_least(0.0), &[(t, 1.0), (v, -1.0)]);
            tertiary.add_row(Bound::at_least(0.0), &[(t, 1.0), (v, 1.0)]);
        }
        let ter_sol = solve_lp(&tertiary, FEAS_TOL)?;
        if ter_sol.status != SolveStatus::Optimal {
            return Err(Stage1Error::Coordinator {
                status: ter_sol.status,
                round: self.state.round,
            });
        }

        let mut copies = GlobalCopies::zeros(n_s, n_k, n_h);
        copies.u = u;
        for s in 0..n_s {
            for k in 0..n_k {
                copies.flow_cand[s][k] = ter_sol.x[self.tpc.copy_cand(self.cfg.mode, s, k)];
            }
            for hs in 0..n_h {
                copies.flow_line[s][hs] = ter_sol.x[self.tpc.copy_line(self.cfg.mode, s, hs)];
            }
            for e in 0..n_k + n_h {
                copies.diff[s][e] = ter_sol.x[self.tpc.diff_var[s][e]];
            }
        }

        let mut ub_tpc = vec![f64::INFINITY; n_z];
        for z in 0..n_z {
            if let Some(prop) = self.state.proposals[z].clone() {
                ub_tpc[z] = self.recovery_eval(z, &prop, &copies)?;
            }
        }

        Ok(TpcDecision {
            round: self.state.round,
            copies,
            objective: v_star,
            relaxation: relax.objective,
            ub_tpc,
        })
    }

    pub fn ingest_decision(&mut self, decision: TpcDecision) {
        self.state.decision = Some(decision);
    }

    /// Coordinator objective with every copy pinned to a recovered primal
    /// profile: region `z`'s elements at `z`'s proposal, every other
    /// element at the claim of its lowest-indexed stakeholder, and
    /// stakeholder-free elements at the coordinator's own decision. `+inf`
    /// when a pin is unreachable (out of bounds or infeasible).
    ///
    /// Full pinning keeps this a genuine evaluation of a claimed plan: it
    /// coincides with the coordinator's free optimum only when the claims
    /// agree with it on every priced element, so the recovery bound cannot
    /// collapse back into the lower bound while regions still disagree.
    fn recovery_eval(
        &self,
        z: usize,
        prop: &RegionalProposal,
        decided: &GlobalCopies,
    ) -> Result<f64, Stage1Error> {
        let mut pinned = self.tpc.mip.clone();
        let ctx = &self.regions[z];
        let n_s = self.net.scenarios.len();
        let n_k = self.net.candidate_lines.len();
        let n_h = self.shared_lines.len();
        let pin = |lp: &mut LinearProgram, var: usize, value: f64| -> bool {
            let b = lp.var_bounds[var];
            let tol = 1e-6 * (1.0 + value.abs());
            if value < b.lower - tol || value > b.upper + tol {
                return false;
            }
            lp.var_bounds[var] = Bound::fixed(value.clamp(b.lower, b.upper));
            true
        };
        let mode = self.cfg.mode;
        // The proposal whose copies pin an element z does not touch.
        let claimant = |k: usize| -> Option<&RegionalProposal> {
            self.stakeholders[k]
                .iter()
                .filter(|w| w.0 != z)
                .find_map(|w| self.state.proposals[w.0].as_ref())
        };
        let line_claimant = |hs: usize| -> Option<&RegionalProposal> {
            let line = &self.net.existing_lines[self.shared_lines[hs].0];
            let (za, zb) = self.net.line_regions(line.from, line.to);
            [za, zb]
                .into_iter()
                .filter(|w| w.0 != z)
                .find_map(|w| self.state.proposals[w.0].as_ref())
        };
        let as_copy = |f: f64| match mode {
            FlowConsensusMode::Signed => f,
            FlowConsensusMode::Magnitude => f.abs(),
        };
        for k in 0..n_k {
            let u = if ctx.stakes.contains(&k) {
                prop.copies.u[k]
            } else if let Some(p) = claimant(k) {
                p.copies.u[k]
            } else {
                decided.u[k]
            };
            if !pin(&mut pinned.lp, self.tpc.u_var[k], b2f(u)) {
                return Ok(f64::INFINITY);
            }
        }
        for s in 0..n_s {
            for k in 0..n_k {
                let (flow, diff) = if ctx.stakes.contains(&k) {
                    (as_copy(prop.copies.flow_cand[s][k]), prop.copies.diff[s][k])
                } else if let Some(p) = claimant(k) {
                    (as_copy(p.copies.flow_cand[s][k]), p.copies.diff[s][k])
                } else {
                    (decided.flow_cand[s][k], decided.diff[s][k])
                };
                if !pin(&mut pinned.lp, self.tpc.copy_cand(mode, s, k), flow)
                    || !pin(&mut pinned.lp, self.tpc.diff_var[s][k], diff)
                {
                    return Ok(f64::INFINITY);
                }
            }
            for hs in 0..n_h {
                let e = n_k + hs;
                let (flow, diff) = if ctx.shared_local.contains(&hs) {
                    (as_copy(prop.copies.flow_line[s][hs]), prop.copies.diff[s][e])
                } else if let Some(p) = line_claimant(hs) {
                    (as_copy(p.copies.flow_line[s][hs]), p.copies.diff[s][e])
                } else {
                    (decided.flow_line[s][hs], decided.diff[s][e])
                };
                if !pin(&mut pinned.lp, self.tpc.copy_line(mode, s, hs), flow)
                    || !pin(&mut pinned.lp, self.tpc.diff_var[s][e], diff)
                {
                    return Ok(f64::INFINITY);
                }
            }
        }
        let sol = solve_milp(&pinned, self.cfg.milp_rel_gap)?;
        match sol.status {
            SolveStatus::Optimal => Ok(sol.objective),
            SolveStatus::Infeasible => Ok(f64::INFINITY),
            status => Err(Stage1Error::Coordinator {
                status,
                round: self.state.round,
            }),
        }
    }

    /// Recomputes the bound pair from the latest proposals and decision.
    /// Requires every region to have proposed at least once.
    pub fn update_bounds(&mut self) -> Result<(), Stage1Error> {
        let decision = self
            .state
            .decision
            .as_ref()
            .ok_or_else(|| Stage1Error::Invariant("bounds need a coordinator decision".into()))?;
        let mut lb = decision.relaxation;
        let mut ub = decision.ub_tpc.iter().copied().fold(f64::INFINITY, f64::min);
        for z in 0..self.regions.len() {
            let prop = self.state.proposals[z].as_ref().ok_or_else(|| {
                Stage1Error::Invariant(format!("bounds need a proposal from region {z}"))
            })?;
            lb += prop.relaxation;
            ub += prop.objective;
        }
        self.state.best_lb = self.state.best_lb.max(lb);
        self.state.ub = ub;
        self.state.gap = if ub > 0.0 {
            1.0 - self.state.best_lb / ub
        } else {
            f64::INFINITY
        };
        Ok(())
    }

    /// Whether every stakeholder copy currently agrees with the
    /// coordinator within tolerance. Angle agreement for a candidate is
    /// only meaningful while someone wants it built; an unbuilt line
    /// constrains no angles.
    pub fn consensus_reached(&self) -> bool {
        let Some(decision) = self.state.decision.as_ref() else {
            return false;
        };
        let n_s = self.net.scenarios.len();
        let n_k = self.net.candidate_lines.len();
        for (z, ctx) in self.regions.iter().enumerate() {
            let Some(prop) = self.state.proposals[z].as_ref() else {
                return false;
            };
            for &k in &ctx.stakes {
                if prop.copies.u[k] != decision.copies.u[k] {
                    return false;
                }
            }
            for s in 0..n_s {
                for &k in &ctx.stakes {
                    let own = match self.cfg.mode {
                        FlowConsensusMode::Signed => prop.copies.flow_cand[s][k],
                        FlowConsensusMode::Magnitude => prop.copies.flow_cand[s][k].abs(),
                    };
                    if (own - decision.copies.flow_cand[s][k]).abs() > self.cfg.consensus_flow_tol
                    {
                        return false;
                    }
                }
                for &hs in &ctx.shared_local {
                    let own = match self.cfg.mode {
                        FlowConsensusMode::Signed => prop.copies.flow_line[s][hs],
                        FlowConsensusMode::Magnitude => prop.copies.flow_line[s][hs].abs(),
                    };
                    if (own - decision.copies.flow_line[s][hs]).abs() > self.cfg.consensus_flow_tol
                    {
                        return false;
                    }
                }
                for &e in &ctx.elements {
                    if e < n_k && !self.element_active(e) {
                        continue;
                    }
                    let half_own = prop.copies.diff[s][e] / 2.0;
                    let half_tpc = decision.copies.diff[s][e] / 2.0;
                    if (half_own - half_tpc).abs() > self.cfg.consensus_angle_tol {
                        return false;
                    }
                }
            }
        }
        true
    }

    /// Worst copy disagreements at the current round: (flow MW, angle rad,
    /// number of build mismatches). Diagnostic counterpart of
    /// [`Self::consensus_reached`].
    pub fn consensus_residuals(&self) -> (f64, f64, usize) {
        let Some(decision) = self.state.decision.as_ref() else {
            return (f64::INFINITY, f64::INFINITY, usize::MAX);
        };
        let n_s = self.net.scenarios.len();
        let n_k = self.net.candidate_lines.len();
        let mut flow_res: f64 = 0.0;
        let mut angle_res: f64 = 0.0;
        let mut u_mismatch = 0usize;
        for (z, ctx) in self.regions.iter().enumerate() {
            let Some(prop) = self.state.proposals[z].as_ref() else {
                return (f64::INFINITY, f64::INFINITY, usize::MAX);
            };
            for &k in &ctx.stakes {
                if prop.copies.u[k] != decision.copies.u[k] {
                    u_mismatch += 1;
                }
            }
            for s in 0..n_s {
                for &k in &ctx.stakes {
                    let own = match self.cfg.mode {
                        FlowConsensusMode::Signed => prop.copies.flow_cand[s][k],
                        FlowConsensusMode::Magnitude => prop.copies.flow_cand[s][k].abs(),
                    };
                    flow_res = flow_res.max((own - decision.copies.flow_cand[s][k]).abs());
                }
                for &hs in &ctx.shared_local {
                    let own = match self.cfg.mode {
                        FlowConsensusMode::Signed => prop.copies.flow_line[s][hs],
                        FlowConsensusMode::Magnitude => prop.copies.flow_line[s][hs].abs(),
                    };
                    flow_res = flow_res.max((own - decision.copies.flow_line[s][hs]).abs());
                }
                for &e in &ctx.elements {
                    if e < n_k && !self.element_active(e) {
                        continue;
                    }
                    let half = (prop.copies.diff[s][e] - decision.copies.diff[s][e]) / 2.0;
                    angle_res = angle_res.max(half.abs());
                }
            }
        }
        (flow_res, angle_res, u_mismatch)
    }

    /// A candidate element is active while the coordinator or any
    /// stakeholder proposes building it.
    fn element_active(&self, k: usize) -> bool {
        if let Some(d) = &self.state.decision {
            if d.copies.u[k] {
                return true;
            }
        }
        self.stakeholders[k].iter().any(|&z| {
            self.state.proposals[z.0]
                .as_ref()
                .is_some_and(|p| p.copies.u[k])
        })
    }

    /// Applies the price updates for every participating region from its
    /// latest proposal against the latest coordinator decision, then
    /// advances those regions' step counters.
    pub fn update_duals(&mut self, participants: &[bool]) -> Result<(), Stage1Error> {
        let decision = self
            .state
            .decision
            .clone()
            .ok_or_else(|| Stage1Error::Invariant("updates need a coordinator decision".into()))?;
        let n_s = self.net.scenarios.len();
        let n_k = self.net.candidate_lines.len();
        for z in 0..self.regions.len() {
            if !participants.get(z).copied().unwrap_or(false) {
                continue;
            }
            let prop = self.state.proposals[z].clone().ok_or_else(|| {
                Stage1Error::Invariant(format!("updates need a proposal from region {z}"))
            })?;
            let step = self.step_size(z);
            let ctx = &self.regions[z];
            let duals = &mut self.state.duals[z];
            for &k in &ctx.stakes {
                duals.pi[k] += step * (b2f(prop.copies.u[k]) - b2f(decision.copies.u[k]));
            }
            for s in 0..n_s {
                for &k in &ctx.stakes {
                    let own = match self.cfg.mode {
                        FlowConsensusMode::Signed => prop.copies.flow_cand[s][k],
                        FlowConsensusMode::Magnitude => prop.copies.flow_cand[s][k].abs(),
                    };
                    duals.mu_cand[s][k] += step * (own - decision.copies.flow_cand[s][k]);
                }
                for &hs in &ctx.shared_local {
                    let own = match self.cfg.mode {
                        FlowConsensusMode::Signed => prop.copies.flow_line[s][hs],
                        FlowConsensusMode::Magnitude => prop.copies.flow_line[s][hs].abs(),
                    };
                    duals.mu_line[s][hs] += step * (own - decision.copies.flow_line[s][hs]);
                }
                for &e in &ctx.elements {
                    let half_own = prop.copies.diff[s][e] / 2.0;
                    let half_tpc = decision.copies.diff[s][e] / 2.0;
                    duals.xi[s][e][0] += step * (half_own - half_tpc);
                    duals.xi[s][e][1] += step * (half_tpc - half_own);
                }
            }
            self.state.nu[z] += 1;
        }
        // Angle prices of a candidate nobody wants are prices on nothing:
        // the copies they act on are unconstrained box vertices. Reset
        // them so they cannot bias objectives; dropping prices never
        // invalidates the lower bound.
        for k in 0..n_k {
            if !self.element_active(k) {
                for &z in &self.stakeholders[k] {
                    for s in 0..n_s {
                        self.state.duals[z.0].xi[s][k] = [0.0; 2];
                    }
                }
            }
        }
        Ok(())
    }

    /// Appends one trace row per region for the current round.
    pub fn append_trace(&mut self) {
        let n_k = self.net.candidate_lines.len();
        let u_tpc: String = match &self.state.decision {
            Some(d) => d.copies.u.iter().map(|&b| if b { '1' } else { '0' }).collect(),
            None => "-".repeat(n_k),
        };
        for (z, ctx) in self.regions.iter().enumerate() {
            let u_prop: String = (0..n_k)
                .map(|k| match &self.state.proposals[z] {
                    Some(p) if ctx.stakes.contains(&k) => {
                        if p.copies.u[k] {
                            '1'
                        } else {
                            '0'
                        }
                    }
                    _ => '-',
                })
                .collect();
            self.state.trace.push(Stage1TraceRow {
                nu: self.state.round,
                region: ctx.name.clone(),
                u_prop,
                u_tpc: u_tpc.clone(),
                lb: self.state.best_lb,
                ub: self.state.ub,
                gap: self.state.gap,
            });
        }
    }

    /// Stop test, in precedence order: copy consensus, closed bound gap,
    /// round limit. A negative gap (lower bound above the recovery value,
    /// which the recovery recipe permits) never stops the run by itself.
    /// The gap exit additionally requires unanimous build decisions:
    /// before the first price updates the recovery value prices
    /// disagreements at zero, so a small gap while regions still dispute
    /// the build set certifies nothing.
    pub fn check_termination(&self) -> Option<StopReason> {
        if self.consensus_reached() {
            return Some(StopReason::Consensus);
        }
        let (_, _, u_mismatch) = self.consensus_residuals();
        if u_mismatch == 0
            && self.state.ub > 0.0
            && self.state.gap >= GAP_DUST
            && self.state.gap <= self.cfg.epsilon
        {
            return Some(StopReason::GapClosed);
        }
        if self.state.round >= self.cfg.max_rounds {
            return Some(StopReason::RoundLimit);
        }
        None
    }

    /// Closes the negotiation: fixes the build vector to the
    /// coordinator's decision and prices out the physical plan.
    pub fn finish(self, reason: StopReason) -> Result<Stage1Result, Stage1Error> {
        let consensus = self.consensus_reached();
        let decision = self
            .state
            .decision
            .ok_or_else(|| Stage1Error::Invariant("finished without a decision".into()))?;
        let mut proposals = Vec::with_capacity(self.regions.len());
        for (z, p) in self.state.proposals.into_iter().enumerate() {
            proposals.push(p.ok_or_else(|| {
                Stage1Error::Invariant(format!("finished without a proposal from region {z}"))
            })?);
        }
        let u_star = decision.copies.u.clone();
        let ub_phys = solve_fixed_u(&self.net, &u_star)?;
        Ok(Stage1Result {
            reason,
            consensus,
            rounds: self.state.round,
            u_star,
            best_lb: self.state.best_lb,
            ub: self.state.ub,
            gap: self.state.gap,
            duals: self.state.duals,
            globals: decision.copies,
            proposals,
            ub_phys,
            trace: self.state.trace,
        })
    }

    // ---- objective refresh ----

    fn refresh_regional_cost(&mut self, z: usize) {
        let ctx = &self.regions[z];
        let duals = &self.state.duals[z];
        let model = &mut self.models[z];
        let n_s = self.net.scenarios.len();
        let mut cost = model.base_cost.clone();
        for (ik, &k) in ctx.stakes.iter().enumerate() {
            cost[model.u_var[ik]] += duals.pi[k];
        }
        for s in 0..n_s {
            for (ik, &k) in ctx.stakes.iter().enumerate() {
                match self.cfg.mode {
                    FlowConsensusMode::Signed => {
                        cost[model.flow_cand_var[s][ik]] += duals.mu_cand[s][k]
                    }
                    FlowConsensusMode::Magnitude => {
                        cost[model.t_cand_var[s][ik]] += duals.mu_cand[s][k]
                    }
                }
            }
            for (il, &hs) in ctx.shared_local.iter().enumerate() {
                match self.cfg.mode {
                    FlowConsensusMode::Signed => {
                        cost[model.flow_line_var[s][il]] += duals.mu_line[s][hs]
                    }
                    FlowConsensusMode::Magnitude => {
                        cost[model.t_line_var[s][il]] += duals.mu_line[s][hs]
                    }
                }
            }
            for (ie, &e) in ctx.elements.iter().enumerate() {
                // ξ prices the exchanged pair (d/2, −d/2), so the angle
                // ends see the antisymmetric combination.
                let coef = (duals.xi[s][e][0] - duals.xi[s][e][1]) / 2.0;
                let (vi, vj) = model.elem_ends[s][ie];
                cost[vi] += coef;
                cost[vj] -= coef;
            }
        }
        model.mip.lp.cost = cost;
    }

    fn refresh_tpc_cost(&mut self) {
        let n_s = self.net.scenarios.len();
        let n_k = self.net.candidate_lines.len();
        let n_h = self.shared_lines.len();
        let mut cost = vec![0.0; self.tpc.mip.lp.n_vars()];
        for k in 0..n_k {
            let total: f64 = self
                .stakeholders[k]
                .iter()
                .map(|&z| self.state.duals[z.0].pi[k])
                .sum();
            cost[self.tpc.u_var[k]] = -total;
        }
        for s in 0..n_s {
            for k in 0..n_k {
                let total: f64 = self
                    .stakeholders[k]
                    .iter()
                    .map(|&z| self.state.duals[z.0].mu_cand[s][k])
                    .sum();
                cost[self.tpc.copy_cand(self.cfg.mode, s, k)] = -total;
            }
            for (hs, &h) in self.shared_lines.iter().enumerate() {
                let line = &self.net.existing_lines[h.0];
                let (za, zb) = self.net.line_regions(line.from, line.to);
                let total =
                    self.state.duals[za.0].mu_line[s][hs] + self.state.duals[zb.0].mu_line[s][hs];
                cost[self.tpc.copy_line(self.cfg.mode, s, hs)] = -total;
            }
            for e in 0..n_k + n_h {
                let stake_regions: Vec<RegionId> = if e < n_k {
                    self.stakeholders[e].clone()
                } else {
                    let line = &self.net.existing_lines[self.shared_lines[e - n_k].0];
                    let (za, zb) = self.net.line_regions(line.from, line.to);
                    vec![za, zb]
                };
                let total: f64 = stake_regions
                    .iter()
                    .map(|&z| {
                        let xi = &self.state.duals[z.0].xi[s][e];
                        (xi[0] - xi[1]) / 2.0
                    })
                    .sum();
                cost[self.tpc.diff_var[s][e]] = -total;
            }
        }
        self.tpc.mip.lp.cost = cost;
    }
}

// ---- model construction ----

/// Adds `t = |f|` exactly. Prices may reward as well as penalize a
/// magnitude, so the epigraph needs both one-sided caps, selected by a
/// binary.
fn add_magnitude_var(
    lp: &mut LinearProgram,
    integral: &mut Vec<bool>,
    f: usize,
    cap: f64,
    tag: &str,
) -> usize {
    let t = lp.add_var(format!("t_{tag}"), 0.0, Bound::range(0.0, cap));
    let b = lp.add_var(format!("b_{tag}"), 0.0, Bound::range(0.0, 1.0));
    integral.resize(lp.n_vars(), false);
    integral[b] = true;
    lp.add_row(Bound::at_least(0.0), &[(t, 1.0), (f, -1.0)]);
    lp.add_row(Bound::at_least(0.0), &[(t, 1.0), (f, 1.0)]);
    lp.add_row(Bound::at_most(2.0 * cap), &[(t, 1.0), (f, -1.0), (b, 2.0 * cap)]);
    lp.add_row(Bound::at_most(0.0), &[(t, 1.0), (f, 1.0), (b, -2.0 * cap)]);
    t
}

fn build_region_ctx(
    net: &Network,
    z: RegionId,
    shared_lines: &[LineId],
    stakeholders: &[Vec<RegionId>],
) -> RegionCtx {
    let nodes = net.nodes_in_region(z);
    let in_z = |n: NodeId| net.region_of(n) == z;
    let gens = (0..net.generators.len())
        .filter(|&g| in_z(net.generators[g].node))
        .collect();
    let internal_lines = (0..net.existing_lines.len())
        .filter(|&h| {
            let l = &net.existing_lines[h];
            in_z(l.from) && in_z(l.to)
        })
        .collect();
    let shared_local: Vec<usize> = (0..shared_lines.len())
        .filter(|&hs| {
            let l = &net.existing_lines[shared_lines[hs].0];
            in_z(l.from) || in_z(l.to)
        })
        .collect();
    let stakes: Vec<usize> = (0..net.candidate_lines.len())
        .filter(|&k| stakeholders[k].contains(&z))
        .collect();
    let mut foreign: Vec<NodeId> = Vec::new();
    let mut add_foreign = |n: NodeId| {
        if !in_z(n) && !foreign.contains(&n) {
            foreign.push(n);
        }
    };
    for &k in &stakes {
        add_foreign(net.candidate_lines[k].from);
        add_foreign(net.candidate_lines[k].to);
    }
    for &hs in &shared_local {
        let l = &net.existing_lines[shared_lines[hs].0];
        add_foreign(l.from);
        add_foreign(l.to);
    }
    foreign.sort();
    let n_k = net.candidate_lines.len();
    let mut elements: Vec<usize> = stakes.clone();
    elements.extend(shared_local.iter().map(|&hs| n_k + hs));
    RegionCtx {
        name: net.regions[z.0].name.clone(),
        nodes,
        gens,
        internal_lines,
        shared_local,
        stakes,
        foreign,
        elements,
    }
}

fn build_regional_model(
    net: &Network,
    ctx: &RegionCtx,
    shared_lines: &[LineId],
    mode: FlowConsensusMode,
) -> Result<RegionalModel, Stage1Error> {
    let mut lp = LinearProgram::default();
    let mut integral: Vec<bool> = Vec::new();
    let n_s = net.scenarios.len();
    let b = net.angle_bound;

    let mut u_var = Vec::with_capacity(ctx.stakes.len());
    for &k in &ctx.stakes {
        let cand = &net.candidate_lines[k];
        let share = net.candidate_share(net.region_of(ctx.nodes[0]), CandId(k));
        let annual = share * net.annualized_build_cost(CandId(k))?;
        let v = lp.add_var(format!("u_{}", cand.name), annual, Bound::range(0.0, 1.0));
        integral.resize(lp.n_vars(), false);
        integral[v] = true;
        u_var.push(v);
    }

    let mut flow_cand_var = vec![Vec::new(); n_s];
    let mut flow_line_var = vec![Vec::new(); n_s];
    let mut t_cand_var = vec![Vec::new(); n_s];
    let mut t_line_var = vec![Vec::new(); n_s];
    let mut elem_ends = vec![Vec::new(); n_s];

    for s in 0..n_s {
        let w = net.scenarios[s].weight;
        // Generation as one variable per cost segment.
        let mut gen_segs: Vec<Vec<usize>> = Vec::with_capacity(ctx.gens.len());
        for &g in &ctx.gens {
            let gen = &net.generators[g];
            let mut segs = Vec::with_capacity(gen.segments.len());
            let mut prev = 0.0;
            for (i, seg) in gen.segments.iter().enumerate() {
                let width = seg.upper_bound - prev;
                prev = seg.upper_bound;
                segs.push(lp.add_var(
                    format!("p_{}_{}_s{}", gen.name, i, s),
                    w * seg.marginal_cost,
                    Bound::range(0.0, width),
                ));
            }
            gen_segs.push(segs);
        }
        // Own angles, then one shared copy per foreign boundary node so
        // parallel shared elements stay mutually consistent.
        let theta: Vec<usize> = ctx
            .nodes
            .iter()
            .map(|&n| {
                lp.add_var(
                    format!("th_{}_s{}", net.nodes[n.0].name, s),
                    0.0,
                    Bound::range(-b, b),
                )
            })
            .collect();
        let theta_far: Vec<usize> = ctx
            .foreign
            .iter()
            .map(|&n| {
                lp.add_var(
                    format!("thf_{}_s{}", net.nodes[n.0].name, s),
                    0.0,
                    Bound::range(-b, b),
                )
            })
            .collect();
        let angle_of = |n: NodeId| -> usize {
            if let Some(i) = ctx.nodes.iter().position(|&m| m == n) {
                theta[i]
            } else {
                let i = ctx.foreign.iter().position(|&m| m == n).expect("boundary node");
                theta_far[i]
            }
        };

        let mut internal_flow = Vec::with_capacity(ctx.internal_lines.len());
        for &h in &ctx.internal_lines {
            let line = &net.existing_lines[h];
            let f = lp.add_var(
                format!("f_{}_s{}", line.name, s),
                0.0,
                Bound::range(-line.capacity, line.capacity),
            );
            lp.add_row(
                Bound::fixed(0.0),
                &[
                    (f, 1.0),
                    (angle_of(line.from), -1.0 / line.reactance),
                    (angle_of(line.to), 1.0 / line.reactance),
                ],
            );
            internal_flow.push(f);
        }
        for &hs in &ctx.shared_local {
            let line = &net.existing_lines[shared_lines[hs].0];
            let f = lp.add_var(
                format!("f_{}_s{}", line.name, s),
                0.0,
                Bound::range(-line.capacity, line.capacity),
            );
            lp.add_row(
                Bound::fixed(0.0),
                &[
                    (f, 1.0),
                    (angle_of(line.from), -1.0 / line.reactance),
                    (angle_of(line.to), 1.0 / line.reactance),
                ],
            );
            flow_line_var[s].push(f);
        }
        for (ik, &k) in ctx.stakes.iter().enumerate() {
            let cand = &net.candidate_lines[k];
            let m = big_m(cand, net);
            let f = lp.add_var(
                format!("f_{}_s{}", cand.name, s),
                0.0,
                Bound::range(-cand.capacity, cand.capacity),
            );
            let (vi, vj) = (angle_of(cand.from), angle_of(cand.to));
            let x = cand.reactance;
            let uv = u_var[ik];
            lp.add_row(
                Bound::at_most(m),
                &[(f, 1.0), (vi, -1.0 / x), (vj, 1.0 / x), (uv, m)],
            );
            lp.add_row(
                Bound::at_least(-m),
                &[(f, 1.0), (vi, -1.0 / x), (vj, 1.0 / x), (uv, -m)],
            );
            lp.add_row(Bound::at_most(0.0), &[(f, 1.0), (uv, -cand.capacity)]);
            lp.add_row(Bound::at_least(0.0), &[(f, 1.0), (uv, cand.capacity)]);
            flow_cand_var[s].push(f);
        }
        if mode == FlowConsensusMode::Magnitude {
            for (ik, &k) in ctx.stakes.iter().enumerate() {
                let cand = &net.candidate_lines[k];
                let t = add_magnitude_var(
                    &mut lp,
                    &mut integral,
                    flow_cand_var[s][ik],
                    cand.capacity,
                    &format!("{}_s{}", cand.name, s),
                );
                t_cand_var[s].push(t);
            }
            for (il, &hs) in ctx.shared_local.iter().enumerate() {
                let line = &net.existing_lines[shared_lines[hs].0];
                let t = add_magnitude_var(
                    &mut lp,
                    &mut integral,
                    flow_line_var[s][il],
                    line.capacity,
                    &format!("{}_s{}", line.name, s),
                );
                t_line_var[s].push(t);
            }
        }

        // Balance at own nodes only; each shared element contributes
        // through this region's own flow copy.
        let gens_at = net.gens_by_node();
        let loads_at = net.loads_by_node();
        for (ln, &n) in ctx.nodes.iter().enumerate() {
            let mut terms: Vec<(usize, f64)> = Vec::new();
            for &g in &gens_at[n.0] {
                let ig = ctx.gens.iter().position(|&gg| gg == g.0).expect("own gen");
                for &sv in &gen_segs[ig] {
                    terms.push((sv, 1.0));
                }
            }
            for (i, &h) in ctx.internal_lines.iter().enumerate() {
                let line = &net.existing_lines[h];
                if line.to == n {
                    terms.push((internal_flow[i], 1.0));
                }
                if line.from == n {
                    terms.push((internal_flow[i], -1.0));
                }
            }
            for (il, &hs) in ctx.shared_local.iter().enumerate() {
                let line = &net.existing_lines[shared_lines[hs].0];
                if line.to == n {
                    terms.push((flow_line_var[s][il], 1.0));
                }
                if line.from == n {
                    terms.push((flow_line_var[s][il], -1.0));
                }
            }
            for (ik, &k) in ctx.stakes.iter().enumerate() {
                let cand = &net.candidate_lines[k];
                if cand.to == n {
                    terms.push((flow_cand_var[s][ik], 1.0));
                }
                if cand.from == n {
                    terms.push((flow_cand_var[s][ik], -1.0));
                }
            }
            let demand: f64 = loads_at[n.0]
                .iter()
                .map(|&d| net.demand(crate::netmodel::ScenId(s), d))
                .sum();
            let _ = ln;
            lp.add_row(Bound::fixed(demand), &terms);
        }
        for (ig, &g) in ctx.gens.iter().enumerate() {
            let (p_min, p_max) = net.gen_limits(crate::netmodel::ScenId(s), crate::netmodel::GenId(g));
            let terms: Vec<(usize, f64)> = gen_segs[ig].iter().map(|&v| (v, 1.0)).collect();
            lp.add_row(Bound::range(p_min, p_max), &terms);
        }
        for (ie, &e) in ctx.elements.iter().enumerate() {
            let n_k = net.candidate_lines.len();
            let (from, to) = if e < n_k {
                (net.candidate_lines[e].from, net.candidate_lines[e].to)
            } else {
                let line = &net.existing_lines[shared_lines[e - n_k].0];
                (line.from, line.to)
            };
            elem_ends[s].push((angle_of(from), angle_of(to)));
            let _ = ie;
        }
    }

    integral.resize(lp.n_vars(), false);
    let base_cost = lp.cost.clone();
    let mip = MixedIntegerProgram { lp, integral };
    mip.validate()?;
    Ok(RegionalModel {
        mip,
        base_cost,
        u_var,
        flow_cand_var,
        flow_line_var,
        t_cand_var,
        t_line_var,
        elem_ends,
    })
}

fn build_tpc_model(
    net: &Network,
    shared_lines: &[LineId],
    mode: FlowConsensusMode,
) -> Result<TpcModel, Stage1Error> {
    let mut lp = LinearProgram::default();
    let mut integral: Vec<bool> = Vec::new();
    let n_s = net.scenarios.len();
    let n_k = net.candidate_lines.len();
    let n_h = shared_lines.len();
    let d_box = 2.0 * net.angle_bound;

    let mut u_var = Vec::with_capacity(n_k);
    for k in 0..n_k {
        let v = lp.add_var(
            format!("u_{}", net.candidate_lines[k].name),
            0.0,
            Bound::range(0.0, 1.0),
        );
        integral.resize(lp.n_vars(), false);
        integral[v] = true;
        u_var.push(v);
    }
    let mut flow_cand_var = vec![Vec::new(); n_s];
    let mut flow_line_var = vec![Vec::new(); n_s];
    let mut t_cand_var = vec![Vec::new(); n_s];
    let mut t_line_var = vec![Vec::new(); n_s];
    let mut diff_var = vec![vec![0usize; n_k + n_h]; n_s];
    for s in 0..n_s {
        for k in 0..n_k {
            let cand = &net.candidate_lines[k];
            let f = lp.add_var(
                format!("F_{}_s{}", cand.name, s),
                0.0,
                Bound::range(-cand.capacity, cand.capacity),
            );
            let d = lp.add_var(
                format!("D_{}_s{}", cand.name, s),
                0.0,
                Bound::range(-d_box, d_box),
            );
            let m = big_m(cand, net);
            let x = cand.reactance;
            lp.add_row(
                Bound::at_most(m),
                &[(f, 1.0), (d, -1.0 / x), (u_var[k], m)],
            );
            lp.add_row(
                Bound::at_least(-m),
                &[(f, 1.0), (d, -1.0 / x), (u_var[k], -m)],
            );
            lp.add_row(Bound::at_most(0.0), &[(f, 1.0), (u_var[k], -cand.capacity)]);
            lp.add_row(Bound::at_least(0.0), &[(f, 1.0), (u_var[k], cand.capacity)]);
            flow_cand_var[s].push(f);
            diff_var[s][k] = d;
            if mode == FlowConsensusMode::Magnitude {
                let t = add_magnitude_var(
                    &mut lp,
                    &mut integral,
                    f,
                    cand.capacity,
                    &format!("{}_s{}", cand.name, s),
                );
                t_cand_var[s].push(t);
            }
        }
        for (hs, &h) in shared_lines.iter().enumerate() {
            let line = &net.existing_lines[h.0];
            let f = lp.add_var(
                format!("F_{}_s{}", line.name, s),
                0.0,
                Bound::range(-line.capacity, line.capacity),
            );
            let d = lp.add_var(
                format!("D_{}_s{}", line.name, s),
                0.0,
                Bound::range(-d_box, d_box),
            );
            lp.add_row(Bound::fixed(0.0), &[(f, 1.0), (d, -1.0 / line.reactance)]);
            flow_line_var[s].push(f);
            diff_var[s][n_k + hs] = d;
            if mode == FlowConsensusMode::Magnitude {
                let t = add_magnitude_var(
                    &mut lp,
                    &mut integral,
                    f,
                    line.capacity,
                    &format!("{}_s{}", line.name, s),
                );
                t_line_var[s].push(t);
            }
        }
    }
    integral.resize(lp.n_vars(), false);
    let mip = MixedIntegerProgram { lp, integral };
    mip.validate()?;
    Ok(TpcModel {
        mip,
        u_var,
        flow_cand_var,
        flow_line_var,
        diff_var,
        t_cand_var,
        t_line_var,
    })
}

/// Runs the negotiation synchronously: every region solves every round,
/// then the coordinator, then bounds, trace, stop test, price updates.
pub fn run_stage1(net: &Network, cfg: &Stage1Config) -> Result<Stage1Result, Stage1Error> {
    let mut eng = Stage1Engine::new(net, cfg.clone())?;
    let everyone = vec![true; eng.n_regions()];
    loop {
        eng.begin_round();
        for z in 0..eng.n_regions() {
            let prop = eng.solve_region(z)?;
            eng.ingest_proposal(prop);
        }
        let decision = eng.solve_tpc()?;
        eng.ingest_decision(decision);
        eng.update_bounds()?;
        eng.append_trace();
        if let Some(reason) = eng.check_termination() {
            return eng.finish(reason);
        }
        eng.update_duals(&everyone)?;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::centralized::solve_centralized;
    use crate::netmodel::tests::two_region_fixture;
    use crate::netmodel::{load_case, Generator, Load, Network, Node, Region, Scenario};

    fn cases_path(name: &str) -> std::path::PathBuf {
        std::path::Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/../../cases")).join(name)
    }

    fn engine(net: &Network) -> Stage1Engine {
        Stage1Engine::new(net, Stage1Config::default()).unwrap()
    }

    /// Hand-built proposal carrying given copies for region z.
    fn proposal(z: usize, round: usize, copies: GlobalCopies) -> RegionalProposal {
        RegionalProposal {
            region: z,
            round,
            copies,
            objective: 0.0,
            relaxation: 0.0,
        }
    }

    fn decision(round: usize, copies: GlobalCopies, n_z: usize) -> TpcDecision {
        TpcDecision {
            round,
            copies,
            objective: 0.0,
            relaxation: 0.0,
            ub_tpc: vec![0.0; n_z],
        }
    }

    #[test]
    fn step_size_decays_with_update_count() {
        let net = two_region_fixture();
        let mut eng = engine(&net);
        // alpha0=1, nu0=10, beta=|Z|=2.
        assert_eq!(eng.step_size(0), 0.5);
        eng.state.nu[0] = 10;
        assert_eq!(eng.step_size(0), 0.25);
        eng.state.nu[0] = 30;
        assert_eq!(eng.step_size(0), 0.125);
    }

    // The two-region fixture has one candidate (element 0) and one shared
    // existing line (element 1), both between the same node pair, so every
    // update formula can be pinned by hand arithmetic. Step = 0.5.
    #[test]
    fn all_seven_price_updates_match_hand_arithmetic() {
        let net = two_region_fixture();
        let mut eng = engine(&net);
        let mut own = GlobalCopies::zeros(1, 1, 1);
        own.u[0] = true;
        own.flow_cand[0][0] = 1350.0;
        own.flow_line[0][0] = 150.0;
        own.diff[0][0] = 200.0; // exchanged as (100, -100)
        own.diff[0][1] = 40.0; // exchanged as (20, -20)
        let mut tpc = GlobalCopies::zeros(1, 1, 1);
        tpc.u[0] = false;
        tpc.flow_cand[0][0] = 0.0;
        tpc.flow_line[0][0] = 20.0;
        tpc.diff[0][0] = 40.0; // (20, -20)
        tpc.diff[0][1] = 10.0; // (5, -5)
        eng.ingest_proposal(proposal(0, 1, own));
        eng.ingest_decision(decision(1, tpc, 2));
        eng.update_duals(&[true, false]).unwrap();

        let d = &eng.state.duals[0];
        // 1) build price: 0 + 0.5·(1 − 0)
        assert_eq!(d.pi[0], 0.5);
        // 2) candidate flow price: 0 + 0.5·(1350 − 0)
        assert_eq!(d.mu_cand[0][0], 675.0);
        // 3) shared line flow price: 0 + 0.5·(150 − 20)
        assert_eq!(d.mu_line[0][0], 65.0);
        // 4) candidate from-end angle price: 0 + 0.5·(100 − 20)
        assert_eq!(d.xi[0][0][0], 40.0);
        // 5) candidate to-end angle price: 0 + 0.5·(−100 − (−20))
        assert_eq!(d.xi[0][0][1], -40.0);
        // 6) shared line from-end angle price: 0 + 0.5·(20 − 5)
        assert_eq!(d.xi[0][1][0], 7.5);
        // 7) shared line to-end angle price: 0 + 0.5·(−20 − (−5))
        assert_eq!(d.xi[0][1][1], -7.5);
        // Non-participant untouched.
        assert_eq!(eng.state.duals[1].l1_norm(), 0.0);
        assert_eq!(eng.state.nu, vec![1, 0]);
    }

    #[test]
    fn dissenting_on_a_decided_build_earns_a_reward() {
        // A region proposing idle while the coordinator builds accrues a
        // negative build price: it is paid for going along with the plan.
        let net = two_region_fixture();
        let mut eng = engine(&net);
        let own = GlobalCopies::zeros(1, 1, 1);
        let mut tpc = GlobalCopies::zeros(1, 1, 1);
        tpc.u[0] = true;
        eng.ingest_proposal(proposal(1, 1, own));
        eng.ingest_decision(decision(1, tpc, 2));
        eng.update_duals(&[false, true]).unwrap();
        assert_eq!(eng.state.duals[1].pi[0], -0.5);
        assert_eq!(eng.state.duals[0].l1_norm(), 0.0);
    }

    #[test]
    fn magnitude_mode_prices_absolute_flows() {
        let net = two_region_fixture();
        let mut cfg = Stage1Config::default();
        cfg.mode = FlowConsensusMode::Magnitude;
        let mut eng = Stage1Engine::new(&net, cfg).unwrap();
        let mut own = GlobalCopies::zeros(1, 1, 1);
        own.u[0] = true;
        own.flow_cand[0][0] = -450.0;
        own.flow_line[0][0] = -50.0;
        let tpc = GlobalCopies::zeros(1, 1, 1);
        eng.ingest_proposal(proposal(1, 1, own));
        eng.ingest_decision(decision(1, tpc, 2));
        eng.update_duals(&[false, true]).unwrap();
        let d = &eng.state.duals[1];
        assert_eq!(d.mu_cand[0][0], 0.5 * 450.0);
        assert_eq!(d.mu_line[0][0], 0.5 * 50.0);
    }

    #[test]
    fn zero_residual_leaves_prices_frozen() {
        let net = two_region_fixture();
        let mut eng = engine(&net);
        let mut copies = GlobalCopies::zeros(1, 1, 1);
        copies.u[0] = true;
        copies.flow_cand[0][0] = 1350.0;
        copies.flow_line[0][0] = 150.0;
        copies.diff[0][0] = 135.0;
        copies.diff[0][1] = 135.0;
        eng.ingest_proposal(proposal(0, 1, copies.clone()));
        eng.ingest_proposal(proposal(1, 1, copies.clone()));
        eng.ingest_decision(decision(1, copies, 2));
        eng.update_duals(&[true, true]).unwrap();
        assert_eq!(eng.state.duals[0].l1_norm(), 0.0);
        assert_eq!(eng.state.duals[1].l1_norm(), 0.0);
        assert!(eng.consensus_reached());
        assert_eq!(eng.check_termination(), Some(StopReason::Consensus));
    }

    #[test]
    fn inactive_candidate_angle_prices_reset() {
        let net = two_region_fixture();
        let mut eng = engine(&net);
        // Seed nonzero angle prices on the candidate and on the line.
        eng.state.duals[0].xi[0][0] = [3.0, -3.0];
        eng.state.duals[0].xi[0][1] = [2.0, -2.0];
        let own = GlobalCopies::zeros(1, 1, 1);
        let tpc = GlobalCopies::zeros(1, 1, 1);
        eng.ingest_proposal(proposal(0, 1, own.clone()));
        eng.ingest_proposal(proposal(1, 1, own));
        eng.ingest_decision(decision(1, tpc, 2));
        eng.update_duals(&[true, true]).unwrap();
        // Nobody proposes the candidate: its angle prices are cleared;
        // the always-active existing line keeps accumulating normally.
        assert_eq!(eng.state.duals[0].xi[0][0], [0.0, 0.0]);
        assert_eq!(eng.state.duals[0].xi[0][1], [2.0, -2.0]);
    }

    #[test]
    fn coordinator_breaks_zero_price_ties_to_idle() {
        let net = two_region_fixture();
        let mut eng = engine(&net);
        eng.begin_round();
        let copies = GlobalCopies::zeros(1, 1, 1);
        eng.ingest_proposal(proposal(0, 1, copies.clone()));
        eng.ingest_proposal(proposal(1, 1, copies));
        let d = eng.solve_tpc().unwrap();
        assert_eq!(d.objective, 0.0);
        assert_eq!(d.copies.u, vec![false]);
        assert_eq!(d.copies.flow_cand[0][0], 0.0);
        assert_eq!(d.copies.flow_line[0][0], 0.0);
        assert_eq!(d.copies.diff[0], vec![0.0, 0.0]);
        // Pinning all-zero copies is feasible, so recovery terms are 0.
        assert_eq!(d.ub_tpc, vec![0.0, 0.0]);
    }

    #[test]
    fn coordinator_builds_when_build_prices_say_so() {
        let net = two_region_fixture();
        let mut eng = engine(&net);
        eng.begin_round();
        let copies = GlobalCopies::zeros(1, 1, 1);
        eng.ingest_proposal(proposal(0, 1, copies.clone()));
        eng.ingest_proposal(proposal(1, 1, copies));
        eng.state.duals[0].pi[0] = 1.0;
        eng.state.duals[1].pi[0] = 0.0;
        let d = eng.solve_tpc().unwrap();
        assert_eq!(d.copies.u, vec![true]);
        assert_eq!(d.objective, -1.0);

        // Aggregate build price against: stays idle.
        eng.state.duals[0].pi[0] = 1.0;
        eng.state.duals[1].pi[0] = -2.0;
        let d = eng.solve_tpc().unwrap();
        assert_eq!(d.copies.u, vec![false]);

        // Exact cancellation is a tie, broken to idle.
        eng.state.duals[1].pi[0] = -1.0;
        let d = eng.solve_tpc().unwrap();
        assert_eq!(d.copies.u, vec![false]);
        assert_eq!(d.objective, 0.0);
    }

    #[test]
    fn region_one_wants_the_line_at_zero_prices() {
        let net = two_region_fixture();
        let mut eng = engine(&net);
        eng.begin_round();
        let p = eng.solve_region(0).unwrap();
        assert!(p.copies.u[0]);
        assert!((p.copies.flow_cand[0][0] - 1350.0).abs() < 1e-6);
        assert!((p.copies.flow_line[0][0] - 150.0).abs() < 1e-6);
        // Parallel elements share the boundary copy, so one difference.
        assert!((p.copies.diff[0][0] - p.copies.diff[0][1]).abs() < 1e-9);
        assert!((p.copies.diff[0][0] - 135.0).abs() < 1e-6);
        // 500 MW own generation at 50 plus half the build cost.
        assert!((p.objective - 26_000.000000001).abs() < 1e-5);
    }

    #[test]
    fn cheap_region_also_grabs_free_import_capacity_at_zero_prices() {
        // At zero prices boundary copies cost nothing, so even the
        // low-cost region proposes building and displaces its own
        // generation with imports.
        let net = two_region_fixture();
        let mut eng = engine(&net);
        eng.begin_round();
        let p = eng.solve_region(1).unwrap();
        assert!(p.copies.u[0]);
        let imported = -(p.copies.flow_cand[0][0] + p.copies.flow_line[0][0]);
        assert!((imported - 500.0).abs() < 1e-6);
        assert!((p.objective - 1_000.000000001).abs() < 1e-6);
    }

    #[test]
    fn negative_gap_never_stops_the_run() {
        let net = two_region_fixture();
        let mut eng = engine(&net);
        eng.begin_round();
        // Builds agree everywhere but flows do not, so only the gap exit
        // is in play.
        let mut agreed = GlobalCopies::zeros(1, 1, 1);
        agreed.u[0] = true;
        agreed.flow_cand[0][0] = 1350.0;
        let mut drifted = agreed.clone();
        drifted.flow_cand[0][0] = 900.0;
        eng.ingest_proposal(proposal(0, 1, agreed.clone()));
        eng.ingest_proposal(proposal(1, 1, drifted));
        eng.ingest_decision(TpcDecision {
            round: 1,
            copies: agreed.clone(),
            objective: 0.0,
            relaxation: 0.0,
            ub_tpc: vec![0.0; 2],
        });
        eng.state.best_lb = 47_000.0;
        eng.state.ub = 40_000.0;
        eng.state.gap = 1.0 - eng.state.best_lb / eng.state.ub;
        assert!(eng.state.gap < 0.0);
        assert_eq!(eng.check_termination(), None);
        // The same magnitudes the right way round do stop the run.
        eng.state.best_lb = 40_000.0;
        eng.state.ub = 40_000.1;
        eng.state.gap = 1.0 - eng.state.best_lb / eng.state.ub;
        assert!(eng.state.gap > 0.0);
        assert_eq!(eng.state.gap <= 1e-3, true);
        assert_eq!(eng.check_termination(), Some(StopReason::GapClosed));
        // A build disagreement suppresses the gap exit: the recovery value
        // prices unsettled builds at whatever the current duals happen to
        // be, so a small gap certifies nothing about the disputed plan.
        let mut dissent = agreed;
        dissent.u[0] = false;
        eng.ingest_proposal(proposal(1, 1, dissent));
        assert_eq!(eng.check_termination(), None);
    }

    #[test]
    fn two_region_negotiation_lands_on_the_build_endpoint() {
        let net = two_region_fixture();
        let res = run_stage1(&net, &Stage1Config::default()).unwrap();
        assert_eq!(res.reason, StopReason::Consensus);
        assert!(res.consensus);
        assert_eq!(res.u_star, vec![true]);
        assert!(res.rounds <= 500, "took {} rounds", res.rounds);
        let plan = &res.ub_phys;
        assert!(plan.is_optimal());
        assert!((plan.objective - 47_000.000002).abs() <= 1e-9 * 47_000.0);
        assert!((plan.candidate_flow[0][0] - 1350.0).abs() < 1e-4);
        assert!((plan.existing_flow[0][0] - 150.0).abs() < 1e-4);
        assert!((plan.generation[0][0] - 500.0).abs() < 1e-4);
        assert!((plan.generation[0][1] - 2000.0).abs() < 1e-4);
    }

    #[test]
    fn persistent_proposer_ends_with_a_positive_build_price() {
        // Region 1 wants the line every round; the coordinator starts
        // idle, so region 1's early over-proposals leave it holding a
        // strictly positive build price at the consensus point. (Both
        // regions over-propose here: at zero prices the exporter also
        // profits from unpriced boundary imports, so unlike a reluctant
        // partner its price need not end negative.)
        let net = two_region_fixture();
        let res = run_stage1(&net, &Stage1Config::default()).unwrap();
        assert!(res.duals[0].pi[0] > 0.0, "pi: {:?}", res.duals[0].pi);
        // Boundary prices are what hold the agreement together: at least
        // one flow price is nonzero at the end.
        assert!(res.duals.iter().any(|d| d.l1_norm() > 0.0));
    }

    #[test]
    fn candidate_free_network_terminates_immediately() {
        let mut net = two_region_fixture();
        net.candidate_lines.clear();
        let res = run_stage1(&net, &Stage1Config::default()).unwrap();
        assert_eq!(res.rounds, 1);
        assert!(res.u_star.is_empty());
        assert!(res.ub_phys.is_optimal());
        // Recovery bounds coincide on a binary-free instance.
        assert!((res.best_lb - res.ub).abs() <= 1e-6 * res.ub.abs().max(1.0));
    }

    #[test]
    fn single_region_round_one_matches_centralized_dispatch() {
        let net = Network {
            regions: vec![Region { name: "only".into() }],
            nodes: vec![
                Node { name: "a".into(), region: RegionId(0) },
                Node { name: "b".into(), region: RegionId(0) },
            ],
            generators: vec![Generator {
                name: "g".into(),
                node: NodeId(0),
                segments: vec![
                    crate::netmodel::CostSegment { upper_bound: 60.0, marginal_cost: 12.0 },
                    crate::netmodel::CostSegment { upper_bound: 200.0, marginal_cost: 30.0 },
                ],
                p_min: 0.0,
                p_max: 200.0,
            }],
            loads: vec![Load { name: "d".into(), node: NodeId(1), demand: 90.0 }],
            existing_lines: vec![crate::netmodel::ExistingLine {
                name: "ab".into(),
                from: NodeId(0),
                to: NodeId(1),
                reactance: 0.3,
                capacity: 500.0,
            }],
            candidate_lines: vec![],
            scenarios: vec![Scenario {
                name: "base".into(),
                weight: 1.0,
                demand_overrides: vec![],
                gen_limit_overrides: vec![],
            }],
            interest_rate: 0.1,
            angle_bound: 50.0,
            notes: None,
        };
        let res = run_stage1(&net, &Stage1Config::default()).unwrap();
        assert_eq!(res.rounds, 1);
        let bench = solve_centralized(&net, MILP_REL_GAP).unwrap();
        assert!((res.best_lb - bench.objective).abs() <= 1e-9 * bench.objective.abs().max(1.0));
        assert!((res.ub - bench.objective).abs() <= 1e-9 * bench.objective.abs().max(1.0));
        assert!((res.ub_phys.objective - bench.objective).abs() <= 1e-9);
    }

    #[test]
    fn three_region_negotiation_matches_centralized_choice() {
        let net = load_case(&cases_path("three_region.json")).unwrap();
        let res = run_stage1(&net, &Stage1Config::default()).unwrap();
        assert_eq!(res.reason, StopReason::Consensus);
        assert!(res.consensus);
        assert!(res.rounds <= 500);
        assert_eq!(res.u_star, vec![true, false]);
        assert!(res.ub_phys.is_optimal());
        let bench = solve_centralized(&net, MILP_REL_GAP).unwrap();
        assert!(res.ub_phys.objective >= bench.objective - 1e-6);
    }

    #[test]
    fn magnitude_mode_still_reaches_the_build_endpoint() {
        let net = two_region_fixture();
        let mut cfg = Stage1Config::default();
        cfg.mode = FlowConsensusMode::Magnitude;
        let res = run_stage1(&net, &cfg).unwrap();
        assert_eq!(res.reason, StopReason::Consensus);
        assert_eq!(res.u_star, vec![true]);
        assert!(res.ub_phys.is_optimal());
        assert!((res.ub_phys.objective - 47_000.000002).abs() <= 1e-6 * 47_000.0);
    }

    #[test]
    fn reruns_are_bit_identical() {
        let net = two_region_fixture();
        let a = run_stage1(&net, &Stage1Config::default()).unwrap();
        let b = run_stage1(&net, &Stage1Config::default()).unwrap();
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.u_star, b.u_star);
        assert_eq!(a.best_lb.to_bits(), b.best_lb.to_bits());
        assert_eq!(a.ub.to_bits(), b.ub.to_bits());
        assert_eq!(a.duals, b.duals);
    }

    #[test]
    fn trace_rows_cover_every_region_each_round() {
        let net = two_region_fixture();
        let res = run_stage1(&net, &Stage1Config::default()).unwrap();
        assert_eq!(res.trace.len(), 2 * res.rounds);
        let last = &res.trace[res.trace.len() - 1];
        assert_eq!(last.nu, res.rounds);
        assert_eq!(last.u_tpc, "1");
    }

    #[test]
    fn rejects_invalid_networks_and_parameters() {
        let mut net = two_region_fixture();
        net.existing_lines[0].reactance = 0.0;
        assert!(matches!(
            Stage1Engine::new(&net, Stage1Config::default()),
            Err(Stage1Error::InvalidNetwork(_))
        ));
        let net = two_region_fixture();
        let mut cfg = Stage1Config::default();
        cfg.alpha0 = 0.0;
        assert!(matches!(
            Stage1Engine::new(&net, cfg),
            Err(Stage1Error::InvalidNetwork(_))
        ));
    }

    #[test]
    fn unreachable_pin_yields_infinite_recovery_term() {
        let net = two_region_fixture();
        let mut eng = engine(&net);
        eng.begin_round();
        // A proposal claiming flow on an unbuilt candidate cannot be
        // pinned into the coordinator's coupled constraints.
        let mut copies = GlobalCopies::zeros(1, 1, 1);
        copies.u[0] = false;
        copies.flow_cand[0][0] = 700.0;
        eng.ingest_proposal(proposal(0, 1, copies));
        let decided = GlobalCopies::zeros(1, 1, 1);
        let p = eng.state.proposals[0].clone().unwrap();
        let val = eng.recovery_eval(0, &p, &decided).unwrap();
        assert!(val.is_infinite());
        // Out-of-bounds pins are rejected before the solver sees them.
        let mut copies = GlobalCopies::zeros(1, 1, 1);
        copies.u[0] = true;
        copies.flow_cand[0][0] = 9_999.0;
        let p = proposal(0, 1, copies);
        let val = eng.recovery_eval(0, &p, &decided).unwrap();
        assert!(val.is_infinite());
    }
}
