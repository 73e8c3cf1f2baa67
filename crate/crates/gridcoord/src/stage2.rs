//! Operational consensus on boundary angles for a settled build plan.
//!
//! With the build question closed, regions still have to agree on how the
//! interconnected system is dispatched. Every region solves its own
//! dispatch problem over its generators and internal lines, plus a pair of
//! angle *beliefs* per boundary line it touches: one for its own end, one
//! for the far end. Neighbouring regions hold beliefs about the same two
//! nodes, and an auxiliary-problem-principle loop makes them agree: each
//! round every region re-solves a convex QP whose objective adds, per
//! belief, a linearized disagreement term (`eta`), a proximal anchor to
//! the previous round (`gamma`), and a running price (`lambda`); after the
//! simultaneous solves the prices move by `delta` times the remaining
//! disagreement.
//!
//! Zero residual with stationary prices means both regions of every
//! boundary line read the same end angles, so the per-region flows derived
//! from those beliefs stitch into one consistent network-wide dispatch.

use serde::{Deserialize, Serialize};

use crate::centralized::{PlanError, PlanResult};
use crate::netmodel::{validate, CandId, CaseError, GenId, Network, NodeId, RegionId, ScenId};
use crate::solver::{
    Bound, LinearProgram, PreparedQp, QpOptions, QuadraticProgram, SolveStatus, SolverError,
    FEAS_TOL,
};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Stage2Config {
    /// Weight of the linearized disagreement term.
    pub eta: f64,
    /// Proximal weight per belief; must be positive so every subproblem is
    /// strictly convex in its beliefs.
    pub gamma: f64,
    /// Price step per round.
    pub delta: f64,
    /// Stop when the worst per-line squared disagreement is at or below
    /// this.
    pub epsilon_app: f64,
    /// Round cap; hitting it returns the best state found, not an error.
    pub max_iters: usize,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self { eta: 1.0, gamma: 2.0, delta: 1.0, epsilon_app: 1e-4, max_iters: 5000 }
    }
}

/// One boundary element of the operating network: an inter-regional
/// existing line, or an inter-regional candidate the build plan selected.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoundaryLine {
    pub name: String,
    pub from: NodeId,
    pub to: NodeId,
    pub reactance: f64,
    pub capacity: f64,
    /// `[region of from, region of to]`; always two distinct regions.
    pub regions: [RegionId; 2],
}

impl BoundaryLine {
    /// The other stakeholder.
    fn peer(&self, z: usize) -> usize {
        if self.regions[0].0 == z {
            self.regions[1].0
        } else {
            self.regions[0].0
        }
    }

    /// Which belief slot (own end = 0 at `from`-region) node `n` has for
    /// stakeholder `z`.
    fn own_node(&self, z: usize) -> NodeId {
        if self.regions[0].0 == z {
            self.from
        } else {
            self.to
        }
    }

}

/// Angle beliefs, `values[region][scenario][boundary line] = [own end,
/// far end]` (rad). Entries of non-stakeholder regions stay zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeliefSet {
    pub values: Vec<Vec<Vec<[f64; 2]>>>,
}

impl BeliefSet {
    pub fn zeros(n_z: usize, n_s: usize, n_e: usize) -> Self {
        Self { values: vec![vec![vec![[0.0; 2]; n_e]; n_s]; n_z] }
    }
}

/// Belief prices, same layout as [`BeliefSet`] ($/rad).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AppDuals {
    pub values: Vec<Vec<Vec<[f64; 2]>>>,
}

impl AppDuals {
    pub fn zeros(n_z: usize, n_s: usize, n_e: usize) -> Self {
        Self { values: vec![vec![vec![[0.0; 2]; n_e]; n_s]; n_z] }
    }

    pub fn l1_norm(&self) -> f64 {
        self.values
            .iter()
            .flatten()
            .flatten()
            .map(|p| p[0].abs() + p[1].abs())
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage2TraceRow {
    pub sigma: usize,
    pub max_residual: f64,
    /// Largest belief change from the previous round (rad).
    pub movement: f64,
    pub objective: f64,
    /// Consensus flow per boundary line, scenario-major.
    pub tie_flow: Vec<f64>,
    /// Scenario-weighted dispatch cost per region.
    pub region_cost: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Stage2State {
    /// Completed rounds.
    pub sigma: usize,
    pub beliefs: BeliefSet,
    /// The previous round's beliefs (the anchors of the last solves).
    pub prev_beliefs: BeliefSet,
    pub duals: AppDuals,
    /// Worst per-line squared disagreement after the last round.
    pub residual: f64,
    /// Largest belief change in the last round (rad).
    pub movement: f64,
    /// Scenario-weighted dispatch cost summed over regions, last round.
    pub dispatch_cost: f64,
    /// Scenario-weighted dispatch cost per region, last round.
    pub region_cost: Vec<f64>,
    /// Generation per `[scenario][generator]`, last round.
    pub generation: Vec<Vec<f64>>,
    pub trace: Vec<Stage2TraceRow>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Stage2Result {
    /// Whether the residual reached the tolerance (vs. the round cap).
    pub converged: bool,
    pub iterations: usize,
    pub residual: f64,
    /// `dispatch_cost + investment_cost`.
    pub objective: f64,
    pub dispatch_cost: f64,
    /// Annualized cost of the built candidates.
    pub investment_cost: f64,
    pub boundary: Vec<BoundaryLine>,
    /// Flow per `[scenario][boundary line]` from the consensus beliefs,
    /// positive `from -> to`.
    pub tie_flow: Vec<Vec<f64>>,
    /// Generation per `[scenario][generator]`.
    pub generation: Vec<Vec<f64>>,
    pub beliefs: BeliefSet,
    pub duals: AppDuals,
    pub trace: Vec<Stage2TraceRow>,
}

#[derive(Debug, thiserror::Error)]
pub enum Stage2Error {
    #[error("invalid network: {0}")]
    InvalidNetwork(String),
    #[error("build vector has {got} entries, network has {want} candidates")]
    BuildVectorShape { got: usize, want: usize },
    #[error("subproblem of region {region} returned {status:?} at round {sigma}")]
    Subproblem { region: String, status: SolveStatus, sigma: usize },
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Case(#[from] CaseError),
    #[error(transparent)]
    Plan(#[from] PlanError),
}

struct Region2Ctx {
    name: String,
    nodes: Vec<NodeId>,
    gens: Vec<usize>,
    /// Operating internal lines: `(from, to, reactance, capacity)` of
    /// internal existing lines plus built internal candidates.
    internal: Vec<(NodeId, NodeId, f64, f64)>,
    /// Global boundary-line indices this region touches.
    locals: Vec<usize>,
}

struct Region2Model {
    /// `None` for a region with nothing to decide (no nodes).
    prepared: Option<PreparedQp>,
    /// Dispatch-only linear cost; belief terms are layered on per round.
    base_cost: Vec<f64>,
    /// `[scenario][local line] = [own-end var, far-end var]`.
    belief_var: Vec<Vec<[usize; 2]>>,
    /// `[scenario][generator index into ctx.gens]` = segment vars.
    gen_segs: Vec<Vec<Vec<usize>>>,
}

pub struct Stage2Engine {
    net: Network,
    cfg: Stage2Config,
    u_star: Vec<bool>,
    boundary: Vec<BoundaryLine>,
    regions: Vec<Region2Ctx>,
    models: Vec<Region2Model>,
    pub state: Stage2State,
}

impl Stage2Engine {
    pub fn new(net: &Network, u_star: &[bool], cfg: Stage2Config) -> Result<Self, Stage2Error> {
        let report = validate(net);
        if !report.is_valid() {
            return Err(Stage2Error::InvalidNetwork(report.violations.join("; ")));
        }
        if u_star.len() != net.candidate_lines.len() {
            return Err(Stage2Error::BuildVectorShape {
                got: u_star.len(),
                want: net.candidate_lines.len(),
            });
        }
        if !(cfg.gamma > 0.0) || !(cfg.delta > 0.0) || !(cfg.eta >= 0.0) {
            return Err(Stage2Error::InvalidNetwork(
                "gamma and delta must be positive and eta nonnegative".into(),
            ));
        }
        if !(cfg.epsilon_app > 0.0) || cfg.max_iters == 0 {
            return Err(Stage2Error::InvalidNetwork(
                "epsilon_app must be positive and max_iters nonzero".into(),
            ));
        }
        let boundary = operating_boundary(net, u_star);
        let regions: Vec<Region2Ctx> = (0..net.regions.len())
            .map(|z| build_region2_ctx(net, RegionId(z), u_star, &boundary))
            .collect();
        let models = regions
            .iter()
            .map(|ctx| build_region2_model(net, ctx, &boundary, &cfg))
            .collect::<Result<Vec<_>, _>>()?;
        let (n_z, n_s, n_e) = (net.regions.len(), net.scenarios.len(), boundary.len());
        let state = Stage2State {
            sigma: 0,
            beliefs: BeliefSet::zeros(n_z, n_s, n_e),
            prev_beliefs: BeliefSet::zeros(n_z, n_s, n_e),
            duals: AppDuals::zeros(n_z, n_s, n_e),
            residual: f64::INFINITY,
            movement: f64::INFINITY,
            dispatch_cost: f64::NAN,
            region_cost: vec![0.0; n_z],
            generation: vec![vec![0.0; net.generators.len()]; n_s],
            trace: Vec::new(),
        };
        Ok(Self {
            net: net.clone(),
            cfg,
            u_star: u_star.to_vec(),
            boundary,
            regions,
            models,
            state,
        })
    }

    pub fn config(&self) -> &Stage2Config {
        &self.cfg
    }

    pub fn boundary(&self) -> &[BoundaryLine] {
        &self.boundary
    }

    pub fn n_regions(&self) -> usize {
        self.regions.len()
    }

    /// The belief-term linear cost for region `z` against the current
    /// beliefs (the anchors) and prices.
    fn refresh_cost(&mut self, z: usize) {
        let model = &self.models[z];
        let ctx = &self.regions[z];
        let mut cost = model.base_cost.clone();
        for s in 0..self.net.scenarios.len() {
            for (le, &e) in ctx.locals.iter().enumerate() {
                let line = &self.boundary[e];
                let peer = line.peer(z);
                let own = self.state.beliefs.values[z][s][e];
                let other = self.state.beliefs.values[peer][s][e];
                let lam = self.state.duals.values[z][s][e];
                let [v_own, v_far] = model.belief_var[s][le];
                // eta-linearized disagreement + price + proximal linear
                // part; the quadratic gamma/2 (v - anchor)^2 keeps its
                // quadratic coefficient in the prepared problem.
                cost[v_own] +=
                    self.cfg.eta * (own[0] - other[1]) + lam[0] - self.cfg.gamma * own[0];
                cost[v_far] +=
                    self.cfg.eta * (own[1] - other[0]) + lam[1] - self.cfg.gamma * own[1];
            }
        }
        if let Some(prepared) = self.models[z].prepared.as_mut() {
            prepared.set_cost(&cost);
        }
    }

    /// One simultaneous round: every region solves against the current
    /// beliefs, then beliefs are replaced and prices move by `delta` times
    /// the residuals of the new beliefs.
    pub fn run_round(&mut self) -> Result<(), Stage2Error> {
        let everyone = vec![true; self.regions.len()];
        self.run_round_with(&everyone)
    }

    /// [`Self::run_round`] with a participation mask: a region sitting the
    /// round out keeps its previous beliefs and dispatch on the board
    /// while everyone else reacts to that stale state. Price updates and
    /// the residual always run on the full board.
    pub fn run_round_with(&mut self, participants: &[bool]) -> Result<(), Stage2Error> {
        let n_s = self.net.scenarios.len();
        let mut next = self.state.beliefs.clone();
        let mut region_cost = self.state.region_cost.clone();
        let mut generation = self.state.generation.clone();
        for z in 0..self.regions.len() {
            if !participants.get(z).copied().unwrap_or(false) {
                continue;
            }
            self.refresh_cost(z);
            let model = &mut self.models[z];
            let Some(prepared) = model.prepared.as_mut() else { continue };
            let sol = prepared.solve();
            if sol.status != SolveStatus::Optimal {
                return Err(Stage2Error::Subproblem {
                    region: self.regions[z].name.clone(),
                    status: sol.status,
                    sigma: self.state.sigma + 1,
                });
            }
            region_cost[z] = 0.0;
            for (j, &c) in model.base_cost.iter().enumerate() {
                if c != 0.0 {
                    region_cost[z] += c * sol.x[j];
                }
            }
            for s in 0..n_s {
                for (le, &e) in self.regions[z].locals.iter().enumerate() {
                    let [v_own, v_far] = model.belief_var[s][le];
                    next.values[z][s][e] = [sol.x[v_own], sol.x[v_far]];
                }
                for (ig, &g) in self.regions[z].gens.iter().enumerate() {
                    generation[s][g] = model.gen_segs[s][ig].iter().map(|&v| sol.x[v]).sum();
                }
            }
        }
        self.state.movement = belief_distance(&next, &self.state.beliefs);
        self.state.prev_beliefs = std::mem::replace(&mut self.state.beliefs, next);
        self.state.dispatch_cost = region_cost.iter().sum();
        self.state.region_cost = region_cost;
        self.state.generation = generation;
        self.state.residual = self.max_residual();
        self.update_lambdas();
        self.state.sigma += 1;
        let objective = self.state.dispatch_cost + self.investment_cost()?;
        self.state.trace.push(Stage2TraceRow {
            sigma: self.state.sigma,
            max_residual: self.state.residual,
            movement: self.state.movement,
            objective,
            tie_flow: self.consensus_tie_flows().into_iter().flatten().collect(),
            region_cost: self.state.region_cost.clone(),
        });
        Ok(())
    }

    /// Whether the last round reached a fixed point: beliefs pairwise
    /// consistent and stationary. The residual alone is not enough; a
    /// symmetric iterate can cross exact consistency while prices are
    /// still far from equilibrium and the next round swings away again,
    /// and agreeing beliefs can also glide jointly along the consensus
    /// manifold before the dispatch settles.
    pub fn settled(&self) -> bool {
        self.state.residual <= self.cfg.epsilon_app
            && self.state.movement <= self.cfg.epsilon_app
    }

    /// Flow per `[scenario][boundary line]` implied by the consensus
    /// beliefs, averaging the two stakeholders' views of each end.
    fn consensus_tie_flows(&self) -> Vec<Vec<f64>> {
        let n_s = self.net.scenarios.len();
        let mut tie = vec![vec![0.0; self.boundary.len()]; n_s];
        for (e, line) in self.boundary.iter().enumerate() {
            let (za, zb) = (line.regions[0].0, line.regions[1].0);
            for (s, flows) in tie.iter_mut().enumerate() {
                let a = self.state.beliefs.values[za][s][e];
                let b = self.state.beliefs.values[zb][s][e];
                let at_from = (a[0] + b[1]) / 2.0;
                let at_to = (a[1] + b[0]) / 2.0;
                flows[e] = (at_from - at_to) / line.reactance;
            }
        }
        tie
    }

    /// Worst per-(line, scenario) squared disagreement of the current
    /// beliefs: both nodes' paired beliefs enter one sum.
    pub fn max_residual(&self) -> f64 {
        let mut worst = 0.0f64;
        for (e, line) in self.boundary.iter().enumerate() {
            let (za, zb) = (line.regions[0].0, line.regions[1].0);
            for s in 0..self.net.scenarios.len() {
                let a = self.state.beliefs.values[za][s][e];
                let b = self.state.beliefs.values[zb][s][e];
                let r_from = a[0] - b[1];
                let r_to = a[1] - b[0];
                worst = worst.max(r_from * r_from + r_to * r_to);
            }
        }
        worst
    }

    /// Price update from the current beliefs: each region's price moves
    /// toward penalizing its own belief's excess over the peer's view of
    /// the same node. The two stakeholders see opposite residuals, so
    /// paired prices move antisymmetrically.
    fn update_lambdas(&mut self) {
        for (e, line) in self.boundary.iter().enumerate() {
            let (za, zb) = (line.regions[0].0, line.regions[1].0);
            for s in 0..self.net.scenarios.len() {
                let a = self.state.beliefs.values[za][s][e];
                let b = self.state.beliefs.values[zb][s][e];
                let r_from = a[0] - b[1];
                let r_to = a[1] - b[0];
                self.state.duals.values[za][s][e][0] += self.cfg.delta * r_from;
                self.state.duals.values[za][s][e][1] += self.cfg.delta * r_to;
                self.state.duals.values[zb][s][e][0] += self.cfg.delta * -r_to;
                self.state.duals.values[zb][s][e][1] += self.cfg.delta * -r_from;
            }
        }
    }

    fn investment_cost(&self) -> Result<f64, CaseError> {
        let mut total = 0.0;
        for (k, &built) in self.u_star.iter().enumerate() {
            if built {
                total += self.net.annualized_build_cost(CandId(k))?;
            }
        }
        Ok(total)
    }

    pub fn finish(self) -> Result<Stage2Result, Stage2Error> {
        let investment = self.investment_cost()?;
        let tie_flow = self.consensus_tie_flows();
        let converged = self.settled();
        Ok(Stage2Result {
            converged,
            iterations: self.state.sigma,
            residual: self.state.residual,
            objective: self.state.dispatch_cost + investment,
            dispatch_cost: self.state.dispatch_cost,
            investment_cost: investment,
            boundary: self.boundary,
            tie_flow,
            generation: self.state.generation,
            beliefs: self.state.beliefs,
            duals: self.state.duals,
            trace: self.state.trace,
        })
    }
}

/// Runs rounds until the beliefs settle (pairwise consistent and
/// stationary) or the round cap is hit; the latter still returns the best
/// state found.
pub fn run_stage2(
    net: &Network,
    u_star: &[bool],
    cfg: &Stage2Config,
) -> Result<Stage2Result, Stage2Error> {
    let mut eng = Stage2Engine::new(net, u_star, cfg.clone())?;
    loop {
        eng.run_round()?;
        if eng.settled() || eng.state.sigma >= eng.cfg.max_iters {
            return eng.finish();
        }
    }
}

/// Largest entrywise belief difference (rad).
fn belief_distance(a: &BeliefSet, b: &BeliefSet) -> f64 {
    a.values
        .iter()
        .flatten()
        .flatten()
        .zip(b.values.iter().flatten().flatten())
        .map(|(p, q)| (p[0] - q[0]).abs().max((p[1] - q[1]).abs()))
        .fold(0.0, f64::max)
}

/// The boundary lines of the operating network: inter-regional existing
/// lines plus built inter-regional candidates.
fn operating_boundary(net: &Network, u_star: &[bool]) -> Vec<BoundaryLine> {
    let mut out = Vec::new();
    for h in net.shared_existing_lines() {
        let line = &net.existing_lines[h.0];
        let (za, zb) = net.line_regions(line.from, line.to);
        out.push(BoundaryLine {
            name: line.name.clone(),
            from: line.from,
            to: line.to,
            reactance: line.reactance,
            capacity: line.capacity,
            regions: [za, zb],
        });
    }
    for (k, cand) in net.candidate_lines.iter().enumerate() {
        if !u_star[k] {
            continue;
        }
        let (za, zb) = net.line_regions(cand.from, cand.to);
        if za == zb {
            continue;
        }
        out.push(BoundaryLine {
            name: cand.name.clone(),
            from: cand.from,
            to: cand.to,
            reactance: cand.reactance,
            capacity: cand.capacity,
            regions: [za, zb],
        });
    }
    out
}

fn build_region2_ctx(
    net: &Network,
    z: RegionId,
    u_star: &[bool],
    boundary: &[BoundaryLine],
) -> Region2Ctx {
    let nodes = net.nodes_in_region(z);
    let in_z = |n: NodeId| net.region_of(n) == z;
    let gens = (0..net.generators.len())
        .filter(|&g| in_z(net.generators[g].node))
        .collect();
    let mut internal: Vec<(NodeId, NodeId, f64, f64)> = net
        .existing_lines
        .iter()
        .filter(|l| in_z(l.from) && in_z(l.to))
        .map(|l| (l.from, l.to, l.reactance, l.capacity))
        .collect();
    for (k, cand) in net.candidate_lines.iter().enumerate() {
        if u_star[k] && in_z(cand.from) && in_z(cand.to) {
            internal.push((cand.from, cand.to, cand.reactance, cand.capacity));
        }
    }
    let locals = (0..boundary.len())
        .filter(|&e| boundary[e].regions.contains(&z))
        .collect();
    Region2Ctx { name: net.regions[z.0].name.clone(), nodes, gens, internal, locals }
}

fn build_region2_model(
    net: &Network,
    ctx: &Region2Ctx,
    boundary: &[BoundaryLine],
    cfg: &Stage2Config,
) -> Result<Region2Model, Stage2Error> {
    let mut lp = LinearProgram::default();
    let mut q_entries: Vec<(usize, usize, f64)> = Vec::new();
    let n_s = net.scenarios.len();
    let b = net.angle_bound;
    let z = if ctx.nodes.is_empty() { usize::MAX } else { net.region_of(ctx.nodes[0]).0 };
    // The network-wide angle reference (first node by name, as in the
    // benchmark model) is pinned by whichever region owns it; consensus
    // propagates the gauge to everyone else. Without this the angle boxes
    // of the regional models would measure against local gauges and admit
    // dispatches the single-reference model forbids.
    let reference = (0..net.nodes.len())
        .min_by(|&a, &b| net.nodes[a].name.cmp(&net.nodes[b].name))
        .map(NodeId);

    let mut belief_var = vec![Vec::new(); n_s];
    let mut gen_segs = vec![Vec::new(); n_s];

    for s in 0..n_s {
        let w = net.scenarios[s].weight;
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
            gen_segs[s].push(segs);
        }
        let theta: Vec<usize> = ctx
            .nodes
            .iter()
            .map(|&n| {
                let bounds = if Some(n) == reference {
                    Bound::fixed(0.0)
                } else {
                    Bound::range(-b, b)
                };
                lp.add_var(format!("th_{}_s{}", net.nodes[n.0].name, s), 0.0, bounds)
            })
            .collect();
        let own_angle = |n: NodeId| -> usize {
            let i = ctx.nodes.iter().position(|&m| m == n).expect("own node");
            theta[i]
        };

        let mut internal_flow = Vec::with_capacity(ctx.internal.len());
        for (i, &(from, to, x, cap)) in ctx.internal.iter().enumerate() {
            let f = lp.add_var(format!("f_int{i}_s{s}"), 0.0, Bound::range(-cap, cap));
            lp.add_row(
                Bound::fixed(0.0),
                &[(f, 1.0), (own_angle(from), -1.0 / x), (own_angle(to), 1.0 / x)],
            );
            internal_flow.push(f);
        }

        // One own-end belief (the node's angle itself) and one far-end
        // belief per boundary line; the line's flow is read off this
        // region's beliefs.
        let mut local_flow = Vec::with_capacity(ctx.locals.len());
        for &e in &ctx.locals {
            let line = &boundary[e];
            let v_own = own_angle(line.own_node(z));
            let v_far = lp.add_var(
                format!("bf_{}_s{}", line.name, s),
                0.0,
                Bound::range(-b, b),
            );
            let f = lp.add_var(
                format!("f_{}_s{}", line.name, s),
                0.0,
                Bound::range(-line.capacity, line.capacity),
            );
            // Flow is oriented from -> to regardless of which end is ours.
            let (v_from, v_to) = if line.regions[0].0 == z { (v_own, v_far) } else { (v_far, v_own) };
            lp.add_row(
                Bound::fixed(0.0),
                &[(f, 1.0), (v_from, -1.0 / line.reactance), (v_to, 1.0 / line.reactance)],
            );
            q_entries.push((v_own, v_own, cfg.gamma));
            q_entries.push((v_far, v_far, cfg.gamma));
            belief_var[s].push([v_own, v_far]);
            local_flow.push(f);
        }

        let gens_at = net.gens_by_node();
        let loads_at = net.loads_by_node();
        for &n in &ctx.nodes {
            let mut terms: Vec<(usize, f64)> = Vec::new();
            for &g in &gens_at[n.0] {
                let ig = ctx.gens.iter().position(|&gg| gg == g.0).expect("own gen");
                for &sv in &gen_segs[s][ig] {
                    terms.push((sv, 1.0));
                }
            }
            for (i, &(from, to, _, _)) in ctx.internal.iter().enumerate() {
                if to == n {
                    terms.push((internal_flow[i], 1.0));
                }
                if from == n {
                    terms.push((internal_flow[i], -1.0));
                }
            }
            for (le, &e) in ctx.locals.iter().enumerate() {
                let line = &boundary[e];
                if line.to == n {
                    terms.push((local_flow[le], 1.0));
                }
                if line.from == n {
                    terms.push((local_flow[le], -1.0));
                }
            }
            let demand: f64 = loads_at[n.0].iter().map(|&d| net.demand(ScenId(s), d)).sum();
            lp.add_row(Bound::fixed(demand), &terms);
        }
        for (ig, &g) in ctx.gens.iter().enumerate() {
            let (p_min, p_max) = net.gen_limits(ScenId(s), GenId(g));
            let terms: Vec<(usize, f64)> = gen_segs[s][ig].iter().map(|&v| (v, 1.0)).collect();
            lp.add_row(Bound::range(p_min, p_max), &terms);
        }
    }

    let base_cost = lp.cost.clone();
    let prepared = if lp.n_vars() == 0 {
        None
    } else {
        let qp = QuadraticProgram { lp, q_entries };
        qp.validate()?;
        Some(PreparedQp::new(qp, QpOptions { tol: FEAS_TOL, ..QpOptions::default() })?)
    };
    Ok(Region2Model { prepared, base_cost, belief_var, gen_segs })
}

/// Ground-truth dispatch for a fixed build vector: the centralized LP.
pub fn fixed_u_dcopf(net: &Network, u_star: &[bool]) -> Result<PlanResult, PlanError> {
    crate::centralized::solve_fixed_u(net, u_star)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netmodel::tests::two_region_fixture;
    use crate::netmodel::{load_case, Scenario};
    use std::path::PathBuf;

    fn cases_path(name: &str) -> PathBuf {
        PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../cases").join(name)
    }

    #[test]
    fn oracle_reproduces_the_two_region_dispatch_endpoints() {
        let net = two_region_fixture();
        let built = fixed_u_dcopf(&net, &[true]).unwrap();
        assert!(built.is_optimal());
        assert!((built.generation[0][0] - 500.0).abs() < 1e-4);
        assert!((built.generation[0][1] - 2000.0).abs() < 1e-4);
        assert!((built.candidate_flow[0][0] - 1350.0).abs() < 1e-4);
        assert!((built.existing_flow[0][0] - 150.0).abs() < 1e-4);
        let idle = fixed_u_dcopf(&net, &[false]).unwrap();
        assert!(idle.is_optimal());
        assert!((idle.generation[0][0] - 1850.0).abs() < 1e-4);
        assert!((idle.generation[0][1] - 650.0).abs() < 1e-4);
        assert!((idle.existing_flow[0][0] - 150.0).abs() < 1e-4);
    }

    #[test]
    fn oracle_agrees_with_brute_force_on_its_best_plan() {
        let net = two_region_fixture();
        let best = crate::centralized::brute_force_plan(&net).unwrap();
        let replay = fixed_u_dcopf(&net, &best.build).unwrap();
        assert!((replay.objective - best.objective).abs() <= 1e-6 * best.objective.abs());
    }

    #[test]
    fn lambda_updates_match_hand_arithmetic() {
        // delta = 2, own-end belief 0.3 vs the peer's far view 0.1 moves
        // the price by 2 * 0.2 = 0.4; the peer's own far price moves by
        // the negative.
        let net = two_region_fixture();
        let mut cfg = Stage2Config::default();
        cfg.delta = 2.0;
        let mut eng = Stage2Engine::new(&net, &[false], cfg).unwrap();
        assert_eq!(eng.boundary.len(), 1);
        let (za, zb) = (eng.boundary[0].regions[0].0, eng.boundary[0].regions[1].0);
        eng.state.beliefs.values[za][0][0] = [0.3, 0.0];
        eng.state.beliefs.values[zb][0][0] = [0.0, 0.1];
        eng.update_lambdas();
        assert!((eng.state.duals.values[za][0][0][0] - 0.4).abs() < 1e-12);
        assert!((eng.state.duals.values[zb][0][0][1] + 0.4).abs() < 1e-12);
        // The to-node pair agrees (both read 0), so its prices stay put.
        assert_eq!(eng.state.duals.values[za][0][0][1], 0.0);
        assert_eq!(eng.state.duals.values[zb][0][0][0], 0.0);
    }

    #[test]
    fn residual_matches_hand_arithmetic() {
        let net = two_region_fixture();
        let mut eng = Stage2Engine::new(&net, &[false], Stage2Config::default()).unwrap();
        let (za, zb) = (eng.boundary[0].regions[0].0, eng.boundary[0].regions[1].0);
        eng.state.beliefs.values[za][0][0] = [0.2, 0.5];
        eng.state.beliefs.values[zb][0][0] = [0.5, 0.1];
        // from-node pair: 0.2 vs 0.1; to-node pair: 0.5 vs 0.5.
        assert!((eng.max_residual() - 0.01).abs() < 1e-12);
    }

    #[test]
    fn zero_residual_leaves_prices_stationary() {
        let net = two_region_fixture();
        let mut eng = Stage2Engine::new(&net, &[false], Stage2Config::default()).unwrap();
        let (za, zb) = (eng.boundary[0].regions[0].0, eng.boundary[0].regions[1].0);
        eng.state.beliefs.values[za][0][0] = [0.25, -0.5];
        eng.state.beliefs.values[zb][0][0] = [-0.5, 0.25];
        assert_eq!(eng.max_residual(), 0.0);
        eng.update_lambdas();
        assert_eq!(eng.state.duals.l1_norm(), 0.0);
    }

    #[test]
    fn proximal_only_rounds_reach_a_fixed_point() {
        // With eta = 0 and prices held at zero, each region runs an
        // independent proximal-point iteration on its own dispatch. That
        // reaches a minimizer in finitely many rounds, after which
        // re-solving returns the same beliefs exactly (to solver tol).
        let net = two_region_fixture();
        let mut cfg = Stage2Config::default();
        cfg.eta = 0.0;
        let mut eng = Stage2Engine::new(&net, &[true], cfg).unwrap();
        let mut settled = None;
        for round in 0..60 {
            eng.run_round().unwrap();
            eng.state.duals = AppDuals::zeros(2, 1, eng.boundary.len());
            if round > 0 && eng.state.movement < 1e-7 {
                settled = Some(eng.state.beliefs.clone());
                break;
            }
        }
        let settled = settled.expect("proximal iteration never settled");
        eng.run_round().unwrap();
        assert!(
            belief_distance(&eng.state.beliefs, &settled) < 1e-5,
            "fixed point moved by {}",
            belief_distance(&eng.state.beliefs, &settled)
        );
    }

    #[test]
    fn tiny_gamma_without_coupling_decouples_to_local_dispatch() {
        // eta = lambda = 0 and gamma -> 0+ make each round an independent
        // regional dispatch with free boundary beliefs.
        let net = two_region_fixture();
        let mut cfg = Stage2Config::default();
        cfg.eta = 0.0;
        cfg.gamma = 1e-6;
        let mut eng = Stage2Engine::new(&net, &[false], cfg).unwrap();
        eng.run_round().unwrap();
        // With free far-end beliefs both regions import the full link
        // capacity of phantom power, which is exactly the inconsistency
        // the coupling terms exist to price away.
        assert!((eng.state.generation[0][0] - 1850.0).abs() < 1e-3);
        assert!((eng.state.generation[0][1] - 350.0).abs() < 1e-3);
    }

    #[test]
    fn no_boundary_converges_in_one_round() {
        let mut net = two_region_fixture();
        // Make the existing line internal by moving every node into one
        // region, and drop the candidate.
        for node in &mut net.nodes {
            node.region = RegionId(0);
        }
        net.candidate_lines.clear();
        let res = run_stage2(&net, &[], &Stage2Config::default()).unwrap();
        assert!(res.converged);
        assert_eq!(res.iterations, 1);
        assert_eq!(res.residual, 0.0);
        let oracle = fixed_u_dcopf(&net, &[]).unwrap();
        assert!((res.objective - oracle.objective).abs() <= 1e-5 * oracle.objective.abs());
    }

    #[test]
    fn built_plan_converges_to_the_oracle_dispatch() {
        let net = two_region_fixture();
        let res = run_stage2(&net, &[true], &Stage2Config::default()).unwrap();
        assert!(res.converged, "residual {} after {}", res.residual, res.iterations);
        assert!(res.iterations <= 5000);
        let oracle = fixed_u_dcopf(&net, &[true]).unwrap();
        assert!(
            (res.objective - oracle.objective).abs() <= 1e-3 * oracle.objective.abs(),
            "objective {} vs oracle {}",
            res.objective,
            oracle.objective
        );
        // Consensus tie flows reproduce the dispatch endpoints.
        let cand = res.boundary.iter().position(|l| l.name == "k1").unwrap();
        let exist = res.boundary.iter().position(|l| l.name == "e1").unwrap();
        assert!((res.tie_flow[0][cand] - 1350.0).abs() < 1.0, "{:?}", res.tie_flow);
        assert!((res.tie_flow[0][exist] - 150.0).abs() < 1.0, "{:?}", res.tie_flow);
    }

    #[test]
    fn idle_plan_converges_to_the_oracle_dispatch() {
        let net = two_region_fixture();
        let res = run_stage2(&net, &[false], &Stage2Config::default()).unwrap();
        assert!(res.converged, "residual {} after {}", res.residual, res.iterations);
        assert_eq!(res.boundary.len(), 1);
        let oracle = fixed_u_dcopf(&net, &[false]).unwrap();
        assert!(
            (res.objective - oracle.objective).abs() <= 1e-3 * oracle.objective.abs(),
            "objective {} vs oracle {} after {} iters, residual {:e}, gen {:?}, tie {:?}",
            res.objective,
            oracle.objective,
            res.iterations,
            res.residual,
            res.generation,
            res.tie_flow
        );
        assert!((res.tie_flow[0][0] - 150.0).abs() < 1.0);
    }

    #[test]
    fn beliefs_agree_pairwise_at_convergence() {
        let net = two_region_fixture();
        let res = run_stage2(&net, &[true], &Stage2Config::default()).unwrap();
        assert!(res.converged);
        let tol = res.residual.sqrt().max(1e-9) * (1.0 + 1e-9);
        for (e, line) in res.boundary.iter().enumerate() {
            let a = res.beliefs.values[line.regions[0].0][0][e];
            let b = res.beliefs.values[line.regions[1].0][0][e];
            assert!((a[0] - b[1]).abs() <= tol, "from-node beliefs {a:?} {b:?}");
            assert!((a[1] - b[0]).abs() <= tol, "to-node beliefs {a:?} {b:?}");
        }
    }

    #[test]
    fn three_region_plan_converges_to_the_oracle() {
        let net = load_case(&cases_path("three_region.json")).unwrap();
        let res = run_stage2(&net, &[true, false], &Stage2Config::default()).unwrap();
        assert!(res.converged, "residual {} after {}", res.residual, res.iterations);
        let oracle = fixed_u_dcopf(&net, &[true, false]).unwrap();
        assert!(
            (res.objective - oracle.objective).abs() <= 1e-3 * oracle.objective.abs(),
            "objective {} vs oracle {}",
            res.objective,
            oracle.objective
        );
    }

    #[test]
    fn scenario_indexed_beliefs_track_scenario_demands() {
        // Two scenarios with different demands need different boundary
        // angles; per-scenario beliefs let both consense simultaneously.
        let mut net = two_region_fixture();
        net.scenarios[0].weight = 0.5;
        net.scenarios.push(Scenario {
            name: "low".into(),
            weight: 0.5,
            demand_overrides: vec![(crate::netmodel::LoadId(0), 1200.0)],
            gen_limit_overrides: vec![],
        });
        let res = run_stage2(&net, &[true], &Stage2Config::default()).unwrap();
        assert!(res.converged);
        let oracle = fixed_u_dcopf(&net, &[true]).unwrap();
        assert!((res.objective - oracle.objective).abs() <= 2e-3 * oracle.objective.abs());
        let cand = res.boundary.iter().position(|l| l.name == "k1").unwrap();
        assert!((res.tie_flow[0][cand] - res.tie_flow[1][cand]).abs() > 10.0);
    }

    #[test]
    fn rejects_wrong_build_vector_shape() {
        let net = two_region_fixture();
        assert!(matches!(
            Stage2Engine::new(&net, &[true, false], Stage2Config::default()),
            Err(Stage2Error::BuildVectorShape { got: 2, want: 1 })
        ));
    }

    #[test]
    fn rejects_bad_parameters() {
        let net = two_region_fixture();
        let mut cfg = Stage2Config::default();
        cfg.gamma = 0.0;
        assert!(matches!(
            Stage2Engine::new(&net, &[true], cfg),
            Err(Stage2Error::InvalidNetwork(_))
        ));
    }
}
