//! Network data model for multi-region transmission planning.
//!
//! A [`Network`] is a DC power system partitioned into regions. Nodes carry
//! generators (piecewise-linear convex costs) and fixed loads; existing and
//! candidate lines connect nodes; scenarios perturb demands and generator
//! limits. All cross-referencing is by dense index newtypes so that mixing
//! up node / generator / scenario indices is a type error, not a runtime
//! surprise. String names appear only at the case-file boundary.

mod casefile;
mod casegen;

pub use casefile::{load_case, load_case_str, save_case, save_case_string, CaseError};
pub use casegen::{random_network, CaseGenConfig};

use serde::{Deserialize, Serialize};

// ---- index newtypes ----

macro_rules! index_newtype {
    ($(#[$doc:meta])* $name:ident) => {
        $(#[$doc])*
        #[derive(
            Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
        )]
        pub struct $name(pub usize);

        impl std::fmt::Display for $name {
            fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
                write!(f, "{}", self.0)
            }
        }
    };
}

index_newtype!(
    /// Index into [`Network::regions`].
    RegionId
);
index_newtype!(
    /// Index into [`Network::nodes`].
    NodeId
);
index_newtype!(
    /// Index into [`Network::generators`].
    GenId
);
index_newtype!(
    /// Index into [`Network::loads`].
    LoadId
);
index_newtype!(
    /// Index into [`Network::existing_lines`].
    LineId
);
index_newtype!(
    /// Index into [`Network::candidate_lines`].
    CandId
);
index_newtype!(
    /// Index into [`Network::scenarios`].
    ScenId
);

// ---- elements ----

/// A planning region owned by one regional operator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub name: String,
}

/// A bus. Every node belongs to exactly one region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub name: String,
    pub region: RegionId,
}

/// One segment of a piecewise-linear generation cost curve.
///
/// Segments are cumulative: segment `i` covers output between the previous
/// segment's `upper_bound` (0 for the first) and its own. Marginal costs
/// must be nondecreasing so the curve is convex.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostSegment {
    /// Cumulative output level ($/MWh applies up to here), MW.
    pub upper_bound: f64,
    /// Marginal cost on this segment, $/MWh.
    pub marginal_cost: f64,
}

/// A dispatchable generator at a node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generator {
    pub name: String,
    pub node: NodeId,
    /// Convex piecewise-linear cost curve; last `upper_bound` must cover
    /// `p_max` under every scenario.
    pub segments: Vec<CostSegment>,
    /// Minimum stable output, MW (base case; scenarios may override).
    pub p_min: f64,
    /// Maximum output, MW (base case; scenarios may override).
    pub p_max: f64,
}

/// A fixed load at a node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Load {
    pub name: String,
    pub node: NodeId,
    /// Base-case demand, MW (scenarios may override).
    pub demand: f64,
}

/// An existing transmission line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExistingLine {
    pub name: String,
    pub from: NodeId,
    pub to: NodeId,
    /// Series reactance, p.u.; flow = (angle_from - angle_to) / reactance.
    pub reactance: f64,
    /// Thermal limit, MW (symmetric).
    pub capacity: f64,
}

/// A candidate line that may be built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateLine {
    pub name: String,
    pub from: NodeId,
    pub to: NodeId,
    pub reactance: f64,
    pub capacity: f64,
    /// Total capital cost, $; converted to an equivalent annual payment
    /// via [`annuity_factor`] over `lifetime_years`.
    pub build_cost: f64,
    pub lifetime_years: u32,
}

/// An operating scenario: a weight plus sparse overrides of base-case data.
///
/// Override lists are kept sorted by element index so two equal scenarios
/// compare equal regardless of case-file ordering.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    /// Probability or duration weight applied to operating cost; > 0.
    pub weight: f64,
    /// `(load, demand)` replacements, MW.
    pub demand_overrides: Vec<(LoadId, f64)>,
    /// `(generator, p_min, p_max)` replacements, MW.
    pub gen_limit_overrides: Vec<(GenId, f64, f64)>,
}

/// A complete planning case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub regions: Vec<Region>,
    pub nodes: Vec<Node>,
    pub generators: Vec<Generator>,
    pub loads: Vec<Load>,
    pub existing_lines: Vec<ExistingLine>,
    pub candidate_lines: Vec<CandidateLine>,
    pub scenarios: Vec<Scenario>,
    /// Annual interest rate used to annualize build costs; > 0.
    pub interest_rate: f64,
    /// Symmetric bound on every nodal voltage angle variable, rad
    /// (applied per scenario in all optimization models).
    pub angle_bound: f64,
    /// Free-form provenance notes carried through load/save unchanged.
    pub notes: Option<String>,
}

// ---- financial ----

/// Capital-recovery (annuity) factor: the fraction of a capital cost paid
/// each year when amortized over `years` at `rate` interest.
///
/// Mathematically `r(1+r)^T / ((1+r)^T - 1)`, evaluated as
/// `r / -expm1(-T ln1p(r))`. That form neither overflows for very long
/// lifetimes (the factor approaches `rate` from above) nor cancels
/// catastrophically for tiny rates, where the textbook form loses half its
/// digits to the subtraction.
///
/// Errors if `rate <= 0`, `rate` is not finite, or `years == 0`.
pub fn annuity_factor(rate: f64, years: u32) -> Result<f64, CaseError> {
    if !rate.is_finite() || rate <= 0.0 {
        return Err(CaseError::Domain(format!(
            "interest rate must be finite and > 0, got {rate}"
        )));
    }
    if years == 0 {
        return Err(CaseError::Domain(
            "amortization lifetime must be at least 1 year".into(),
        ));
    }
    let one_minus_discount = -f64::exp_m1(-(years as f64) * f64::ln_1p(rate));
    Ok(rate / one_minus_discount)
}

// ---- incidence ----

/// Node-to-branch incidence of a network: one column per branch (existing
/// lines first, then candidates), `+1` at the sending node, `-1` at the
/// receiving node.
#[derive(Debug, Clone, PartialEq)]
pub struct Incidence {
    pub n_nodes: usize,
    /// Per branch: `(sending, receiving)` node indices.
    pub columns: Vec<(NodeId, NodeId)>,
}

impl Incidence {
    /// Signed entry for `node` in branch column `col`.
    pub fn entry(&self, node: NodeId, col: usize) -> i8 {
        let (s, r) = self.columns[col];
        if node == s {
            1
        } else if node == r {
            -1
        } else {
            0
        }
    }

    /// Dense `n_nodes x n_branches` matrix, mostly for tests and dumps.
    pub fn dense(&self) -> Vec<Vec<i8>> {
        (0..self.n_nodes)
            .map(|n| {
                (0..self.columns.len())
                    .map(|c| self.entry(NodeId(n), c))
                    .collect()
            })
            .collect()
    }
}

/// Build the incidence structure of `net` (existing lines then candidates).
pub fn incidence(net: &Network) -> Incidence {
    let columns = net
        .existing_lines
        .iter()
        .map(|l| (l.from, l.to))
        .chain(net.candidate_lines.iter().map(|k| (k.from, k.to)))
        .collect();
    Incidence {
        n_nodes: net.nodes.len(),
        columns,
    }
}

// ---- validation ----

/// Outcome of structural validation: hard violations (reject the case) and
/// advisory warnings (load anyway).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<String>,
    pub warnings: Vec<String>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Check every structural invariant of `net` and probe for likely modelling
/// mistakes. Violations make the case unusable; warnings flag suspicious
/// but legal data (disconnected subnetworks, demand that exceeds all
/// deliverable supply in some scenario).
pub fn validate(net: &Network) -> ValidationReport {
    let mut rep = ValidationReport::default();
    let bad = &mut rep.violations;

    if net.regions.is_empty() {
        bad.push("region list is empty".into());
    }
    if net.nodes.is_empty() {
        bad.push("node list is empty".into());
    }
    if net.scenarios.is_empty() {
        bad.push("scenario list is empty".into());
    }
    if !(net.interest_rate.is_finite() && net.interest_rate > 0.0) {
        bad.push(format!(
            "interest_rate must be finite and > 0, got {}",
            net.interest_rate
        ));
    }
    if !(net.angle_bound.is_finite() && net.angle_bound > 0.0) {
        bad.push(format!(
            "angle_bound must be finite and > 0, got {}",
            net.angle_bound
        ));
    }

    check_unique_names(bad, "region", net.regions.iter().map(|r| r.name.as_str()));
    check_unique_names(bad, "node", net.nodes.iter().map(|n| n.name.as_str()));
    check_unique_names(bad, "generator", net.generators.iter().map(|g| g.name.as_str()));
    check_unique_names(bad, "load", net.loads.iter().map(|l| l.name.as_str()));
    check_unique_names(
        bad,
        "existing line",
        net.existing_lines.iter().map(|l| l.name.as_str()),
    );
    check_unique_names(
        bad,
        "candidate line",
        net.candidate_lines.iter().map(|k| k.name.as_str()),
    );
    check_unique_names(bad, "scenario", net.scenarios.iter().map(|s| s.name.as_str()));

    for (i, node) in net.nodes.iter().enumerate() {
        if node.region.0 >= net.regions.len() {
            bad.push(format!(
                "node {} (index {i}) references region index {} out of range",
                node.name, node.region
            ));
        }
    }

    for (gi, g) in net.generators.iter().enumerate() {
        let ctx = format!("generator {}", g.name);
        if g.node.0 >= net.nodes.len() {
            bad.push(format!("{ctx}: node index {} out of range", g.node));
            continue;
        }
        if g.segments.is_empty() {
            bad.push(format!("{ctx}: cost curve has no segments"));
        }
        let mut prev_ub = 0.0;
        let mut prev_mc = f64::NEG_INFINITY;
        for (j, seg) in g.segments.iter().enumerate() {
            if !(seg.upper_bound.is_finite() && seg.upper_bound > prev_ub) {
                bad.push(format!(
                    "{ctx}: segment {j} upper_bound {} does not increase past {prev_ub}",
                    seg.upper_bound
                ));
            }
            if !(seg.marginal_cost.is_finite() && seg.marginal_cost >= prev_mc) {
                bad.push(format!(
                    "{ctx}: segment {j} marginal_cost {} breaks convexity (previous {prev_mc})",
                    seg.marginal_cost
                ));
            }
            prev_ub = seg.upper_bound.max(prev_ub);
            prev_mc = seg.marginal_cost.max(prev_mc);
        }
        for (si, scen) in net.scenarios.iter().enumerate() {
            let (lo, hi) = net.gen_limits(ScenId(si), GenId(gi));
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                bad.push(format!(
                    "{ctx}: p_min {lo} > p_max {hi} in scenario {}",
                    scen.name
                ));
            }
            if hi < 0.0 {
                bad.push(format!("{ctx}: p_max {hi} negative in scenario {}", scen.name));
            }
            if let Some(last) = g.segments.last() {
                if last.upper_bound < hi {
                    bad.push(format!(
                        "{ctx}: cost curve ends at {} MW but p_max is {hi} MW in scenario {}",
                        last.upper_bound, scen.name
                    ));
                }
            }
        }
    }

    for (di, d) in net.loads.iter().enumerate() {
        let ctx = format!("load {}", d.name);
        if d.node.0 >= net.nodes.len() {
            bad.push(format!("{ctx}: node index {} out of range", d.node));
        }
        for (si, scen) in net.scenarios.iter().enumerate() {
            let dem = net.demand(ScenId(si), LoadId(di));
            if !(dem.is_finite() && dem >= 0.0) {
                bad.push(format!("{ctx}: demand {dem} invalid in scenario {}", scen.name));
            }
        }
    }

    for l in &net.existing_lines {
        check_line(bad, "existing line", &l.name, l.from, l.to, l.reactance, l.capacity, net);
    }
    for k in &net.candidate_lines {
        check_line(bad, "candidate line", &k.name, k.from, k.to, k.reactance, k.capacity, net);
        let ctx = format!("candidate line {}", k.name);
        if !(k.build_cost.is_finite() && k.build_cost >= 0.0) {
            bad.push(format!("{ctx}: build_cost {} must be >= 0", k.build_cost));
        }
        if k.lifetime_years == 0 {
            bad.push(format!("{ctx}: lifetime_years must be at least 1"));
        }
    }

    for s in &net.scenarios {
        let ctx = format!("scenario {}", s.name);
        if !(s.weight.is_finite() && s.weight > 0.0) {
            bad.push(format!("{ctx}: weight {} must be > 0", s.weight));
        }
        for &(d, _) in &s.demand_overrides {
            if d.0 >= net.loads.len() {
                bad.push(format!("{ctx}: demand override for load index {d} out of range"));
            }
        }
        for &(g, _, _) in &s.gen_limit_overrides {
            if g.0 >= net.generators.len() {
                bad.push(format!(
                    "{ctx}: limit override for generator index {g} out of range"
                ));
            }
        }
    }

    if rep.is_valid() {
        connectivity_warnings(net, &mut rep.warnings);
    }
    rep
}

fn check_unique_names<'a>(
    bad: &mut Vec<String>,
    kind: &str,
    names: impl Iterator<Item = &'a str>,
) {
    let mut seen = std::collections::HashSet::new();
    for name in names {
        if name.is_empty() {
            bad.push(format!("{kind} with empty id"));
        }
        if !seen.insert(name) {
            bad.push(format!("duplicate {kind} id `{name}`"));
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn check_line(
    bad: &mut Vec<String>,
    kind: &str,
    name: &str,
    from: NodeId,
    to: NodeId,
    reactance: f64,
    capacity: f64,
    net: &Network,
) {
    let ctx = format!("{kind} {name}");
    if from.0 >= net.nodes.len() || to.0 >= net.nodes.len() {
        bad.push(format!("{ctx}: endpoint index out of range"));
        return;
    }
    if from == to {
        bad.push(format!("{ctx}: both endpoints are node {}", net.nodes[from.0].name));
    }
    if !(reactance.is_finite() && reactance > 0.0) {
        bad.push(format!("{ctx}: reactance {reactance} must be > 0"));
    }
    if !(capacity.is_finite() && capacity > 0.0) {
        bad.push(format!("{ctx}: capacity {capacity} must be > 0"));
    }
}

/// Warn about components disconnected under existing lines and about
/// components whose worst-scenario demand exceeds internal generation plus
/// every candidate line that could import into them.
fn connectivity_warnings(net: &Network, warnings: &mut Vec<String>) {
    let n = net.nodes.len();
    let mut comp = vec![usize::MAX; n];
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
    for l in &net.existing_lines {
        adj[l.from.0].push(l.to.0);
        adj[l.to.0].push(l.from.0);
    }
    let mut n_comp = 0;
    for start in 0..n {
        if comp[start] != usize::MAX {
            continue;
        }
        let mut stack = vec![start];
        comp[start] = n_comp;
        while let Some(v) = stack.pop() {
            for &w in &adj[v] {
                if comp[w] == usize::MAX {
                    comp[w] = n_comp;
                    stack.push(w);
                }
            }
        }
        n_comp += 1;
    }

    if n_comp > 1 {
        let mut members: Vec<Vec<&str>> = vec![Vec::new(); n_comp];
        for (i, &c) in comp.iter().enumerate() {
            members[c].push(&net.nodes[i].name);
        }
        let desc: Vec<String> = members.iter().map(|m| format!("[{}]", m.join(", "))).collect();
        warnings.push(format!(
            "existing lines leave the network in {n_comp} disconnected components: {}",
            desc.join(" ")
        ));
    }

    for (si, scen) in net.scenarios.iter().enumerate() {
        let s = ScenId(si);
        for c in 0..n_comp {
            let mut demand = 0.0;
            for (di, d) in net.loads.iter().enumerate() {
                if comp[d.node.0] == c {
                    demand += net.demand(s, LoadId(di));
                }
            }
            let mut supply = 0.0;
            for (gi, g) in net.generators.iter().enumerate() {
                if comp[g.node.0] == c {
                    supply += net.gen_limits(s, GenId(gi)).1;
                }
            }
            let mut import = 0.0;
            for k in &net.candidate_lines {
                if (comp[k.from.0] == c) != (comp[k.to.0] == c) {
                    import += k.capacity;
                }
            }
            if demand > supply + import {
                let names: Vec<&str> = net
                    .nodes
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| comp[*i] == c)
                    .map(|(_, nd)| nd.name.as_str())
                    .collect();
                warnings.push(format!(
                    "scenario {}: component [{}] demands {demand} MW but can source at most \
                     {} MW even if every candidate into it is built",
                    scen.name,
                    names.join(", "),
                    supply + import
                ));
            }
        }
    }
}

// ---- scenario-effective data and region helpers ----

impl Network {
    /// Demand of load `d` under scenario `s`, MW.
    pub fn demand(&self, s: ScenId, d: LoadId) -> f64 {
        for &(ld, dem) in &self.scenarios[s.0].demand_overrides {
            if ld == d {
                return dem;
            }
        }
        self.loads[d.0].demand
    }

    /// `(p_min, p_max)` of generator `g` under scenario `s`, MW.
    pub fn gen_limits(&self, s: ScenId, g: GenId) -> (f64, f64) {
        for &(gg, lo, hi) in &self.scenarios[s.0].gen_limit_overrides {
            if gg == g {
                return (lo, hi);
            }
        }
        (self.generators[g.0].p_min, self.generators[g.0].p_max)
    }

    pub fn region_of(&self, n: NodeId) -> RegionId {
        self.nodes[n.0].region
    }

    /// Regions of a branch's endpoints, `(from-side, to-side)`.
    pub fn line_regions(&self, from: NodeId, to: NodeId) -> (RegionId, RegionId) {
        (self.region_of(from), self.region_of(to))
    }

    /// Whether a candidate line crosses a region boundary.
    pub fn candidate_is_shared(&self, k: CandId) -> bool {
        let c = &self.candidate_lines[k.0];
        self.region_of(c.from) != self.region_of(c.to)
    }

    /// Whether an existing line crosses a region boundary.
    pub fn line_is_shared(&self, h: LineId) -> bool {
        let l = &self.existing_lines[h.0];
        self.region_of(l.from) != self.region_of(l.to)
    }

    /// Indices of boundary (inter-regional) existing lines.
    pub fn shared_existing_lines(&self) -> Vec<LineId> {
        (0..self.existing_lines.len())
            .map(LineId)
            .filter(|&h| self.line_is_shared(h))
            .collect()
    }

    /// Indices of boundary (inter-regional) candidate lines.
    pub fn shared_candidates(&self) -> Vec<CandId> {
        (0..self.candidate_lines.len())
            .map(CandId)
            .filter(|&k| self.candidate_is_shared(k))
            .collect()
    }

    /// Stakeholder regions of candidate `k`: the endpoint region, or both
    /// endpoint regions when the line is inter-regional.
    pub fn candidate_stakeholders(&self, k: CandId) -> Vec<RegionId> {
        let c = &self.candidate_lines[k.0];
        let (a, b) = self.line_regions(c.from, c.to);
        if a == b {
            vec![a]
        } else {
            vec![a, b]
        }
    }

    /// Cost share of region `z` in candidate `k`: stakeholders split the
    /// annualized build cost evenly, non-stakeholders pay nothing.
    pub fn candidate_share(&self, z: RegionId, k: CandId) -> f64 {
        let stk = self.candidate_stakeholders(k);
        if stk.contains(&z) {
            1.0 / stk.len() as f64
        } else {
            0.0
        }
    }

    /// Annualized build cost of candidate `k`, $/yr.
    pub fn annualized_build_cost(&self, k: CandId) -> Result<f64, CaseError> {
        let c = &self.candidate_lines[k.0];
        Ok(c.build_cost * annuity_factor(self.interest_rate, c.lifetime_years)?)
    }

    /// Generators located at each node.
    pub fn gens_by_node(&self) -> Vec<Vec<GenId>> {
        let mut out = vec![Vec::new(); self.nodes.len()];
        for (i, g) in self.generators.iter().enumerate() {
            out[g.node.0].push(GenId(i));
        }
        out
    }

    /// Loads located at each node.
    pub fn loads_by_node(&self) -> Vec<Vec<LoadId>> {
        let mut out = vec![Vec::new(); self.nodes.len()];
        for (i, d) in self.loads.iter().enumerate() {
            out[d.node.0].push(LoadId(i));
        }
        out
    }

    /// Nodes belonging to region `z`.
    pub fn nodes_in_region(&self, z: RegionId) -> Vec<NodeId> {
        (0..self.nodes.len())
            .map(NodeId)
            .filter(|&n| self.region_of(n) == z)
            .collect()
    }

    /// Total demand under scenario `s`, MW.
    pub fn total_demand(&self, s: ScenId) -> f64 {
        (0..self.loads.len()).map(|d| self.demand(s, LoadId(d))).sum()
    }

    /// Piecewise-linear generation cost of output `p` on generator `g`, $/h.
    /// `p` beyond the curve's last breakpoint is charged at the last
    /// marginal cost (only reachable with out-of-range inputs; validation
    /// guarantees the curve covers `p_max`).
    pub fn generation_cost(&self, g: GenId, p: f64) -> f64 {
        let mut cost = 0.0;
        let mut covered = 0.0;
        let mut last_mc = 0.0;
        for seg in &self.generators[g.0].segments {
            let take = (p - covered).min(seg.upper_bound - covered).max(0.0);
            cost += take * seg.marginal_cost;
            covered += take;
            last_mc = seg.marginal_cost;
        }
        if p > covered {
            cost += (p - covered) * last_mc;
        }
        cost
    }
}

#[cfg(test)]
pub(crate) mod tests;
