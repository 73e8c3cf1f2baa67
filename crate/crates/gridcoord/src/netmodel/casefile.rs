//! JSON case files.
//!
//! The on-disk format references elements by string id; loading resolves
//! every reference to a dense index and rejects the case unless
//! [`validate`](super::validate) reports no violations. Saving inverts the
//! mapping, so `load -> save -> load` is the identity on [`Network`].

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{
    validate, CandidateLine, CostSegment, ExistingLine, GenId, Generator, Load, LoadId, Network,
    Node, Region, RegionId, Scenario,
};

/// Format tag expected in the `version` field.
pub const CASE_VERSION: &str = "gridcoord-case/1";

/// Everything that can go wrong reading or writing a case.
#[derive(Debug, Error)]
pub enum CaseError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("cannot write {path}: {source}")]
    Write {
        path: PathBuf,
        source: std::io::Error,
    },
    /// Malformed JSON or a field of the wrong shape.
    #[error("case parse error: {0}")]
    Parse(String),
    #[error("unsupported case version `{found}` (expected `{expected}`)")]
    Version { found: String, expected: &'static str },
    /// A by-name reference to an element that does not exist.
    #[error("unknown {kind} id `{name}` referenced by {referrer}")]
    UnknownId {
        kind: &'static str,
        name: String,
        referrer: String,
    },
    /// Structurally well-formed but semantically invalid data.
    #[error("invalid case: {0}")]
    Domain(String),
}

// ---- raw (on-disk) schema ----

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCase {
    version: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    notes: Option<String>,
    regions: Vec<String>,
    nodes: Vec<RawNode>,
    generators: Vec<RawGenerator>,
    loads: Vec<RawLoad>,
    existing_lines: Vec<RawExistingLine>,
    candidate_lines: Vec<RawCandidateLine>,
    scenarios: Vec<RawScenario>,
    interest_rate: f64,
    angle_bound: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawNode {
    id: String,
    region: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGenerator {
    id: String,
    node: String,
    /// `[[upper_bound, marginal_cost], ...]`, cumulative breakpoints.
    cost_curve: Vec<(f64, f64)>,
    #[serde(default)]
    p_min: f64,
    p_max: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLoad {
    id: String,
    node: String,
    demand: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawExistingLine {
    id: String,
    from: String,
    to: String,
    reactance: f64,
    capacity: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCandidateLine {
    id: String,
    from: String,
    to: String,
    reactance: f64,
    capacity: f64,
    build_cost: f64,
    lifetime_years: u32,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScenario {
    id: String,
    weight: f64,
    /// Load id -> demand, MW.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    demand_overrides: BTreeMap<String, f64>,
    /// Generator id -> `[p_min, p_max]`, MW.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    gen_limit_overrides: BTreeMap<String, (f64, f64)>,
}

// ---- loading ----

/// Load and validate a case from `path`.
pub fn load_case(path: impl AsRef<Path>) -> Result<Network, CaseError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| CaseError::Read {
        path: path.to_owned(),
        source,
    })?;
    load_case_str(&text)
}

/// Load and validate a case from JSON text.
pub fn load_case_str(text: &str) -> Result<Network, CaseError> {
    let raw: RawCase = serde_json::from_str(text).map_err(|e| CaseError::Parse(e.to_string()))?;
    if raw.version != CASE_VERSION {
        return Err(CaseError::Version {
            found: raw.version,
            expected: CASE_VERSION,
        });
    }

    let region_ix = index_of(raw.regions.iter().map(String::as_str));
    let node_ix = index_of(raw.nodes.iter().map(|n| n.id.as_str()));
    let gen_ix = index_of(raw.generators.iter().map(|g| g.id.as_str()));
    let load_ix = index_of(raw.loads.iter().map(|l| l.id.as_str()));

    let resolve = |map: &BTreeMap<&str, usize>,
                   kind: &'static str,
                   name: &str,
                   referrer: String|
     -> Result<usize, CaseError> {
        map.get(name).copied().ok_or_else(|| CaseError::UnknownId {
            kind,
            name: name.to_owned(),
            referrer,
        })
    };

    let nodes = raw
        .nodes
        .iter()
        .map(|n| {
            Ok(Node {
                name: n.id.clone(),
                region: RegionId(resolve(
                    &region_ix,
                    "region",
                    &n.region,
                    format!("node {}", n.id),
                )?),
            })
        })
        .collect::<Result<Vec<_>, CaseError>>()?;

    let generators = raw
        .generators
        .iter()
        .map(|g| {
            Ok(Generator {
                name: g.id.clone(),
                node: super::NodeId(resolve(
                    &node_ix,
                    "node",
                    &g.node,
                    format!("generator {}", g.id),
                )?),
                segments: g
                    .cost_curve
                    .iter()
                    .map(|&(ub, mc)| CostSegment {
                        upper_bound: ub,
                        marginal_cost: mc,
                    })
                    .collect(),
                p_min: g.p_min,
                p_max: g.p_max,
            })
        })
        .collect::<Result<Vec<_>, CaseError>>()?;

    let loads = raw
        .loads
        .iter()
        .map(|l| {
            Ok(Load {
                name: l.id.clone(),
                node: super::NodeId(resolve(
                    &node_ix,
                    "node",
                    &l.node,
                    format!("load {}", l.id),
                )?),
                demand: l.demand,
            })
        })
        .collect::<Result<Vec<_>, CaseError>>()?;

    let existing_lines = raw
        .existing_lines
        .iter()
        .map(|l| {
            let ctx = || format!("existing line {}", l.id);
            Ok(ExistingLine {
                name: l.id.clone(),
                from: super::NodeId(resolve(&node_ix, "node", &l.from, ctx())?),
                to: super::NodeId(resolve(&node_ix, "node", &l.to, ctx())?),
                reactance: l.reactance,
                capacity: l.capacity,
            })
        })
        .collect::<Result<Vec<_>, CaseError>>()?;

    let candidate_lines = raw
        .candidate_lines
        .iter()
        .map(|k| {
            let ctx = || format!("candidate line {}", k.id);
            Ok(CandidateLine {
                name: k.id.clone(),
                from: super::NodeId(resolve(&node_ix, "node", &k.from, ctx())?),
                to: super::NodeId(resolve(&node_ix, "node", &k.to, ctx())?),
                reactance: k.reactance,
                capacity: k.capacity,
                build_cost: k.build_cost,
                lifetime_years: k.lifetime_years,
            })
        })
        .collect::<Result<Vec<_>, CaseError>>()?;

    let scenarios = raw
        .scenarios
        .iter()
        .map(|s| {
            let ctx = || format!("scenario {}", s.id);
            let mut demand_overrides = s
                .demand_overrides
                .iter()
                .map(|(name, &dem)| Ok((LoadId(resolve(&load_ix, "load", name, ctx())?), dem)))
                .collect::<Result<Vec<_>, CaseError>>()?;
            demand_overrides.sort_by_key(|&(d, _)| d);
            let mut gen_limit_overrides = s
                .gen_limit_overrides
                .iter()
                .map(|(name, &(lo, hi))| {
                    Ok((GenId(resolve(&gen_ix, "generator", name, ctx())?), lo, hi))
                })
                .collect::<Result<Vec<_>, CaseError>>()?;
            gen_limit_overrides.sort_by_key(|&(g, _, _)| g);
            Ok(Scenario {
                name: s.id.clone(),
                weight: s.weight,
                demand_overrides,
                gen_limit_overrides,
            })
        })
        .collect::<Result<Vec<_>, CaseError>>()?;

    let net = Network {
        regions: raw.regions.into_iter().map(|name| Region { name }).collect(),
        nodes,
        generators,
        loads,
        existing_lines,
        candidate_lines,
        scenarios,
        interest_rate: raw.interest_rate,
        angle_bound: raw.angle_bound,
        notes: raw.notes,
    };

    let report = validate(&net);
    if !report.is_valid() {
        return Err(CaseError::Domain(report.violations.join("; ")));
    }
    Ok(net)
}

fn index_of<'a>(names: impl Iterator<Item = &'a str>) -> BTreeMap<&'a str, usize> {
    let mut map = BTreeMap::new();
    for (i, name) in names.enumerate() {
        // First occurrence wins; duplicates are flagged by validation.
        map.entry(name).or_insert(i);
    }
    map
}

// ---- saving ----

/// Serialize `net` to pretty-printed JSON (trailing newline included).
pub fn save_case_string(net: &Network) -> String {
    let raw = RawCase {
        version: CASE_VERSION.to_owned(),
        notes: net.notes.clone(),
        regions: net.regions.iter().map(|r| r.name.clone()).collect(),
        nodes: net
            .nodes
            .iter()
            .map(|n| RawNode {
                id: n.name.clone(),
                region: net.regions[n.region.0].name.clone(),
            })
            .collect(),
        generators: net
            .generators
            .iter()
            .map(|g| RawGenerator {
                id: g.name.clone(),
                node: net.nodes[g.node.0].name.clone(),
                cost_curve: g
                    .segments
                    .iter()
                    .map(|s| (s.upper_bound, s.marginal_cost))
                    .collect(),
                p_min: g.p_min,
                p_max: g.p_max,
            })
            .collect(),
        loads: net
            .loads
            .iter()
            .map(|l| RawLoad {
                id: l.name.clone(),
                node: net.nodes[l.node.0].name.clone(),
                demand: l.demand,
            })
            .collect(),
        existing_lines: net
            .existing_lines
            .iter()
            .map(|l| RawExistingLine {
                id: l.name.clone(),
                from: net.nodes[l.from.0].name.clone(),
                to: net.nodes[l.to.0].name.clone(),
                reactance: l.reactance,
                capacity: l.capacity,
            })
            .collect(),
        candidate_lines: net
            .candidate_lines
            .iter()
            .map(|k| RawCandidateLine {
                id: k.name.clone(),
                from: net.nodes[k.from.0].name.clone(),
                to: net.nodes[k.to.0].name.clone(),
                reactance: k.reactance,
                capacity: k.capacity,
                build_cost: k.build_cost,
                lifetime_years: k.lifetime_years,
            })
            .collect(),
        scenarios: net
            .scenarios
            .iter()
            .map(|s| RawScenario {
                id: s.name.clone(),
                weight: s.weight,
                demand_overrides: s
                    .demand_overrides
                    .iter()
                    .map(|&(d, dem)| (net.loads[d.0].name.clone(), dem))
                    .collect(),
                gen_limit_overrides: s
                    .gen_limit_overrides
                    .iter()
                    .map(|&(g, lo, hi)| (net.generators[g.0].name.clone(), (lo, hi)))
                    .collect(),
            })
            .collect(),
        interest_rate: net.interest_rate,
        angle_bound: net.angle_bound,
    };
    let mut text = serde_json::to_string_pretty(&raw).expect("case serialization cannot fail");
    text.push('\n');
    text
}

/// Write `net` to `path` as JSON.
pub fn save_case(net: &Network, path: impl AsRef<Path>) -> Result<(), CaseError> {
    let path = path.as_ref();
    std::fs::write(path, save_case_string(net)).map_err(|source| CaseError::Write {
        path: path.to_owned(),
        source,
    })
}
