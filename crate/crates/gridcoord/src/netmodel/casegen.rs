//! Seeded synthetic case generator.
//!
//! Produces networks that are always feasible for any build plan: every
//! node carries a generator sized to cover its own worst-scenario demand,
//! so the zero-flow dispatch is a fallback solution. Existing lines form a
//! random spanning tree plus extras, and most candidates cross region
//! boundaries so there is something to coordinate about.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    CandidateLine, CostSegment, ExistingLine, GenId, Generator, Load, LoadId, Network, Node,
    NodeId, Region, RegionId, Scenario,
};

/// Size knobs for [`random_network`]. All counts are upper bounds except
/// where noted; actual counts are drawn per seed.
#[derive(Debug, Clone)]
pub struct CaseGenConfig {
    /// Exact number of regions (>= 1).
    pub regions: usize,
    /// Nodes per region, drawn from `1..=max_nodes_per_region`.
    pub max_nodes_per_region: usize,
    /// Candidate lines, drawn from `1..=max_candidates`.
    pub max_candidates: usize,
    /// Scenarios, drawn from `1..=max_scenarios`.
    pub max_scenarios: usize,
}

impl Default for CaseGenConfig {
    fn default() -> Self {
        Self {
            regions: 3,
            max_nodes_per_region: 4,
            max_candidates: 4,
            max_scenarios: 3,
        }
    }
}

fn round3(x: f64) -> f64 {
    (x * 1000.0).round() / 1000.0
}

/// Generate a random valid network, deterministically from `seed`.
pub fn random_network(cfg: &CaseGenConfig, seed: u64) -> Network {
    assert!(cfg.regions >= 1 && cfg.max_nodes_per_region >= 1);
    assert!(cfg.max_candidates >= 1 && cfg.max_scenarios >= 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let regions: Vec<Region> = (1..=cfg.regions)
        .map(|z| Region {
            name: format!("R{z}"),
        })
        .collect();

    let mut nodes = Vec::new();
    for z in 0..cfg.regions {
        let count = rng.gen_range(1..=cfg.max_nodes_per_region);
        for _ in 0..count {
            nodes.push(Node {
                name: format!("n{}", nodes.len() + 1),
                region: RegionId(z),
            });
        }
    }
    let n = nodes.len();

    // Base loads: roughly two thirds of nodes carry one, at least one total.
    let mut loads = Vec::new();
    for i in 0..n {
        if rng.gen_bool(0.66) || (i == n - 1 && loads.is_empty()) {
            loads.push(Load {
                name: format!("d{}", loads.len() + 1),
                node: NodeId(i),
                demand: round3(rng.gen_range(50.0..500.0)),
            });
        }
    }

    // Scenarios perturb demand before generators are sized, so sizing can
    // cover the true per-node worst case.
    let n_scen = rng.gen_range(1..=cfg.max_scenarios);
    let mut scenarios: Vec<Scenario> = (0..n_scen)
        .map(|s| {
            let mut demand_overrides = Vec::new();
            for (di, d) in loads.iter().enumerate() {
                if s > 0 && rng.gen_bool(0.4) {
                    demand_overrides
                        .push((LoadId(di), round3(d.demand * rng.gen_range(0.5..1.4))));
                }
            }
            Scenario {
                name: format!("s{}", s + 1),
                weight: round3(rng.gen_range(0.2..1.0)),
                demand_overrides,
                gen_limit_overrides: Vec::new(),
            }
        })
        .collect();

    let worst_node_demand = |node: usize, scenarios: &[Scenario]| -> f64 {
        (0..scenarios.len())
            .map(|s| {
                loads
                    .iter()
                    .enumerate()
                    .filter(|(_, d)| d.node.0 == node)
                    .map(|(di, d)| {
                        scenarios[s]
                            .demand_overrides
                            .iter()
                            .find(|&&(ld, _)| ld.0 == di)
                            .map(|&(_, dem)| dem)
                            .unwrap_or(d.demand)
                    })
                    .sum()
            })
            .fold(0.0, f64::max)
    };

    // One generator per node, sized past the node's worst-case demand so a
    // zero-flow dispatch always exists.
    let mut generators = Vec::new();
    for i in 0..n {
        let need = worst_node_demand(i, &scenarios);
        let p_max = round3(need * rng.gen_range(1.3..2.0) + rng.gen_range(50.0..200.0));
        let n_seg = rng.gen_range(1..=3usize);
        let mut segments = Vec::new();
        let mut mc = round3(rng.gen_range(10.0..80.0));
        for j in 0..n_seg {
            let ub = if j + 1 == n_seg {
                p_max
            } else {
                round3(p_max * (j + 1) as f64 / n_seg as f64)
            };
            segments.push(CostSegment {
                upper_bound: ub,
                marginal_cost: mc,
            });
            mc = round3(mc + rng.gen_range(5.0..40.0));
        }
        generators.push(Generator {
            name: format!("g{}", i + 1),
            node: NodeId(i),
            segments,
            p_min: 0.0,
            p_max,
        });
    }

    // Limit overrides may derate a generator but never below what keeps the
    // zero-flow fallback feasible.
    let floors: Vec<f64> = (0..n).map(|i| worst_node_demand(i, &scenarios)).collect();
    for (s, scen) in scenarios.iter_mut().enumerate() {
        if s == 0 {
            continue;
        }
        for (gi, g) in generators.iter().enumerate() {
            if rng.gen_bool(0.25) {
                let hi = round3((g.p_max * rng.gen_range(0.85..1.0)).max(floors[g.node.0]));
                scen.gen_limit_overrides.push((GenId(gi), 0.0, hi));
            }
        }
    }

    // Spanning tree over all nodes, then a few extra edges.
    let total_cap: f64 = (0..n).map(|i| worst_node_demand(i, &scenarios)).sum();
    let line_cap = round3((total_cap + 100.0).max(500.0));
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        order.swap(i, rng.gen_range(0..=i));
    }
    let mut existing_lines = Vec::new();
    for i in 1..n {
        let a = order[i];
        let b = order[rng.gen_range(0..i)];
        existing_lines.push(ExistingLine {
            name: format!("e{}", existing_lines.len() + 1),
            from: NodeId(a),
            to: NodeId(b),
            reactance: round3(rng.gen_range(0.05..0.5)),
            capacity: line_cap,
        });
    }
    for _ in 0..rng.gen_range(0..=n / 3) {
        let a = rng.gen_range(0..n);
        let b = rng.gen_range(0..n);
        if a != b {
            existing_lines.push(ExistingLine {
                name: format!("e{}", existing_lines.len() + 1),
                from: NodeId(a),
                to: NodeId(b),
                reactance: round3(rng.gen_range(0.05..0.5)),
                capacity: line_cap,
            });
        }
    }

    let n_cand = if n < 2 { 0 } else { rng.gen_range(1..=cfg.max_candidates) };
    let mut candidate_lines = Vec::new();
    for _ in 0..n_cand {
        let (a, b) = if cfg.regions >= 2 && rng.gen_bool(0.6) {
            // Prefer inter-regional candidates.
            let za = rng.gen_range(0..cfg.regions);
            let mut zb = rng.gen_range(0..cfg.regions);
            while zb == za {
                zb = rng.gen_range(0..cfg.regions);
            }
            let pick = |rng: &mut ChaCha8Rng, z: usize| -> usize {
                let members: Vec<usize> =
                    (0..n).filter(|&i| nodes[i].region.0 == z).collect();
                members[rng.gen_range(0..members.len())]
            };
            (pick(&mut rng, za), pick(&mut rng, zb))
        } else {
            let a = rng.gen_range(0..n);
            let mut b = rng.gen_range(0..n);
            while b == a {
                b = rng.gen_range(0..n);
            }
            (a, b)
        };
        if a == b {
            continue;
        }
        candidate_lines.push(CandidateLine {
            name: format!("k{}", candidate_lines.len() + 1),
            from: NodeId(a),
            to: NodeId(b),
            reactance: round3(rng.gen_range(0.05..0.5)),
            capacity: round3(rng.gen_range(100.0..800.0)),
            build_cost: round3(rng.gen_range(1.0e4..5.0e5)),
            lifetime_years: rng.gen_range(5..=40),
        });
    }

    let net = Network {
        regions,
        nodes,
        generators,
        loads,
        existing_lines,
        candidate_lines,
        scenarios,
        interest_rate: round3(rng.gen_range(0.05..0.12)),
        angle_bound: round3(rng.gen_range(0.4..1.0)),
        notes: Some(format!("synthetic case, seed {seed}")),
    };
    debug_assert!(
        super::validate(&net).is_valid(),
        "generator produced an invalid case: {:?}",
        super::validate(&net).violations
    );
    net
}
