use super::*;
use proptest::prelude::*;

fn cases_dir() -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../cases")
}

/// Two single-node regions joined by a weak line with one big candidate.
/// Same topology and economics as cases/two_region.json, built in code so
/// model tests do not depend on the loader.
pub fn two_region_fixture() -> Network {
    Network {
        regions: vec![
            Region { name: "R1".into() },
            Region { name: "R2".into() },
        ],
        nodes: vec![
            Node { name: "n1".into(), region: RegionId(0) },
            Node { name: "n2".into(), region: RegionId(1) },
        ],
        generators: vec![
            Generator {
                name: "g1".into(),
                node: NodeId(0),
                segments: vec![
                    CostSegment { upper_bound: 500.0, marginal_cost: 50.0 },
                    CostSegment { upper_bound: 1800.0, marginal_cost: 55.0 },
                    CostSegment { upper_bound: 3000.0, marginal_cost: 70.0 },
                ],
                p_min: 0.0,
                p_max: 3000.0,
            },
            Generator {
                name: "g2".into(),
                node: NodeId(1),
                segments: vec![CostSegment { upper_bound: 2500.0, marginal_cost: 10.0 }],
                p_min: 0.0,
                p_max: 2500.0,
            },
        ],
        loads: vec![
            Load { name: "d1".into(), node: NodeId(0), demand: 2000.0 },
            Load { name: "d2".into(), node: NodeId(1), demand: 500.0 },
        ],
        existing_lines: vec![ExistingLine {
            name: "e1".into(),
            from: NodeId(1),
            to: NodeId(0),
            reactance: 0.9,
            capacity: 150.0,
        }],
        candidate_lines: vec![CandidateLine {
            name: "k1".into(),
            from: NodeId(1),
            to: NodeId(0),
            reactance: 0.1,
            capacity: 1350.0,
            build_cost: 2000.0,
            lifetime_years: 1,
        }],
        scenarios: vec![Scenario {
            name: "s1".into(),
            weight: 1.0,
            demand_overrides: vec![],
            gen_limit_overrides: vec![],
        }],
        interest_rate: 1e-9,
        angle_bound: 150.0,
        notes: None,
    }
}

// ---- annuity ----

// Regression constants computed independently with exact rational
// arithmetic (numerator r(1+r)^T, denominator (1+r)^T - 1, evaluated as a
// single big fraction, then rounded).
const ANNUITY_10PCT_10YR: f64 = 0.162745394882511607;
const ANNUITY_8PCT_25YR: f64 = 0.093678779051968134;

#[test]
fn annuity_matches_rational_arithmetic_references() {
    let a = annuity_factor(0.1, 10).unwrap();
    assert!((a - ANNUITY_10PCT_10YR).abs() / ANNUITY_10PCT_10YR < 1e-12, "{a}");
    let b = annuity_factor(0.08, 25).unwrap();
    assert!((b - ANNUITY_8PCT_25YR).abs() / ANNUITY_8PCT_25YR < 1e-12, "{b}");
}

#[test]
fn annuity_one_year_is_one_plus_rate() {
    assert!((annuity_factor(0.1, 1).unwrap() - 1.1).abs() < 1e-12);
    // Tiny rate over one year: the naive 1 - (1+r)^-T form loses ~7 digits
    // here; the implementation must hold this to full precision.
    assert!((annuity_factor(1e-9, 1).unwrap() - 1.000000001).abs() < 1e-14);
}

#[test]
fn annuity_long_lifetime_approaches_rate() {
    let a = annuity_factor(0.05, 1_000_000).unwrap();
    assert!((a - 0.05).abs() < 1e-9, "{a}");
    assert!(a >= 0.05);
}

#[test]
fn annuity_rejects_bad_inputs() {
    assert!(annuity_factor(0.0, 10).is_err());
    assert!(annuity_factor(-0.1, 10).is_err());
    assert!(annuity_factor(f64::NAN, 10).is_err());
    assert!(annuity_factor(0.1, 0).is_err());
}

proptest! {
    /// The factor lies in (rate, 1 + rate] and decreases with lifetime:
    /// paying faster always costs more per year. The year-over-year drop
    /// shrinks like rate^2 (1+rate)^-years, so strictness is only checkable
    /// while that stays above f64 resolution.
    #[test]
    fn annuity_bounds_and_monotonicity(rate in 1e-6..1.5f64, years in 1u32..120) {
        let a = annuity_factor(rate, years).unwrap();
        let b = annuity_factor(rate, years + 1).unwrap();
        prop_assert!(a >= rate);
        prop_assert!(a <= 1.0 + rate + 1e-12);
        prop_assert!(b <= a);
        // Both gaps are O(rate * (1+rate)^-years); strictness is only
        // meaningful while that exceeds f64 resolution.
        if rate * (1.0 + rate).powi(-(years as i32)) > 1e-12 {
            prop_assert!(a > rate);
            prop_assert!(b < a);
        }
    }
}

// ---- generation cost ----

#[test]
fn generation_cost_walks_segments() {
    let net = two_region_fixture();
    let g1 = GenId(0);
    assert_eq!(net.generation_cost(g1, 0.0), 0.0);
    assert_eq!(net.generation_cost(g1, 500.0), 25_000.0);
    assert_eq!(net.generation_cost(g1, 1850.0), 100_000.0);
    assert_eq!(net.generation_cost(g1, 3000.0), 180_500.0);
    let g2 = GenId(1);
    assert_eq!(net.generation_cost(g2, 650.0), 6_500.0);
    assert_eq!(net.generation_cost(g2, 2000.0), 20_000.0);
}

// ---- incidence ----

#[test]
fn incidence_two_region_dense() {
    let inc = incidence(&two_region_fixture());
    // Columns: existing e1 then candidate k1, both oriented n2 -> n1.
    assert_eq!(inc.dense(), vec![vec![-1, -1], vec![1, 1]]);
    assert_eq!(inc.entry(NodeId(1), 0), 1);
    assert_eq!(inc.entry(NodeId(0), 1), -1);
}

#[test]
fn incidence_columns_sum_to_zero_on_random_networks() {
    let cfg = CaseGenConfig::default();
    for seed in 0..30 {
        let net = random_network(&cfg, seed);
        let inc = incidence(&net);
        assert_eq!(
            inc.columns.len(),
            net.existing_lines.len() + net.candidate_lines.len()
        );
        for c in 0..inc.columns.len() {
            let col: Vec<i8> = (0..inc.n_nodes).map(|n| inc.entry(NodeId(n), c)).collect();
            assert_eq!(col.iter().filter(|&&v| v == 1).count(), 1, "seed {seed} col {c}");
            assert_eq!(col.iter().filter(|&&v| v == -1).count(), 1, "seed {seed} col {c}");
            assert_eq!(col.iter().map(|&v| v as i32).sum::<i32>(), 0);
        }
    }
}

// ---- validation ----

#[test]
fn fixture_validates_clean() {
    let rep = validate(&two_region_fixture());
    assert!(rep.is_valid(), "{:?}", rep.violations);
    assert!(rep.warnings.is_empty(), "{:?}", rep.warnings);
}

#[test]
fn validate_flags_inverted_limits_under_override() {
    let mut net = two_region_fixture();
    net.scenarios[0].gen_limit_overrides.push((GenId(0), 100.0, 50.0));
    let rep = validate(&net);
    assert!(rep.violations.iter().any(|v| v.contains("g1") && v.contains("p_min")), "{:?}", rep.violations);
}

#[test]
fn validate_flags_nonconvex_cost_curve() {
    let mut net = two_region_fixture();
    net.generators[0].segments[1].marginal_cost = 10.0; // cheaper than segment 0
    let rep = validate(&net);
    assert!(rep.violations.iter().any(|v| v.contains("g1") && v.contains("convex")), "{:?}", rep.violations);
}

#[test]
fn validate_flags_cost_curve_not_covering_p_max() {
    let mut net = two_region_fixture();
    net.generators[1].p_max = 2600.0; // curve ends at 2500
    let rep = validate(&net);
    assert!(rep.violations.iter().any(|v| v.contains("g2") && v.contains("curve ends")), "{:?}", rep.violations);
}

#[test]
fn validate_flags_duplicate_and_empty_ids() {
    let mut net = two_region_fixture();
    net.loads[1].name = "d1".into();
    net.regions[1].name = String::new();
    let rep = validate(&net);
    assert!(rep.violations.iter().any(|v| v.contains("duplicate load id `d1`")));
    assert!(rep.violations.iter().any(|v| v.contains("region with empty id")));
}

#[test]
fn validate_flags_bad_lines_and_scenarios() {
    let mut net = two_region_fixture();
    net.existing_lines[0].reactance = 0.0;
    net.candidate_lines[0].capacity = -5.0;
    net.candidate_lines[0].lifetime_years = 0;
    net.scenarios[0].weight = 0.0;
    net.scenarios[0].demand_overrides.push((LoadId(9), 1.0));
    let rep = validate(&net);
    let has = |needle: &str| rep.violations.iter().any(|v| v.contains(needle));
    assert!(has("e1"), "{:?}", rep.violations);
    assert!(has("capacity -5"));
    assert!(has("lifetime_years"));
    assert!(has("weight 0"));
    assert!(has("out of range"));
}

#[test]
fn validate_flags_self_loop() {
    let mut net = two_region_fixture();
    net.existing_lines[0].to = NodeId(1);
    let rep = validate(&net);
    assert!(rep.violations.iter().any(|v| v.contains("both endpoints")), "{:?}", rep.violations);
}

#[test]
fn validate_warns_on_islanded_load() {
    // n3 carries a load but no line or candidate reaches it.
    let mut net = two_region_fixture();
    net.nodes.push(Node { name: "n3".into(), region: RegionId(1) });
    net.loads.push(Load { name: "d3".into(), node: NodeId(2), demand: 50.0 });
    let rep = validate(&net);
    assert!(rep.is_valid(), "{:?}", rep.violations);
    assert!(rep.warnings.iter().any(|w| w.contains("n3") && w.contains("components")), "{:?}", rep.warnings);
    assert!(rep.warnings.iter().any(|w| w.contains("n3") && w.contains("at most")), "{:?}", rep.warnings);

    // Cross-check the component count with a union-find oracle.
    let mut parent: Vec<usize> = (0..net.nodes.len()).collect();
    fn find(p: &mut Vec<usize>, i: usize) -> usize {
        if p[i] != i {
            let r = find(p, p[i]);
            p[i] = r;
        }
        p[i]
    }
    for l in &net.existing_lines {
        let (a, b) = (find(&mut parent, l.from.0), find(&mut parent, l.to.0));
        parent[a] = b;
    }
    let mut roots: Vec<usize> = (0..net.nodes.len()).map(|i| find(&mut parent, i)).collect();
    roots.sort_unstable();
    roots.dedup();
    assert_eq!(roots.len(), 2);
    assert!(rep.warnings.iter().any(|w| w.contains("2 disconnected components")));
}

// ---- scenario accessors and region helpers ----

#[test]
fn scenario_overrides_apply_per_element() {
    let net = load_case(cases_dir().join("three_region.json")).unwrap();
    let (s1, s2) = (ScenId(0), ScenId(1));
    assert_eq!(net.demand(s1, LoadId(0)), 1000.0);
    assert_eq!(net.demand(s2, LoadId(0)), 1100.0);
    assert_eq!(net.demand(s2, LoadId(1)), 500.0); // untouched
    assert_eq!(net.demand(s2, LoadId(2)), 300.0);
    assert_eq!(net.gen_limits(s1, GenId(1)), (0.0, 1500.0));
    assert_eq!(net.gen_limits(s2, GenId(1)), (0.0, 1400.0));
    assert_eq!(net.gen_limits(s2, GenId(0)), (0.0, 1000.0)); // untouched
    assert_eq!(net.total_demand(s1), 1700.0);
    assert_eq!(net.total_demand(s2), 1900.0);
}

#[test]
fn region_helpers_classify_boundary_elements() {
    let net = load_case(cases_dir().join("three_region.json")).unwrap();
    assert!(net.candidate_is_shared(CandId(0)));
    assert!(net.candidate_is_shared(CandId(1)));
    assert_eq!(net.shared_existing_lines(), vec![LineId(0), LineId(1)]);
    assert_eq!(net.candidate_stakeholders(CandId(0)), vec![RegionId(1), RegionId(0)]);
    assert_eq!(net.candidate_share(RegionId(0), CandId(0)), 0.5);
    assert_eq!(net.candidate_share(RegionId(2), CandId(0)), 0.0);
    assert_eq!(net.nodes_in_region(RegionId(2)), vec![NodeId(2)]);

    // An internal candidate has a single stakeholder paying in full.
    let mut net2 = two_region_fixture();
    net2.nodes.push(Node { name: "n3".into(), region: RegionId(0) });
    net2.candidate_lines.push(CandidateLine {
        name: "k2".into(),
        from: NodeId(0),
        to: NodeId(2),
        reactance: 0.2,
        capacity: 100.0,
        build_cost: 500.0,
        lifetime_years: 10,
    });
    assert!(!net2.candidate_is_shared(CandId(1)));
    assert_eq!(net2.candidate_stakeholders(CandId(1)), vec![RegionId(0)]);
    assert_eq!(net2.candidate_share(RegionId(0), CandId(1)), 1.0);
}

// ---- case files ----

#[test]
fn bundled_cases_load_and_validate() {
    for name in ["two_region.json", "two_region_40000.json", "three_region.json"] {
        let net = load_case(cases_dir().join(name)).unwrap_or_else(|e| panic!("{name}: {e}"));
        let rep = validate(&net);
        assert!(rep.is_valid(), "{name}: {:?}", rep.violations);
        assert!(rep.warnings.is_empty(), "{name}: {:?}", rep.warnings);
    }
}

#[test]
fn bundled_two_region_matches_fixture() {
    let mut net = load_case(cases_dir().join("two_region.json")).unwrap();
    net.notes = None;
    assert_eq!(net, two_region_fixture());
}

#[test]
fn save_load_round_trip_is_identity() {
    let mut fixture = two_region_fixture();
    fixture.notes = Some("round trip".into());
    fixture.scenarios[0].demand_overrides.push((LoadId(1), 480.0));
    fixture.scenarios[0].gen_limit_overrides.push((GenId(0), 0.0, 2800.0));
    let text = save_case_string(&fixture);
    assert_eq!(load_case_str(&text).unwrap(), fixture);

    let cfg = CaseGenConfig::default();
    for seed in 0..30 {
        let net = random_network(&cfg, seed);
        let text = save_case_string(&net);
        let back = load_case_str(&text).unwrap_or_else(|e| panic!("seed {seed}: {e}"));
        assert_eq!(back, net, "seed {seed}");
    }
}

#[test]
fn save_case_writes_readable_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("case.json");
    let net = two_region_fixture();
    save_case(&net, &path).unwrap();
    assert_eq!(load_case(&path).unwrap(), net);
}

#[test]
fn load_errors_are_specific() {
    assert!(matches!(
        load_case("/nonexistent/case.json"),
        Err(CaseError::Read { .. })
    ));
    assert!(matches!(load_case_str("{ not json"), Err(CaseError::Parse(_))));

    let mut net = two_region_fixture();
    net.notes = None;
    let good = save_case_string(&net);

    let wrong_version = good.replace("gridcoord-case/1", "gridcoord-case/99");
    assert!(matches!(
        load_case_str(&wrong_version),
        Err(CaseError::Version { .. })
    ));

    let bad_ref = good.replace("\"node\": \"n2\"", "\"node\": \"nX\"");
    match load_case_str(&bad_ref) {
        Err(CaseError::UnknownId { kind, name, referrer }) => {
            assert_eq!(kind, "node");
            assert_eq!(name, "nX");
            assert!(referrer.contains("g2") || referrer.contains("d2"), "{referrer}");
        }
        other => panic!("expected UnknownId, got {other:?}"),
    }

    let bad_capacity = good.replace("\"capacity\": 150.0", "\"capacity\": -150.0");
    match load_case_str(&bad_capacity) {
        Err(CaseError::Domain(msg)) => assert!(msg.contains("e1"), "{msg}"),
        other => panic!("expected Domain, got {other:?}"),
    }

    let typo_field = good.replace("\"angle_bound\"", "\"angel_bound\"");
    assert!(matches!(load_case_str(&typo_field), Err(CaseError::Parse(_))));
}

// ---- case generator ----

#[test]
fn random_networks_are_valid_and_deterministic() {
    let cfg = CaseGenConfig::default();
    for seed in 0..50 {
        let net = random_network(&cfg, seed);
        let rep = validate(&net);
        assert!(rep.is_valid(), "seed {seed}: {:?}", rep.violations);
        assert_eq!(net, random_network(&cfg, seed), "seed {seed} not deterministic");
    }
    let small = CaseGenConfig {
        regions: 1,
        max_nodes_per_region: 1,
        max_candidates: 1,
        max_scenarios: 1,
    };
    let tiny = random_network(&small, 7);
    assert!(validate(&tiny).is_valid());
    assert_eq!(tiny.nodes.len(), 1);
    assert!(tiny.candidate_lines.is_empty());
}
