use std::fs;

use super::*;
use crate::participants::TimeGrid;

fn write_profiles(dir: &Path, demand: &str, availability: &str) {
    fs::write(dir.join(DEMAND_FILE), demand).unwrap();
    fs::write(dir.join(AVAILABILITY_FILE), availability).unwrap();
    fs::write(dir.join(RENEWABLES_FILE), "tech,zone,capacity_mw\n").unwrap();
}

fn demand_csv(zones: &[&str], steps: usize) -> String {
    let mut s = String::from("zone,timestep,demand_mw\n");
    for z in zones {
        for t in 0..steps {
            s += &format!("{z},{t},{}\n", 1000 + 10 * t);
        }
    }
    s
}

fn schema_problems(e: Error) -> Vec<String> {
    match e {
        Error::Schema { problems, .. } => problems,
        other => panic!("expected a schema error, got {other}"),
    }
}

#[test]
fn well_formed_three_zone_day() {
    let dir = tempfile::tempdir().unwrap();
    write_profiles(dir.path(), &demand_csv(&["A", "B", "C"], 24), "tech,zone,timestep,availability\n");
    let p = load_profiles(dir.path()).unwrap();
    assert_eq!(p.zones, vec!["A", "B", "C"]);
    assert_eq!(p.steps, 24);
    assert_eq!(p.demand.iter().map(Vec::len).sum::<usize>(), 72);
    assert_eq!(p.demand[1][3], 1030.0);
}

#[test]
fn availability_above_one_reports_row() {
    let dir = tempfile::tempdir().unwrap();
    let av = "tech,zone,timestep,availability\nwind,A,0,0.5\nwind,A,1,1.2\n";
    write_profiles(dir.path(), &demand_csv(&["A"], 2), av);
    let problems = schema_problems(load_profiles(dir.path()).unwrap_err());
    assert!(problems[0].starts_with("row 3:"), "{problems:?}");
    assert!(problems[0].contains("1.2"));
}

#[test]
fn duplicate_demand_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let demand = "zone,timestep,demand_mw\nA,0,10\nA,1,11\nA,1,12\n";
    write_profiles(dir.path(), demand, "tech,zone,timestep,availability\n");
    let problems = schema_problems(load_profiles(dir.path()).unwrap_err());
    assert!(problems.iter().any(|p| p.contains("row 4") && p.contains("duplicate")), "{problems:?}");
}

#[test]
fn missing_and_non_numeric_cells_are_enumerated() {
    let dir = tempfile::tempdir().unwrap();
    let demand = "zone,timestep,demand_mw\nA,0,10\nA,2,11\nB,0,x\nB,1,3\nB,2,4\n";
    write_profiles(dir.path(), demand, "tech,zone,timestep,availability\n");
    let problems = schema_problems(load_profiles(dir.path()).unwrap_err());
    assert!(problems.iter().any(|p| p.starts_with("row 4:")), "{problems:?}");
    assert!(problems.iter().any(|p| p.contains("zone A at timestep 1")), "{problems:?}");
}

#[test]
fn synthetic_peaks_are_exact_and_non_coincident() {
    let inputs = synthesize_case_study(&SynthParams::default()).unwrap();
    let p = &inputs.profiles;
    for (z, (&peak, &hour)) in [19_000.0, 16_000.0, 18_000.0].iter().zip(&[18, 19, 20]).enumerate() {
        let max = p.demand[z].iter().copied().fold(0.0, f64::max);
        assert_eq!(max, peak);
        assert_eq!(p.demand[z][hour], peak);
    }
}

#[test]
fn synthetic_renewables_match_stated_capacities() {
    let p = synthesize_case_study(&SynthParams::default()).unwrap().profiles;
    let cap = |tech: &str, zone: &str| {
        p.renewable_capacity
            .iter()
            .find(|r| r.tech == tech && r.zone == zone)
            .unwrap()
            .capacity_mw
    };
    assert_eq!((cap("solar", "A"), cap("wind", "A")), (15_400.0, 13_700.0));
    assert_eq!((cap("solar", "B"), cap("wind", "B")), (8_800.0, 5_300.0));
    assert_eq!((cap("solar", "C"), cap("wind", "C")), (18_700.0, 8_300.0));
    for a in &p.availability {
        for h in 17..=21 {
            assert!(a.values[h] <= 0.10, "{} {} at {h}: {}", a.tech, a.zone, a.values[h]);
        }
        assert!(a.values.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn synthetic_network_and_weights() {
    let inputs = synthesize_case_study(&SynthParams::default()).unwrap();
    let net = &inputs.network;
    assert_eq!(net.num_nodes(), 4);
    assert_eq!(net.zones(), ["A", "B", "C"]);
    let limits: Vec<f64> = net.lines().iter().map(|l| l.f_max).collect();
    assert_eq!(limits, vec![500.0, 3000.0, 3000.0, 3000.0]);
    assert!(net.lines().iter().all(|l| l.susceptance == 1.0));
    let hours: f64 = inputs.weights.as_ref().unwrap().iter().sum();
    assert!((hours - 8760.0).abs() < 1e-9);
}

#[test]
fn synthetic_seed_changes_only_the_noise() {
    let a = synthesize_case_study(&SynthParams::default()).unwrap();
    let b = synthesize_case_study(&SynthParams::default()).unwrap();
    assert_eq!(a, b);
    let c = synthesize_case_study(&SynthParams {
        seed: 7,
        ..SynthParams::default()
    })
    .unwrap();
    assert_eq!(a.profiles.demand, c.profiles.demand);
    assert_ne!(a.profiles.availability, c.profiles.availability);
}

#[test]
fn synthesize_serialize_load_round_trip() {
    let inputs = synthesize_case_study(&SynthParams::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    inputs.save(dir.path()).unwrap();
    let profiles = load_profiles(dir.path()).unwrap();
    assert_eq!(profiles, inputs.profiles);
    assert_eq!(CaseInputs::load(dir.path()).unwrap(), inputs);
}

#[test]
fn calibrated_blocks() {
    let profiles = ProfileSet {
        zones: vec!["Z".into()],
        steps: 1,
        demand: vec![vec![10_000.0]],
        availability: Vec::new(),
        renewable_capacity: Vec::new(),
    };
    let blocks = calibrate_demand(&profiles, 0.2, 20_000.0).unwrap();
    let b = &blocks[0];
    assert_eq!(b.elastic_share * b.ref_demand[0], 2000.0);
    assert_eq!(b.elastic_demand(10_000.0, 20_000.0), 0.0);
    assert_eq!(b.elastic_demand(10_000.0, 0.0), 2000.0);
    assert!((b.elastic_demand(10_000.0, 4000.0) - 0.2 * 10_000.0 * 0.8).abs() < 1e-9);
    assert!(calibrate_demand(&profiles, 1.0, 20_000.0).is_err());
}

#[test]
fn representative_day_annualizes() {
    let grid = TimeGrid::representative_day();
    assert_eq!(grid.len(), 24);
    assert!(grid.weights().iter().all(|&w| w == 365.0));
    assert_eq!(grid.total_hours(), 8760.0);
    let inputs = synthesize_case_study(&SynthParams::default()).unwrap();
    let case = inputs.to_case(0.2, 20_000.0, Some(grid.weights())).unwrap();
    assert_eq!(case.grid.total_hours(), 8760.0);
}

#[test]
fn scenario_file_round_trip_and_validation() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ScenarioConfig::for_design(MarketDesign::EomCap, DataSource::Synthetic(SynthParams::default()));
    assert_eq!(cfg.price_cap, 4000.0);
    let path = dir.path().join("scenario.json");
    cfg.save(&path).unwrap();
    assert_eq!(ScenarioConfig::load(&path).unwrap(), cfg);

    fs::write(&path, r#"{"design": "EOM-cap", "price_cap": 30000, "data": {"synthetic": {}}}"#).unwrap();
    assert!(matches!(ScenarioConfig::load(&path), Err(Error::InvalidParameter(_))));

    fs::write(&path, r#"{"design": "CM-NoCBP", "price_cap": 4000, "data": {"directory": "case"}}"#).unwrap();
    let cfg = ScenarioConfig::load(&path).unwrap();
    assert_eq!(cfg.data, DataSource::Directory(dir.path().join("case")));
    assert_eq!(cfg.admm, crate::equilibrium::AdmmConfig::default());
}

#[test]
fn ntc_and_implicit_need_the_flow_based_run() {
    let case = synthesize_case_study(&SynthParams::default())
        .unwrap()
        .to_case(0.2, 20_000.0, None)
        .unwrap();
    for design in [MarketDesign::CmNtc, MarketDesign::CmImplicit] {
        let err = build_design_setup(&case, design, 4000.0, &ScarcityRule::default(), 0.0, None).unwrap_err();
        assert!(matches!(err, Error::MissingPrerequisite(_)), "{err}");
    }
    let setup = build_design_setup(&case, MarketDesign::CmFbmc, 4000.0, &ScarcityRule::default(), 0.0, None).unwrap();
    match setup.capacity.unwrap().coupling {
        CapacityCoupling::FlowBased { scenarios } => assert_eq!(scenarios.len(), 4),
        other => panic!("unexpected coupling {other:?}"),
    }
}
