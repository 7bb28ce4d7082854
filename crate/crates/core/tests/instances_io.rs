mod common;

use common::power;
use dpme_core::instances::{
    compute_de_size, count_de_size, deserialize_instance, digest, draw_scenario_data, generate_power_instance,
    read_instance, serialize_instance, write_instance, InstanceError, MixtureNormalization, PowerConfig,
};
use dpme_core::model::validate_instance;
use nalgebra::DVector;

#[test]
fn default_dimensions() {
    let cfg = PowerConfig::default();
    assert_eq!((cfg.n1(), cfg.n2()), (10, 40));
    let inst = power(0, 2);
    assert_eq!(inst.first_stage.n(), 10);
    assert!(inst.scenarios.iter().all(|s| s.n2() == 40 && s.n1() == 10));
}

#[test]
fn size_formula_matches_enumerated_rows() {
    let cfg = PowerConfig::default();
    let one = compute_de_size(&cfg, 1);
    assert_eq!((one.rows, one.cols), (115, 50));
    for s in [1usize, 3, 7] {
        let inst = power(2, s);
        assert_eq!(count_de_size(&inst.first_stage, &inst.scenarios), compute_de_size(&cfg, s as u64));
    }
}

#[test]
fn published_dimensions() {
    let cfg = PowerConfig::default();
    let published = [
        (1_000u64, 93_022u64, 40_010u64),
        (5_000, 465_022, 200_010),
        (10_000, 930_022, 400_010),
        (30_000, 2_790_022, 1_200_010),
        (80_000, 7_440_022, 3_200_010),
        (120_000, 11_160_022, 4_800_010),
        (500_000, 46_500_022, 20_000_010),
    ];
    for (s, rows, cols) in published {
        let d = compute_de_size(&cfg, s);
        assert_eq!((d.rows, d.cols), (rows, cols), "S = {s}");
    }
}

#[test]
fn sampled_data_respects_truncation() {
    let data = draw_scenario_data(&PowerConfig::default(), 10_000);
    for d in &data {
        assert!(d.q.iter().all(|v| (2.0..=4.0).contains(v)));
        assert!(d.pi.iter().all(|v| (3.0..=5.0).contains(v)));
        assert!(d.d.iter().all(|v| (2.0..=5.0).contains(v)));
    }
}

#[test]
fn mixture_normalizations_sum_to_one() {
    let cfg = PowerConfig::default();
    let data = draw_scenario_data(&cfg, 50);
    for g in 0..cfg.n_mix {
        let total: f64 = data.iter().map(|d| d.p[g]).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }
    let cfg = PowerConfig { normalization: MixtureNormalization::PerScenario, ..cfg };
    for d in draw_scenario_data(&cfg, 20) {
        assert!((d.p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn budget_sits_between_the_cost_extremes() {
    // with the weights on a simplex, the cheapest and dearest plans are
    // all capacities at one end of the box plus the single extreme weight
    let cfg = PowerConfig { seed: 12, budget_fraction: 0.4, ..PowerConfig::default() };
    let fs = generate_power_instance(&cfg, 1).unwrap().first_stage;
    let caps = &fs.cost.as_slice()[..cfg.n_plants];
    let weights = &fs.cost.as_slice()[cfg.n_plants..];
    let min_w = weights.iter().cloned().fold(f64::INFINITY, f64::min);
    let max_w = weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lo = caps.iter().sum::<f64>() * cfg.capacity_box.0 + min_w;
    let hi = caps.iter().sum::<f64>() * cfg.capacity_box.1 + max_w;
    let expected = lo + 0.4 * (hi - lo);
    assert!((fs.b_ineq[0] - expected).abs() < 1e-7, "{} vs {expected}", fs.b_ineq[0]);
}

#[test]
fn budget_fraction_out_of_range_is_rejected() {
    let zero = PowerConfig { budget_fraction: 0.0, ..PowerConfig::default() };
    assert!(matches!(generate_power_instance(&zero, 3), Err(InstanceError::InfeasibleBudget { .. })));
    let over = PowerConfig { budget_fraction: 1.5, ..PowerConfig::default() };
    assert!(matches!(generate_power_instance(&over, 3), Err(InstanceError::InvalidConfig(_))));
}

#[test]
fn generation_is_deterministic() {
    let a = serialize_instance(&power(7, 20)).unwrap();
    let b = serialize_instance(&power(7, 20)).unwrap();
    assert_eq!(a, b);
    let c = serialize_instance(&power(8, 20)).unwrap();
    assert_ne!(digest(&a), digest(&c));
}

#[test]
fn round_trip_preserves_digest_and_data() {
    let inst = power(3, 12);
    let bytes = serialize_instance(&inst).unwrap();
    let back = deserialize_instance(&bytes).unwrap();
    assert_eq!(back, inst);
    assert_eq!(digest(&serialize_instance(&back).unwrap()), digest(&bytes));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("inst.json");
    write_instance(&inst, &path).unwrap();
    assert_eq!(read_instance(&path).unwrap(), inst);
    assert!(!dir.path().join("inst.json.partial").exists());
}

#[test]
fn missing_block_is_named() {
    let bytes = serialize_instance(&power(3, 2)).unwrap();
    let mut doc: serde_json::Value = serde_json::from_slice(&bytes).unwrap();
    doc.as_object_mut().unwrap().remove("scenarios");
    let err = deserialize_instance(&serde_json::to_vec(&doc).unwrap()).unwrap_err();
    assert!(err.to_string().contains("scenarios"), "{err}");
}

#[test]
fn unknown_schema_version_is_rejected() {
    let bytes = serialize_instance(&power(3, 2)).unwrap();
    let mut doc: serde_json::Value = serde_json::from_slice(&bytes).unwrap();
    doc["schema_version"] = serde_json::json!(99);
    let err = deserialize_instance(&serde_json::to_vec(&doc).unwrap()).unwrap_err();
    assert!(matches!(err, InstanceError::SchemaVersion { found: 99, .. }));
}

#[test]
fn generated_instances_have_complete_recourse() {
    let inst = power(5, 10);
    let rep = validate_instance(&inst.first_stage, &inst.scenarios, 20, 1).unwrap();
    assert!(rep.ok(), "{:?}", rep.failures.first());
    assert!(rep.kappa1.is_finite() && rep.kappa2.is_finite());
}

#[test]
fn excess_demand_fails_the_probes() {
    let mut inst = power(5, 4);
    inst.scenarios[2].eq_rhs = DVector::from_element(8, 10.0);
    let rep = validate_instance(&inst.first_stage, &inst.scenarios, 5, 1).unwrap();
    assert!(!rep.ok());
    assert!(rep.failures.iter().all(|f| f.scenario == inst.scenarios[2].id));
}

#[test]
fn contradictory_budget_empties_x() {
    let mut inst = power(5, 2);
    inst.first_stage.b_ineq[0] = 0.0;
    let rep = validate_instance(&inst.first_stage, &inst.scenarios, 2, 1).unwrap();
    assert!(!rep.x_nonempty);
    assert!(!rep.ok());
}
