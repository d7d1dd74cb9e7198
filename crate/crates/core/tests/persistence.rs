mod common;

use haulcast_core::config::ToolkitConfig;
use haulcast_core::iohmm::IohmmModel;
use haulcast_core::persist::VehicleModel;
use haulcast_core::pipeline::{evaluate_vehicle, fit_vehicle};
use haulcast_core::synth::{fixture_grid, fixture_spec, sample_fleet};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn model_json_round_trips_bitwise(seed in any::<u64>(), h in 1usize..=4, l in 2usize..=5) {
        let model = common::random_model(&mut ChaCha8Rng::seed_from_u64(seed), h, l, 11);
        let back: IohmmModel = serde_json::from_str(&serde_json::to_string(&model).unwrap()).unwrap();
        prop_assert_eq!(back, model);
    }

    #[test]
    fn config_toml_round_trips(seed in any::<u64>(), alpha in 0.01f64..10.0, frac in 0.05f64..0.95, l2 in 0.0f64..1.0) {
        let cfg = ToolkitConfig { seed, mc_alpha: alpha, train_frac: frac, em_l2: l2, ..ToolkitConfig::default() };
        prop_assert_eq!(ToolkitConfig::from_toml_str(&cfg.to_toml_string()).unwrap(), cfg);
    }
}

fn quick_config() -> ToolkitConfig {
    let mut cfg = ToolkitConfig {
        k_candidates: vec![3],
        em_max_iter: 30,
        em_screen_restarts: 0,
        seed: 4,
        ..ToolkitConfig::default()
    };
    cfg.set_grid(&fixture_grid());
    cfg
}

#[test]
fn saved_models_reload_and_score_identically() {
    let fleet = sample_fleet(&fixture_spec(1, 20, 2)).unwrap();
    let v = &fleet.vehicles[0];
    let cfg = quick_config();
    let model = fit_vehicle(&v.vehicle_id, v.records.clone(), &fixture_grid(), &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.json");
    model.save(&path).unwrap();
    let loaded = VehicleModel::load(&path).unwrap();
    assert_eq!(loaded, model);
    assert_eq!(
        evaluate_vehicle(&loaded, &v.records).unwrap(),
        evaluate_vehicle(&model, &v.records).unwrap()
    );
    // a second fit is byte-identical
    model.save(&path).unwrap();
    let again = fit_vehicle(&v.vehicle_id, v.records.clone(), &fixture_grid(), &cfg).unwrap();
    assert_eq!(
        again.to_json(),
        std::fs::read_to_string(&path).unwrap().trim_end()
    );
}

#[test]
fn unsupported_versions_are_rejected() {
    let fleet = sample_fleet(&fixture_spec(1, 12, 3)).unwrap();
    let v = &fleet.vehicles[0];
    let model = fit_vehicle(
        &v.vehicle_id,
        v.records.clone(),
        &fixture_grid(),
        &quick_config(),
    )
    .unwrap();
    let text = model
        .to_json()
        .replacen("\"format_version\": 1", "\"format_version\": 99", 1);
    assert!(VehicleModel::from_json(&text).is_err());
}

#[test]
fn models_depend_on_the_run_seed() {
    let fleet = sample_fleet(&fixture_spec(1, 15, 7)).unwrap();
    let v = &fleet.vehicles[0];
    let a = fit_vehicle(
        &v.vehicle_id,
        v.records.clone(),
        &fixture_grid(),
        &quick_config(),
    )
    .unwrap();
    let cfg = ToolkitConfig {
        seed: 5,
        ..quick_config()
    };
    let b = fit_vehicle(&v.vehicle_id, v.records.clone(), &fixture_grid(), &cfg).unwrap();
    assert_ne!(a.vehicle_seed, b.vehicle_seed);
}
