use std::path::{Path, PathBuf};

use procalloc::model::{build_scenario, compose, load_scenario_file, resolve_scenario_ref, ScenarioKind, ScenarioSpec};
use procalloc::rollout::RolloutConfig;
use procalloc::ProcessModel;

fn shipped(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name)
}

#[test]
fn custom_mm1_file_is_the_builtin_queue() {
    let file = load_scenario_file(&shipped("custom-mm1.toml")).unwrap();
    let builtin = ProcessModel::mm1(0.5, 1.0).unwrap();
    assert_eq!(file.fingerprint(), builtin.fingerprint());
    assert_eq!(resolve_scenario_ref("custom-mm1", None).unwrap().fingerprint(), builtin.fingerprint());
}

#[test]
fn explicit_rates_reproduce_the_reference_scenario() {
    let file = load_scenario_file(&shipped("slow-server-explicit.toml")).unwrap();
    let reference = build_scenario(&ScenarioSpec::reference(ScenarioKind::SlowServer)).unwrap();
    assert_eq!(file.layout_hash(), reference.layout_hash());
    for r in 0..reference.num_resources() {
        for a in 0..reference.num_activities() {
            match (file.rate(r, a), reference.rate(r, a)) {
                (Some(x), Some(y)) => assert!((x - y).abs() < 1e-12),
                (x, y) => assert_eq!(x, y),
            }
        }
    }
}

#[test]
fn composition_file_matches_programmatic_composition() {
    let file = load_scenario_file(&shipped("three-stage.toml")).unwrap();
    let stage = build_scenario(&ScenarioSpec::reference(ScenarioKind::LowUtilization)).unwrap();
    let direct = compose(&[stage.clone(), stage.clone(), stage]).unwrap();
    assert_eq!(file.fingerprint(), direct.fingerprint());
    assert_eq!(file.num_activities(), 6);
}

#[test]
fn shipped_trainer_config_is_the_default() {
    let text = std::fs::read_to_string(shipped("trainer.toml")).unwrap();
    let parsed: RolloutConfig = toml::from_str(&text).unwrap();
    assert_eq!(parsed, RolloutConfig::default());
}
