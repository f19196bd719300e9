use std::path::Path;

use nalgebra::DMatrix;
use retc_cli::{parse_config, CliError};
use retc_core::Variant;

fn parse(text: &str) -> Result<retc_cli::ExperimentConfig, CliError> {
    parse_config(text, Path::new("test.json"))
}

fn violations(text: &str) -> Vec<String> {
    match parse(text) {
        Err(CliError::Validation(v)) => v,
        other => panic!("expected a validation error, got {other:?}"),
    }
}

#[test]
fn two_mass_spring_preset() {
    let cfg = parse(r#"{"schema_version": 1, "plant": {"preset": "two_mass_spring"}}"#).unwrap();
    assert_eq!(cfg.plant.q(), &(DMatrix::identity(4, 4) * 10.0));
    assert_eq!(cfg.plant.r(), &DMatrix::identity(1, 1));
    assert_eq!((cfg.spec.g(), cfg.spec.c(), cfg.spec.b()), (1, 6, 22));
    assert_eq!(cfg.beta0, 5);
    assert_eq!(cfg.period(), 6);
    assert_eq!(cfg.n_bar, 6);
    assert_eq!(cfg.variant, Variant::CyclicHorizon);
    assert_eq!(cfg.steps, 500);
}

#[test]
fn batch_reactor_preset() {
    let cfg = parse(r#"{"schema_version": 1, "plant": {"preset": "batch_reactor"}}"#).unwrap();
    assert_eq!((cfg.spec.g(), cfg.spec.c(), cfg.spec.b()), (3, 8, 22));
    assert_eq!((cfg.plant.n(), cfg.plant.m()), (4, 2));
    assert_eq!(cfg.period(), 3);
}

#[test]
fn capacity_below_cost_is_rejected() {
    let v = violations(
        r#"{"schema_version": 1, "plant": {"preset": "two_mass_spring"},
            "bucket": {"refill": 1, "cost": 6, "capacity": 5}}"#,
    );
    assert!(v.iter().any(|m| m.starts_with("bucket:")), "{v:?}");
}

#[test]
fn empty_horizon_is_rejected() {
    let v = violations(r#"{"schema_version": 1, "plant": {"preset": "two_mass_spring"}, "simulation": {"steps": 0}}"#);
    assert_eq!(v, vec!["simulation.steps: horizon is empty".to_string()]);
}

#[test]
fn all_violations_are_reported() {
    let v = violations(
        r#"{"schema_version": 2, "plant": {"preset": "two_mass_spring"},
            "initial": {"beta0": 40},
            "controller": {"kind": "etc", "n_bar": 3},
            "simulation": {"steps": 0, "convergence_tol": -1.0},
            "etc_search": {"grid_points": 1}}"#,
    );
    for prefix in [
        "schema_version",
        "initial.beta0",
        "controller.sigma_trigger",
        "simulation.steps",
        "simulation.convergence_tol",
        "etc_search.grid_points",
    ] {
        assert!(v.iter().any(|m| m.starts_with(prefix)), "missing {prefix} in {v:?}");
    }
}

#[test]
fn cyclic_variant_needs_a_full_period() {
    let v = violations(r#"{"schema_version": 1, "plant": {"preset": "two_mass_spring"}, "controller": {"n_bar": 4}}"#);
    assert!(v[0].starts_with("controller.n_bar"), "{v:?}");
    parse(
        r#"{"schema_version": 1, "plant": {"preset": "two_mass_spring"},
            "controller": {"n_bar": 4, "variant": "periodic_terminal"}}"#,
    )
    .unwrap();
}

#[test]
fn unknown_key_reports_position() {
    let text = "{\n  \"schema_version\": 1,\n  \"plant\": {\"preset\": \"two_mass_spring\"},\n  \"horizon\": 3\n}";
    match parse(text) {
        Err(CliError::Parse { line, message, .. }) => {
            assert_eq!(line, 4);
            assert!(message.contains("horizon"), "{message}");
        }
        other => panic!("expected a parse error, got {other:?}"),
    }
    let nested = r#"{"schema_version": 1, "plant": {"preset": "two_mass_spring", "c": 3}}"#;
    assert!(matches!(parse(nested), Err(CliError::Parse { line: 1, .. })));
}

#[test]
fn malformed_json_is_a_parse_error() {
    let err = parse(r#"{"schema_version": 1, "plant": "#).unwrap_err();
    assert!(matches!(err, CliError::Parse { .. }));
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn explicit_plant() {
    let cfg = parse(
        r#"{"schema_version": 1,
            "plant": {"a": [[1.0, 0.1], [0.0, 1.0]], "b": [[0.0], [0.1]],
                      "state_box": {"lower": [-1, -1], "upper": [1, 1]}},
            "bucket": {"refill": 1, "cost": 2, "capacity": 4},
            "initial": {"x0": [0.5, 0.0]}}"#,
    )
    .unwrap();
    assert_eq!(cfg.plant_name, "custom");
    assert_eq!(cfg.plant.q(), &DMatrix::identity(2, 2));
    assert_eq!(cfg.beta0, 4);
    assert_eq!(cfg.u0.len(), 1);
    assert!(cfg.plant.state_box().is_some());
}

#[test]
fn explicit_plant_violations() {
    let v = violations(
        r#"{"schema_version": 1,
            "plant": {"a": [[1.0, 0.1], [0.0]], "b": [[0.0], [0.1]]}}"#,
    );
    assert!(v.iter().any(|m| m.starts_with("plant.a")), "{v:?}");
    assert!(v.iter().any(|m| m.starts_with("bucket")), "{v:?}");
    let v = violations(
        r#"{"schema_version": 1,
            "plant": {"a": [[1.0, 0.1], [0.0, 1.0]], "b": [[0.0], [0.1], [0.2]]},
            "bucket": {"refill": 1, "cost": 2, "capacity": 4},
            "initial": {"x0": [0.5, 0.0]}}"#,
    );
    assert!(v.iter().any(|m| m.contains("B has 3 rows")), "{v:?}");
    let v = violations(r#"{"schema_version": 1, "plant": {"preset": "two_mass_spring", "a": [[1.0]]}}"#);
    assert!(v[0].contains("not both"), "{v:?}");
    let v = violations(r#"{"schema_version": 1, "plant": {"preset": "pendulum"}}"#);
    assert!(v[0].contains("unknown preset"), "{v:?}");
}

#[test]
fn shipped_configs_are_valid() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut count = 0;
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "json") {
            retc_cli::load_config(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            count += 1;
        }
    }
    assert!(count >= 5);
}
