use sdze_core::harness::RunConfig;
use sdze_core::{LrSchedule, SdzeError};
use serde_json::{json, Value};

fn base() -> Value {
    json!({
        "steps": 10,
        "pde": { "dim": 8 },
        "net": { "widths": [6] },
        "sdze": {
            "rank": 2,
            "freq_F": 5,
            "eps": 1e-3,
            "lr": { "schedule": "constant", "alpha": 0.01 },
            "batch_points_B": 4,
            "batch_dims_b": 2
        }
    })
}

fn errors(doc: Value) -> Vec<String> {
    match RunConfig::from_value(&doc) {
        Err(SdzeError::Validation(errs)) => errs,
        other => panic!("expected validation errors, got {other:?}"),
    }
}

#[test]
fn defaults_fill_optional_keys() {
    let cfg = RunConfig::from_value(&base()).unwrap();
    assert_eq!(cfg.seed, 0);
    assert_eq!(cfg.pde.kind, "poisson");
    assert_eq!(cfg.pde.solution, "two_body");
    assert_eq!(cfg.net.activation, "sin");
    assert!(cfg.sdze.crns);
    assert!(!cfg.sdze.timing);
    assert_eq!(cfg.sdze.lr, LrSchedule::Constant { alpha: 0.01 });
}

#[test]
fn every_missing_key_is_named() {
    let mut doc = base();
    doc["pde"].as_object_mut().unwrap().remove("dim");
    doc["sdze"].as_object_mut().unwrap().remove("eps");
    doc.as_object_mut().unwrap().remove("steps");
    let errs = errors(doc).join("\n");
    for key in ["pde.dim", "sdze.eps", "steps"] {
        assert!(errs.contains(key), "no mention of `{key}` in:\n{errs}");
    }
}

#[test]
fn unknown_keys_and_wrong_types_are_named() {
    let mut doc = base();
    doc["pde"]["foo"] = json!(1);
    doc["sdze"]["rank"] = json!("four");
    let errs = errors(doc).join("\n");
    assert!(errs.contains("pde.foo"), "{errs}");
    assert!(errs.contains("sdze.rank"), "{errs}");
}

#[test]
fn range_checks() {
    let mut doc = base();
    doc["sdze"]["batch_dims_b"] = json!(9);
    doc["sdze"]["lr"] = json!({ "schedule": "annealed", "gamma": 0.1, "p": 0.4 });
    let errs = errors(doc).join("\n");
    assert!(errs.contains("batch_dims_b"), "{errs}");
    assert!(errs.contains("sdze.lr"), "{errs}");
}

#[test]
fn depth_must_agree_with_widths() {
    let mut doc = base();
    doc["net"]["depth"] = json!(5);
    assert!(errors(doc).join("\n").contains("net.depth"));
}

#[test]
fn echo_round_trips_and_hash_ignores_output_dir() {
    let cfg = RunConfig::from_value(&base()).unwrap();
    let again = RunConfig::from_json_str(&cfg.to_json_pretty()).unwrap();
    assert_eq!(cfg, again);
    assert_eq!(cfg.hash(), again.hash());

    let mut moved = base();
    moved["output_dir"] = json!("/tmp/elsewhere");
    assert_eq!(RunConfig::from_value(&moved).unwrap().hash(), cfg.hash());

    let mut reseeded = base();
    reseeded["seed"] = json!(1);
    assert_ne!(RunConfig::from_value(&reseeded).unwrap().hash(), cfg.hash());
}

#[test]
fn shipped_configs_parse() {
    let root = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for entry in std::fs::read_dir(root).unwrap() {
        let path = entry.unwrap().path();
        RunConfig::from_path(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    }
}
