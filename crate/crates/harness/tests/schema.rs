use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde_json::Value;
use svt_core::{presets, ModelConfig, SpmConfig, Window};
use svt_harness::ablate::{SweepPoint, SweepSpec};
use svt_harness::train::Optimizer;
use svt_harness::ExperimentConfig;

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn load(name: &str) -> Value {
    serde_json::from_str(&std::fs::read_to_string(configs().join(name)).unwrap()).unwrap()
}

fn schema_keys(schema: &Value, def: &str) -> BTreeSet<String> {
    schema["$defs"][def]["properties"].as_object().unwrap().keys().cloned().collect()
}

fn keys(v: &Value) -> BTreeSet<String> {
    v.as_object().unwrap().keys().cloned().collect()
}

/// Serialize with every optional field populated so the key set is complete.
fn full_experiment() -> ExperimentConfig {
    let mut e = ExperimentConfig::load(&configs().join("smoke.json")).unwrap();
    e.train.grad_clip = Some(1.0);
    e
}

#[test]
fn schema_properties_match_serialized_configs() {
    let schema = load("experiment.schema.json");
    let exp = serde_json::to_value(full_experiment()).unwrap();
    assert_eq!(keys(&schema["properties"]), keys(&exp));
    assert_eq!(schema_keys(&schema, "data"), keys(&exp["data"]));
    assert_eq!(schema_keys(&schema, "train"), keys(&exp["train"]));
    assert_eq!(schema_keys(&schema, "vit"), keys(&exp["model"]));
    let spm = &exp["model"]["spm_schedule"][0];
    assert_eq!(schema_keys(&schema, "schedule_entry"), keys(spm));
    let mut full_spm = SpmConfig::elitism(2, 0.5, Window::Global, 1);
    full_spm.neighbor_groups = Some(2);
    assert_eq!(schema_keys(&schema, "spm"), keys(&serde_json::to_value(full_spm).unwrap()));

    let mut mvit = presets::mvit_tiny_semantic();
    mvit.semantic_attention_period = Some(4);
    let mvit = serde_json::to_value(ModelConfig::Mvit(mvit)).unwrap();
    assert_eq!(schema_keys(&schema, "mvit"), keys(&mvit));
    assert_eq!(schema_keys(&schema, "stage"), keys(&mvit["stages"][0]));
    assert_eq!(schema_keys(&schema, "stem"), keys(&mvit["stem"]));

    let options = &schema["$defs"]["optimizer"]["oneOf"];
    for (i, opt) in [
        Optimizer::Sgd {
            momentum: 0.9,
            weight_decay: 0.0,
        },
        Optimizer::Adamw {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        },
    ]
    .into_iter()
    .enumerate()
    {
        let props = keys(&options[i]["properties"]);
        assert_eq!(props, keys(&serde_json::to_value(opt).unwrap()));
    }
}

#[test]
fn sweep_schema_matches_sweep_points() {
    let schema = load("sweep.schema.json");
    let spec = SweepSpec::load(&configs().join("smoke-ablate.json")).unwrap();
    let mut v = serde_json::to_value(&spec).unwrap();
    v["layer"] = Value::from(1);
    assert_eq!(keys(&schema["properties"]), keys(&v));
    let point = SweepPoint {
        name: "p".into(),
        threshold: Some(0.5),
        window: Some(Window::Global),
        variant: Some(Default::default()),
        neighbor_groups: Some(2),
        prototypes: Some(4),
        keep_top: Some(0),
    };
    assert_eq!(schema_keys(&schema, "point"), keys(&serde_json::to_value(point).unwrap()));
}

#[test]
fn shipped_experiments_load_and_round_trip() {
    let mut seen = 0;
    for entry in std::fs::read_dir(configs()).unwrap() {
        let path = entry.unwrap().path();
        let name = path.file_name().unwrap().to_string_lossy().into_owned();
        if name.ends_with(".schema.json") || !name.ends_with(".json") {
            continue;
        }
        if load(&name).get("points").is_some() {
            SweepSpec::load(&path).unwrap();
        } else {
            let e = ExperimentConfig::load(&path).unwrap();
            assert_eq!(ExperimentConfig::from_json(&e.to_json()).unwrap(), e, "{name}");
        }
        seen += 1;
    }
    assert!(seen >= 4);
}
