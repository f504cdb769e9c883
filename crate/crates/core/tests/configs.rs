use std::path::PathBuf;

use sgiformer::config::RunConfig;

fn configs_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

#[test]
fn reference_config_matches_defaults() {
    let cfg = RunConfig::load(&configs_dir().join("default.toml")).unwrap();
    assert_eq!(cfg, RunConfig::default());
}

#[test]
fn every_shipped_config_loads() {
    let mut files = vec![];
    for dir in [configs_dir(), configs_dir().join("ablations")] {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.extension().is_some_and(|e| e == "toml") {
                files.push(path);
            }
        }
    }
    assert!(files.len() >= 7);
    for path in files {
        RunConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    }
}

#[test]
fn ablations_keep_the_query_budget() {
    let base = RunConfig::default();
    for name in ["learnable-only", "scene-only", "no-geo", "vanilla-decoder"] {
        let cfg = RunConfig::load(&configs_dir().join(format!("ablations/{name}.toml"))).unwrap();
        assert_eq!(cfg.model.num_queries(), base.model.num_queries(), "{name}");
        assert_ne!(cfg.model_hash(), base.model_hash(), "{name}");
    }
}
