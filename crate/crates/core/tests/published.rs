//! The schema in `docs/` and the configs in `configs/` are generated from the
//! code. Set `EMWATCH_BLESS=1` to rewrite them after a deliberate change.

use std::fs;
use std::path::{Path, PathBuf};

use emwatch::config::{config_schema, ExperimentConfig};
use emwatch::presets;

fn repo() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn check(path: &Path, expected: &str) {
    if std::env::var_os("EMWATCH_BLESS").is_some() {
        fs::create_dir_all(path.parent().unwrap()).unwrap();
        fs::write(path, expected).unwrap();
        return;
    }
    let actual = fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}; run with EMWATCH_BLESS=1", path.display()));
    assert!(actual == expected, "{} is stale; run with EMWATCH_BLESS=1", path.display());
}

#[test]
fn published_schema_matches_the_types() {
    let text = serde_json::to_string_pretty(&config_schema()).unwrap() + "\n";
    check(&repo().join("docs/config.schema.json"), &text);
}

#[test]
fn shipped_configs_match_the_presets() {
    for c in presets::experiments() {
        let path = repo().join("configs").join(format!("{}.json", c.name));
        check(&path, &c.to_json_pretty());
        let back = ExperimentConfig::from_json(&fs::read_to_string(&path).unwrap()).unwrap();
        assert_eq!(back, c);
    }
}
