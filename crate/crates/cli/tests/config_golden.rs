//! Golden dump of the parsed fixture config: defaults filled in,
//! paths resolved, every key accounted for. Machine-specific path
//! prefixes are normalized before comparison. Set GOLDEN_REGEN=1 to
//! rewrite.

use std::fs;
use std::path::PathBuf;

use demorecon_core::config::load_config;

fn workspace_root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../..")
        .canonicalize()
        .unwrap()
}

fn normalize(value: &mut serde_json::Value, fixtures_prefix: &str) {
    match value {
        serde_json::Value::String(s) => {
            if let Some(rest) = s.strip_prefix(fixtures_prefix) {
                *s = format!("$FIXTURES{rest}");
            }
        }
        serde_json::Value::Array(items) => {
            for item in items {
                normalize(item, fixtures_prefix);
            }
        }
        serde_json::Value::Object(map) => {
            for item in map.values_mut() {
                normalize(item, fixtures_prefix);
            }
        }
        _ => {}
    }
}

#[test]
fn fixture_config_parses_to_its_golden_dump() {
    let fixtures = workspace_root().join("fixtures");
    let config = load_config(&fixtures.join("config.toml")).unwrap();
    let mut dump = config.as_json();
    normalize(&mut dump, &fixtures.to_string_lossy());
    let pretty = format!("{}\n", serde_json::to_string_pretty(&dump).unwrap());

    let golden_path = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/golden/fixture_config.json");
    if std::env::var_os("GOLDEN_REGEN").is_some() {
        fs::create_dir_all(golden_path.parent().unwrap()).unwrap();
        fs::write(&golden_path, &pretty).unwrap();
        panic!("golden regenerated; rerun without GOLDEN_REGEN");
    }
    let golden = fs::read_to_string(&golden_path).unwrap();
    assert_eq!(pretty, golden, "parsed fixture config drifted");
}
