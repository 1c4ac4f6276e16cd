use std::path::{Path, PathBuf};

use fiberctl::calibration::{CharacterizationKind, CharacterizationSet};
use fiberctl::teleop::{ClientMessage, MessageKind, ServerMessage};
use fiberctl::scenario::Scenario;

fn data(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("data").join(rel)
}

#[test]
fn client_examples_cover_every_kind_and_round_trip() {
    let text = std::fs::read_to_string(data("protocol/client_examples.jsonl")).unwrap();
    let mut kinds = Vec::new();
    for line in text.lines() {
        let msg = ClientMessage::parse(line).unwrap();
        let again = ClientMessage::parse(&msg.to_line()).unwrap();
        assert_eq!(msg, again);
        kinds.push(msg.body.kind());
    }
    assert_eq!(kinds, MessageKind::ALL);
}

#[test]
fn server_examples_round_trip() {
    let text = std::fs::read_to_string(data("protocol/server_examples.jsonl")).unwrap();
    for line in text.lines() {
        let msg: ServerMessage = serde_json::from_str(line).unwrap();
        let back: serde_json::Value = serde_json::from_str(&msg.to_line()).unwrap();
        let orig: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(back, orig);
    }
}

#[test]
fn bundled_characterization_sets_round_trip() {
    for (kind, file, levels) in [
        (CharacterizationKind::ThermalPower, "thermal_power.csv", 13),
        (CharacterizationKind::TendonPull, "tendon_pull.csv", 9),
    ] {
        let set = CharacterizationSet::load(kind, data(&format!("characterization/{file}"))).unwrap();
        assert_eq!(set.levels().len(), levels, "{file}");
        assert!(set.rows.iter().any(|r| !r.synthetic), "{file} has no measured row");
        let again = CharacterizationSet::from_csv_str(kind, &set.to_csv_string()).unwrap();
        assert_eq!(again.rows, set.rows);
    }
}

#[test]
fn bundled_scenarios_load() {
    for name in ["empty.toml", "phantom_three_pass.toml", "strip_ablation_swingback.toml"] {
        Scenario::load(data(&format!("scenarios/{name}"))).unwrap_or_else(|e| panic!("{name}: {e}"));
    }
}
