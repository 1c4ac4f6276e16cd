use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn data(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("data").join(rel)
}

fn run(bin: &str, args: &[&str]) -> Output {
    let out = Command::new(bin)
        .args(args)
        .env_remove("FIBERCTL_SEED")
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{bin} {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap()
}

#[test]
fn twin_run_writes_artifacts_and_coverage_agrees() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = data("scenarios/strip_ablation_swingback.toml");
    let out_dir = dir.path().to_str().unwrap();
    let summary = json(&run(
        env!("CARGO_BIN_EXE_twin"),
        &["run", "--scenario", scenario.to_str().unwrap(), "--out", out_dir],
    ));
    for name in ["telemetry.jsonl", "summary.json", "scene.json", "plan.json"] {
        assert!(dir.path().join(name).is_file(), "{name} missing");
    }
    let on_disk: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary, on_disk);

    let log = dir.path().join("telemetry.jsonl");
    let cov = json(&run(env!("CARGO_BIN_EXE_twin"), &["coverage", "--log", log.to_str().unwrap()]));
    let a = cov["coverage"].as_f64().unwrap();
    let b = summary["coverage"].as_f64().unwrap();
    assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    assert_eq!(cov["ticks"], summary["ticks"]);
}

#[test]
fn twin_seed_flag_reaches_the_summary() {
    let scenario = data("scenarios/empty.toml");
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().to_str().unwrap();
    let s = json(&run(
        env!("CARGO_BIN_EXE_twin"),
        &["run", "--scenario", scenario.to_str().unwrap(), "--out", out_dir, "--seed", "41"],
    ));
    assert_eq!(s["seed"], 41);
    assert_eq!(s["ticks"], 0);
}

#[test]
fn twin_replay_echoes_the_log() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("telemetry.jsonl");
    let line = r#"{"t":0.05,"tip":[0.0,0.0,10.0],"plane_point":[0.0,0.0],"bend":[0.0,0.0],"powers":[0.0,0.0,0.0],"peak_temperature":22.0,"laser_on":false,"mode":"INSERTED","scan_pass_index":0}"#;
    std::fs::write(&log, format!("{line}\n{line}\n")).unwrap();
    let out = run(env!("CARGO_BIN_EXE_twin"), &["replay", "--log", log.to_str().unwrap(), "--speed", "0"]);
    assert_eq!(String::from_utf8(out.stdout).unwrap(), format!("{line}\n{line}\n"));
}

#[test]
fn twin_plan_emits_waypoints() {
    let dir = tempfile::tempdir().unwrap();
    let scene = dir.path().join("scene.toml");
    std::fs::write(
        &scene,
        "target_plane_z_mm = 62.0\nlesion = { kind = \"disc\", center_mm = [1.0, -0.5], radius_mm = 1.5 }\n",
    )
    .unwrap();
    let plan = json(&run(env!("CARGO_BIN_EXE_twin"), &["plan", "--scene", scene.to_str().unwrap()]));
    let steps = plan["steps"].as_array().unwrap();
    assert!(steps.iter().any(|s| s["phase"] == "ON_SCAN"), "{plan}");
}

#[test]
fn calib_fits_bundled_sets() {
    let csv = data("characterization/thermal_power.csv");
    let dir = tempfile::tempdir().unwrap();
    let svg = dir.path().join("fit.svg");
    let out = json(&run(
        env!("CARGO_BIN_EXE_calib"),
        &["fit", "--csv", csv.to_str().unwrap(), "--kind", "thermal", "--svg", svg.to_str().unwrap()],
    ));
    let alpha = out["report"]["fitted_value"].as_f64().unwrap();
    assert!((alpha - 2.4375).abs() < 1e-3, "{alpha}");
    assert!(std::fs::read_to_string(&svg).unwrap().starts_with("<svg"));

    let csv = data("characterization/tendon_pull.csv");
    let out = json(&run(env!("CARGO_BIN_EXE_calib"), &["fit", "--csv", csv.to_str().unwrap(), "--kind", "tendon"]));
    let d = out["report"]["fitted_value"].as_f64().unwrap();
    assert!((d - 2.2).abs() < 0.05, "{d}");
}

#[test]
fn calib_tracks_a_png() {
    let dir = tempfile::tempdir().unwrap();
    let png = dir.path().join("dot.png");
    fiberctl::calibration::synthetic_disc_frame(64, 48, (20.25, 30.5), 5.0).save(&png).unwrap();
    let out = json(&run(env!("CARGO_BIN_EXE_calib"), &["track", "--image", png.to_str().unwrap()]));
    assert_eq!(out["found"], true);
    let (x, y) = (out["centroid"]["x"].as_f64().unwrap(), out["centroid"]["y"].as_f64().unwrap());
    assert!((x - 20.25).abs() < 0.1 && (y - 30.5).abs() < 0.1, "{x} {y}");
}

#[test]
fn teleop_table_matches_fixture() {
    let out = run(env!("CARGO_BIN_EXE_teleop"), &["table"]);
    let printed: Value = serde_json::from_slice(&out.stdout).unwrap();
    let fixture: Value =
        serde_json::from_str(&std::fs::read_to_string(data("protocol/mode_table.json")).unwrap()).unwrap();
    assert_eq!(printed, fixture);
}
