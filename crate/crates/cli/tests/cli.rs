use std::path::Path;
use std::process::{Command, Output};

fn msc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_msc")).args(args).output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SMALL: &str = r#"{
  "name": "small",
  "world": { "robot": "planar_3dof_arm" },
  "chart": [
    { "name": "Move", "kind": "motion",
      "tasks": [ { "type": "joint_goal", "dof": "joint_1", "target": 0.2 } ] },
    { "name": "Near?", "kind": "monitor",
      "monitor": { "type": "feature", "predicate": { "near": { "target": 0.2, "tolerance": 0.01 } },
                   "space": { "feature": "joint", "dof": "joint_1" } } },
    { "name": "Stop", "kind": "end", "start": "Near?" }
  ],
  "config": { "dt": 0.02, "horizon": 7, "timeout": 5.0 }
}"#;

fn write(dir: &Path, name: &str, body: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, body).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn run_bundled_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("peg");
    let o = msc(&["run", "peg_in_hole", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["trajectory.csv", "gantt.json", "report.json", "gantt.svg"] {
        assert!(out.join(f).is_file(), "{f} missing");
    }
    let csv = std::fs::read_to_string(out.join("trajectory.csv")).unwrap();
    assert!(csv.lines().next().unwrap().starts_with("time,"));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["termination"], "End");
}

#[test]
fn overrides_change_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let file = write(dir.path(), "small.json", SMALL);
    let out = dir.path().join("o");
    let o = msc(&["run", &file, "--out", out.to_str().unwrap(), "--dt", "0.01", "--horizon", "9"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["dt"], 0.01);
    assert_eq!(report["horizon"], 9);

    // Too short to converge.
    let o = msc(&["run", &file, "--out", out.to_str().unwrap(), "--timeout", "0.1"]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn malformed_condition_names_the_node() {
    let dir = tempfile::tempdir().unwrap();
    let file = write(dir.path(), "bad.json", &SMALL.replace(r#""start": "Near?""#, r#""start": "Near? and (""#));
    let out = dir.path().join("o");
    for args in [vec!["run", &file, "--out", out.to_str().unwrap()], vec!["validate", &file]] {
        let o = msc(&args);
        assert_eq!(o.status.code(), Some(1), "{args:?}");
        assert!(stderr(&o).contains("Stop"), "{args:?}: {}", stderr(&o));
    }
}

#[test]
fn validate_reports_broken_references() {
    let dir = tempfile::tempdir().unwrap();
    let ok = write(dir.path(), "ok.json", SMALL);
    let o = msc(&["validate", &ok]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("ok"));

    let unknown_node = write(dir.path(), "node.json", &SMALL.replace(r#""start": "Near?""#, r#""start": "Far?""#));
    let o = msc(&["validate", &unknown_node]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("Far?"), "{}", stderr(&o));

    let unknown_dof = write(dir.path(), "dof.json", &SMALL.replace(r#""dof": "joint_1", "target""#, r#""dof": "wrist", "target""#));
    let o = msc(&["validate", &unknown_dof]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("wrist"), "{}", stderr(&o));

    let o = msc(&["validate", "no_such_scenario"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn gantt_svg_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let svg = dir.path().join("g.svg");
    let empty = write(dir.path(), "empty.json", "[]");
    let o = msc(&["gantt-svg", &empty, svg.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let s = std::fs::read_to_string(&svg).unwrap();
    assert!(s.starts_with("<svg") && s.trim_end().ends_with("</svg>"));

    let bad = write(dir.path(), "bad.json", "{ not json");
    let o = msc(&["gantt-svg", &bad, svg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn list_shows_bundled_scenarios() {
    let o = msc(&["list"]);
    assert!(o.status.success());
    let s = String::from_utf8_lossy(&o.stdout);
    for name in ["cutting", "peg_in_hole", "fridge_door", "omni_base_arm"] {
        assert!(s.contains(name), "{name} not listed");
    }
}
