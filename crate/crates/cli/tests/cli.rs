use std::path::PathBuf;
use std::process::{Command, Output};

fn legged(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_legged")).args(args).output().expect("binary runs")
}

fn scenario(name: &str) -> String {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../scenarios")
        .join(format!("{name}.json"))
        .display()
        .to_string()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn missing_scenario_names_the_path() {
    let o = legged(&["run", "--scenario", "/no/such/scenario.json"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("/no/such/scenario.json"), "{}", stderr(&o));
}

#[test]
fn malformed_scenario_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, r#"{"name":"bad","gait":"trot","segments":[],"duration":1}"#).unwrap();
    let o = legged(&["run", "--scenario", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn short_stand_writes_log_and_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("log.csv");
    let json = dir.path().join("metrics.json");
    let o = legged(&[
        "run",
        "--scenario",
        &scenario("stand"),
        "--duration",
        "0.1",
        "--out",
        csv.to_str().unwrap(),
        "--metrics",
        json.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    // 0.1 s at dt 5e-4 logged every 10th step
    let rows = std::fs::read_to_string(&csv).unwrap().lines().count() - 1;
    assert_eq!(rows, 20);
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(report["outcome"]["kind"], "completed");
    assert_eq!(report["scenario"], "stand");
    assert!(report["metrics"]["mean_height_error"].is_number());
}

#[test]
fn metrics_go_to_stdout_without_a_path() {
    let o = legged(&["run", "--scenario", &scenario("stand"), "--duration", "0.05"]);
    assert_eq!(o.status.code(), Some(0));
    let report: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert!(report["metrics"].is_object());
}

#[test]
fn fall_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("shove.json");
    std::fs::write(
        &path,
        r#"{"name":"shove","gait":"stand","segments":[{"t_start":0,"v_cmd":[0,0]}],"duration":2,
           "sim":{"pushes":[{"t_start":0.2,"duration":0.3,"force":[0,400,0]}]}}"#,
    )
    .unwrap();
    let o = legged(&["run", "--scenario", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn gaits_lists_at_least_six() {
    let o = legged(&["gaits"]);
    assert_eq!(o.status.code(), Some(0));
    let names: Vec<String> = stdout(&o).lines().filter_map(|l| l.split_whitespace().next().map(String::from)).collect();
    assert!(names.len() >= 6, "{names:?}");
    for g in ["trot", "pace", "bound", "pronk", "gallop"] {
        assert!(names.iter().any(|n| n == g), "{g} missing");
    }
}

#[test]
fn single_gait_lookup() {
    let o = legged(&["gaits", "--name", "trot"]);
    assert_eq!(o.status.code(), Some(0));
    let out = stdout(&o);
    assert_eq!(out.lines().count(), 1);
    assert!(out.contains("offsets=(0,0.5,0.5,0)"), "{out}");
}

#[test]
fn unknown_gait_fails() {
    let o = legged(&["gaits", "--name", "moonwalk"]);
    assert_ne!(o.status.code(), Some(0));
    assert!(stderr(&o).contains("moonwalk"));
}

#[test]
fn empty_sweep_values_exit_one() {
    let stand = scenario("stand");
    for extra in [&["--values"][..], &["--values", ""][..]] {
        let mut args = vec!["sweep", "--scenario", stand.as_str(), "--param", "cmd.vx"];
        args.extend_from_slice(extra);
        let o = legged(&args);
        assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    }
}

#[test]
fn sweep_without_param_needs_a_sweep_block() {
    let o = legged(&["sweep", "--scenario", &scenario("stand"), "--values", "0.1"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn sweep_table_and_json() {
    let dir = tempfile::tempdir().unwrap();
    let stand = dir.path().join("stand.json");
    std::fs::write(
        &stand,
        r#"{"name":"s","gait":"trot","segments":[{"t_start":0,"v_cmd":[0,0],"body_height":0.29}],"duration":0.5}"#,
    )
    .unwrap();
    let out = dir.path().join("sweep.json");
    let args = [
        "sweep",
        "--scenario",
        stand.to_str().unwrap(),
        "--param",
        "cmd.vx",
        "--values",
        "0.0,0.2",
        "--out",
        out.to_str().unwrap(),
    ];
    let a = legged(&args);
    assert_eq!(a.status.code(), Some(0), "{}", stderr(&a));
    assert!(stdout(&a).contains("max stable cmd.vx"));
    let rows: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(rows.as_array().unwrap().len(), 2);
    let b = legged(&args);
    assert_eq!(stdout(&a), stdout(&b));
}
