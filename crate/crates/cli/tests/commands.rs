use std::path::Path;
use std::process::Command;

use netprobe::WeightedGraph;
use netprobe_cli::experiment::{execute, sweep, SweepParam};
use netprobe_cli::Scenario;

const SMALL: &str = r#"
name = "small"
[graph]
n = 8
p = 0.4
seed = 5
[agents]
kind = "lti"
a_range = [1.0, 10.0]
seed = 6
[algorithm]
kappa = 1e-2
seed = 7
"#;

fn netprobe(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_netprobe")).args(args).output().unwrap()
}

fn read(dir: &Path, name: &str) -> String {
    std::fs::read_to_string(dir.join(name)).unwrap()
}

#[test]
fn run_writes_artifacts_that_reproduce_the_estimate() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = dir.path().join("small.toml");
    std::fs::write(&scenario, SMALL).unwrap();
    let out = dir.path().join("out");
    let o = netprobe(&["run", "--scenario", scenario.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    for f in [
        "scenario.toml",
        "graph_true.csv",
        "graph_est.csv",
        "adjacency_true.csv",
        "adjacency_est.csv",
        "connection_matrix.csv",
        "edge_errors.csv",
        "probes.csv",
        "probes.json",
        "metrics.json",
        "status.json",
    ] {
        assert!(out.join(f).exists(), "missing {f}");
    }
    let est = WeightedGraph::read_edge_csv(8, &out.join("graph_est.csv")).unwrap();
    let direct = execute(&Scenario::from_toml(SMALL).unwrap()).unwrap();
    assert_eq!(est, direct.result.graph);
    let status: serde_json::Value = serde_json::from_str(&read(&out, "status.json")).unwrap();
    assert_eq!(status["status"], "exact");
    let probes = read(&out, "probes.csv");
    assert!(probes.starts_with("probe_index,dw_1,"));
    assert_eq!(probes.lines().count(), 1 + 8);
}

#[test]
fn reruns_produce_identical_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = dir.path().join("small.toml");
    std::fs::write(&scenario, SMALL).unwrap();
    let strip = |text: String| {
        let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
        v.as_object_mut().unwrap().remove("runtime_sec");
        v
    };
    let mut seen = Vec::new();
    for k in 0..2 {
        let out = dir.path().join(format!("run{k}"));
        let o = netprobe(&["run", "--scenario", scenario.to_str().unwrap(), "--out", out.to_str().unwrap()]);
        assert!(o.status.success());
        seen.push((strip(read(&out, "metrics.json")), read(&out, "connection_matrix.csv")));
    }
    assert_eq!(seen[0], seen[1]);
}

#[test]
fn mismatched_reconstruction_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = dir.path().join("coarse.toml");
    // a threshold above every weight hides all edges
    std::fs::write(&scenario, format!("{SMALL}epsilon = 100.0\n")).unwrap();
    let o = netprobe(&["run", "--scenario", scenario.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn invalid_scenario_exits_with_one_and_names_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = dir.path().join("bad.toml");
    std::fs::write(&scenario, SMALL.replace("p = 0.4", "p = 1.5")).unwrap();
    let o = netprobe(&["run", "--scenario", scenario.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("graph.p"));
}

#[test]
fn single_value_sweep_matches_a_run() {
    let s = Scenario::from_toml(SMALL).unwrap();
    let rows = sweep(&s, SweepParam::Kappa, &[1e-2]).unwrap();
    let run = execute(&s).unwrap();
    assert_eq!(rows[0].precision, run.metrics.precision);
    assert_eq!(rows[0].max_rel_err, run.metrics.max_rel_err);
    assert_eq!(rows[0].status, "exact");
}

#[test]
fn sweep_command_writes_a_table() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = dir.path().join("small.toml");
    std::fs::write(&scenario, SMALL).unwrap();
    let out = dir.path().join("sweep");
    let o = netprobe(&[
        "sweep",
        "--scenario",
        scenario.to_str().unwrap(),
        "--param",
        "kappa",
        "--values",
        "1e-1,1e-2",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let table = read(&out, "sweep.csv");
    let mut lines = table.lines();
    assert_eq!(lines.next().unwrap(), "kappa,precision,recall,max_abs_err,max_rel_err,status");
    assert_eq!(lines.count(), 2);
}

#[test]
fn seed_override_changes_the_network() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = dir.path().join("small.toml");
    std::fs::write(&scenario, SMALL).unwrap();
    let graph_for = |seed: &str| {
        let out = dir.path().join(format!("seed{seed}"));
        let o = netprobe(&["run", "--scenario", scenario.to_str().unwrap(), "--seed", seed, "--out", out.to_str().unwrap()]);
        assert!(o.status.code().is_some_and(|c| c != 1));
        read(&out, "graph_true.csv")
    };
    assert_eq!(graph_for("11"), graph_for("11"));
    assert_ne!(graph_for("11"), graph_for("12"));
}

#[test]
fn probe_nodes_report_a_rank() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = dir.path().join("small.toml");
    std::fs::write(&scenario, SMALL).unwrap();
    let out = dir.path().join("rank");
    let o = netprobe(&[
        "run",
        "--scenario",
        scenario.to_str().unwrap(),
        "--probe-nodes",
        "0,1,2",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success());
    let status: serde_json::Value = serde_json::from_str(&read(&out, "status.json")).unwrap();
    assert_eq!(status["rank"]["rank"], 3);
}

#[test]
fn verify_passes() {
    let o = netprobe(&["verify"]);
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(o.status.success(), "{text}");
    assert_eq!(text.lines().filter(|l| l.starts_with("[PASS]")).count(), 4);
}
