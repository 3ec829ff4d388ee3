use std::fs;
use std::process::{Command, Output};

fn protonet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_protonet"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

#[test]
fn tick_on_the_default_tree_reports_seven_ok_lines() {
    let o = protonet(&["tick"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert_eq!(text.lines().count(), 7);
    assert!(text.lines().all(|l| l.starts_with("OK ") && l.contains("state=CONNECTED")));
}

#[test]
fn tick_reports_unreachable_nodes_and_fails() {
    let o = protonet(&["--timeout-ms", "300", "tick", "--suspend", "v2"]);
    assert!(!o.status.success());
    let text = stdout(&o);
    // v2 and its two children sit behind the suspended router
    assert_eq!(text.lines().filter(|l| l.starts_with("UNREACHABLE")).count(), 3);
    assert_eq!(text.lines().filter(|l| l.starts_with("OK")).count(), 4);
    assert!(String::from_utf8_lossy(&o.stderr).contains("3 of 7 nodes unreachable"));
}

#[test]
fn bench_writes_four_rows_with_speedup() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("results.csv");
    let o = protonet(&[
        "bench", "--model", "all", "--fmi", "1000,2000,1000", "--items", "10", "--repeats", "1", "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(&out).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("model,fmi1,fmi2,fmi3,items,repeats,median_ms,speedup"));
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 4);
    let models: Vec<&str> = rows.iter().map(|r| r[0]).collect();
    assert_eq!(models, ["MONOTONE", "SEQUENCE", "PIPELINE", "SUPER_PIPELINE"]);
    // with tiny stages the messaging overhead dominates
    assert!(rows.iter().any(|r| r[7].parse::<f64>().unwrap() < 1.0));
}

#[test]
fn bench_sweep_json() {
    let o = protonet(&[
        "bench", "--sweep", "--model", "monotone,super", "--items", "2", "--repeats", "1", "--format", "json",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let rows = rows.as_array().unwrap();
    assert_eq!(rows.len(), 8);
    let fmi1: Vec<u64> = rows.iter().map(|r| r["fmi1"].as_u64().unwrap()).collect();
    assert_eq!(fmi1, [1_000_000, 1_000_000, 100_000, 100_000, 10_000, 10_000, 1_000, 1_000]);
    assert!(rows.iter().all(|r| r["fmi2"].as_u64() == r["fmi1"].as_u64().map(|n| 2 * n)));
    assert!(rows.iter().all(|r| r["repeat_ms"].as_array().unwrap().len() == 1));
}

#[test]
fn same_seed_same_dump() {
    let a = protonet(&["topo", "--nodes", "30", "--seed", "9", "--format", "json"]);
    let b = protonet(&["topo", "--nodes", "30", "--seed", "9", "--format", "json"]);
    let c = protonet(&["topo", "--nodes", "30", "--seed", "10", "--format", "json"]);
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);
    assert_ne!(a.stdout, c.stdout);
    let r1 = protonet(&["registry", "--nodes", "30", "--seed", "9", "--format", "json"]);
    let r2 = protonet(&["registry", "--nodes", "30", "--seed", "9", "--format", "json"]);
    assert_eq!(r1.stdout, r2.stdout);
}

#[test]
fn registry_from_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("net.json");
    fs::write(
        &cfg,
        r#"[
          {"id": "root", "role": "MASTER", "parent": null, "services": []},
          {"id": "hub", "role": "ROUTER", "parent": "root"},
          {"id": "a", "role": "SERVER", "parent": "hub", "services": [{"name": "Resize", "fmi": 10}]},
          {"id": "b", "role": "SERVER", "parent": "root", "services": [{"name": "Resize", "fmi": 10}, {"name": "Crop"}]}
        ]"#,
    )
    .unwrap();
    let o = protonet(&["registry", "--config", cfg.to_str().unwrap(), "--format", "json"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let nodes: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let by_id = |id: &str| nodes.as_array().unwrap().iter().find(|n| n["id"] == id).unwrap().clone();
    let root = by_id("root");
    assert_eq!(root["role"], "MASTER");
    assert_eq!(root["services"].as_array().unwrap().len(), 3);
    let hub = by_id("hub");
    let hub_services = hub["services"].as_array().unwrap();
    assert_eq!(hub_services.len(), 1);
    assert_eq!(hub_services[0]["name"], "Resize");
    assert_eq!(hub_services[0]["route"].as_array().unwrap().len(), 2);
    assert_eq!(hub_services[0]["mode"], "FUNCTION");

    let topo = protonet(&["topo", "--config", cfg.to_str().unwrap()]);
    assert_eq!(stdout(&topo).lines().count(), 4);
}

#[test]
fn bad_inputs_fail_with_diagnostics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, r#"[{"id": "x", "role": "SERVER", "parent": "nowhere"}]"#).unwrap();
    let o = protonet(&["topo", "--config", cfg.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("nowhere"));

    fs::write(&cfg, "{ not json").unwrap();
    assert!(!protonet(&["registry", "--config", cfg.to_str().unwrap()]).status.success());

    assert!(!protonet(&["bench", "--fmi", "1,2"]).status.success());
    assert!(!protonet(&["bench", "--model", "turbo", "--items", "1"]).status.success());
    assert!(!protonet(&["topo", "--no-such-flag"]).status.success());
}

#[test]
fn demo_runs_every_model() {
    let o = protonet(&["demo", "--fmi", "10,20,10"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    let headers: Vec<&str> = text.lines().filter(|l| l.starts_with("== ")).collect();
    assert_eq!(headers.len(), 4);
    let expected = (0..40).fold(1.0f64, |x, _| x * 1.0000001).to_string();
    assert!(headers.iter().all(|h| h.contains(&format!("-> {expected} "))), "{headers:?}");
    assert!(text.contains("ACK"));
}
