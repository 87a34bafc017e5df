//! Exit-code and artifact contract of the binary.

use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_nlsem"))
}

#[test]
fn malformed_config_exits_2_and_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"scenario": "gheat", "paths": "lots"}"#).unwrap();
    let out = dir.path().join("out");
    let status = bin().arg("run").arg(&cfg).arg("--out").arg(&out).status().unwrap();
    assert_eq!(status.code(), Some(2));
    assert!(!out.exists(), "no artifacts on schema violations");
}

#[test]
fn unknown_scenario_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("odd.json");
    std::fs::write(&cfg, r#"{"scenario": "mystery"}"#).unwrap();
    let status = bin().arg("run").arg(&cfg).status().unwrap();
    assert_eq!(status.code(), Some(2));
}

#[test]
fn list_names_all_registered_scenarios() {
    let output = bin().arg("list").output().unwrap();
    assert!(output.status.success());
    let text = String::from_utf8(output.stdout).unwrap();
    for id in ["gheat", "drift", "interval", "delay", "counterexample", "dpp", "holder", "martingale", "hjb-oracle", "custom"] {
        assert!(text.contains(id), "missing {id} in listing");
    }
}

#[test]
fn describe_unknown_id_exits_2() {
    let status = bin().args(["describe", "nope"]).status().unwrap();
    assert_eq!(status.code(), Some(2));
}

#[test]
fn small_run_writes_results_and_meta() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("ce.json");
    std::fs::write(
        &cfg,
        r#"{"scenario": "counterexample", "grid": {"t0": 0.0, "horizon": 1.0, "n_steps": 100}, "paths": 8, "seed": 5}"#,
    )
    .unwrap();
    let out = dir.path().join("out");
    let status = bin()
        .arg("run")
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .arg("--dump-paths")
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    let results: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("results.json")).unwrap()).unwrap();
    assert_eq!(results["scenario"], "counterexample");
    assert!(results["pass"].as_bool().unwrap());
    let meta: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("run_meta.json")).unwrap()).unwrap();
    assert!(meta["wall_time_ms"].is_u64());
    assert!(out.join("paths.csv").exists());
}

#[test]
fn seed_override_changes_the_config_hash() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("ce.json");
    std::fs::write(
        &cfg,
        r#"{"scenario": "counterexample", "grid": {"t0": 0.0, "horizon": 1.0, "n_steps": 50}, "paths": 4}"#,
    )
    .unwrap();
    let hash_of = |out: &std::path::Path, seed: &str| {
        let status = bin()
            .arg("run")
            .arg(&cfg)
            .arg("--out")
            .arg(out)
            .args(["--seed", seed])
            .status()
            .unwrap();
        assert!(status.success());
        let v: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(out.join("results.json")).unwrap())
                .unwrap();
        v["config_hash"].as_str().unwrap().to_string()
    };
    let h1 = hash_of(&dir.path().join("a"), "1");
    let h2 = hash_of(&dir.path().join("b"), "2");
    assert_ne!(h1, h2);
}
