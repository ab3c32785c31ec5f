use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use operon_dbtl::design::DesignCatalog;
use operon_dbtl_cli::parse_design_list;

const CHEAP: &str = r#"{
  "version": 1,
  "seed": 3,
  "search": {"k": 3, "fit": {"n_starts": 1, "max_evals": 120}},
  "loop": {"n0": 2, "budget": 2}
}"#;

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_operon-dbtl"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap())
        .filter(|e| e.file_type().unwrap().is_file())
        .map(|e| (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap()))
        .collect()
}

fn cheap_config(dir: &Path) -> String {
    let path = dir.join("cheap.json");
    fs::write(&path, CHEAP).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn design_lists_split_on_key_boundaries() {
    let cat = DesignCatalog::default();
    let ds = parse_design_list("P0|g1,g2,g3|R0,R0,R0,P1|g3,g2,g1|R2,R1,R0", &cat).unwrap();
    let keys: Vec<String> = ds.iter().map(|d| d.key()).collect();
    assert_eq!(keys, ["P0|g1,g2,g3|R0,R0,R0", "P1|g3,g2,g1|R2,R1,R0"]);
    assert_eq!(parse_design_list("", &cat).unwrap_err().exit_code(), 2);
    assert_eq!(parse_design_list("P9|g1,g2,g3|R0,R0,R0", &cat).unwrap_err().exit_code(), 2);
}

#[test]
fn generate_all_writes_every_design_reproducibly() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for d in [&a, &b] {
        let o = bin(&["generate", "--all", "--seed", "5", "--out", p(d)]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    let sa = snapshot(&a);
    assert_eq!(sa.keys().filter(|k| k.ends_with(".csv")).count(), 324);
    assert!(sa.contains_key("manifest.json"));
    assert_eq!(sa.len(), 325);
    assert_eq!(sa, snapshot(&b));
}

#[test]
fn generate_single_design() {
    let tmp = tempfile::tempdir().unwrap();
    let o = bin(&["generate", "--designs", "P0|g1,g2,g3|R0,R0,R0", "--out", p(tmp.path())]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let s = snapshot(tmp.path());
    assert_eq!(s.keys().filter(|k| k.ends_with(".csv")).count(), 1);
    assert!(s.contains_key("P0_g1-g2-g3_R0-R0-R0.csv"));
}

#[test]
fn configuration_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    let o = bin(&["generate", "--designs", "P7|g1,g2,g3|R0,R0,R0", "--out", p(&out)]);
    assert_eq!(code(&o), 2);
    let bad = tmp.path().join("bad.json");
    fs::write(&bad, r#"{"version": 1, "loop": {"threshold": -1}}"#).unwrap();
    let o = bin(&["generate", "--all", "--config", p(&bad), "--out", p(&out)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("loop.threshold"), "{}", stderr(&o));
    let o = bin(&["generate", "--out", p(&out)]);
    assert_eq!(code(&o), 2);
    let o = bin(&["generate", "--all", "--config", p(&tmp.path().join("missing.json"))]);
    assert_eq!(code(&o), 2);
}

#[test]
fn induce_without_dataset_writes_nothing() {
    let tmp = tempfile::tempdir().unwrap();
    let o = bin(&["induce", "--out", p(tmp.path())]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(snapshot(tmp.path()).is_empty());
}

#[test]
fn induce_refuses_mismatched_config() {
    let tmp = tempfile::tempdir().unwrap();
    let o = bin(&["generate", "--designs", "P1|g2,g1,g3|R0,R1,R2", "--out", p(tmp.path())]);
    assert_eq!(code(&o), 0);
    let other = tmp.path().join("other.json");
    fs::write(&other, r#"{"version": 1, "params": {"k_tx": 3.0}}"#).unwrap();
    let o = bin(&["induce", "--config", p(&other), "--out", p(tmp.path())]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("params"), "{}", stderr(&o));
    assert!(!tmp.path().join("search_report.json").exists());
}

#[test]
fn induce_and_report_are_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = cheap_config(tmp.path());
    let mut snaps = Vec::new();
    for name in ["a", "b"] {
        let d = tmp.path().join(name);
        let keys = "P0|g1,g2,g3|R0,R1,R2,P1|g3,g1,g2|R2,R0,R1";
        assert_eq!(code(&bin(&["generate", "--config", &cfg, "--designs", keys, "--out", p(&d)])), 0);
        let o = bin(&["induce", "--config", &cfg, "--out", p(&d)]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        assert_eq!(code(&bin(&["report", "--out", p(&d)])), 0);
        let first = fs::read(d.join("report.md")).unwrap();
        assert_eq!(code(&bin(&["report", "--out", p(&d)])), 0);
        assert_eq!(fs::read(d.join("report.md")).unwrap(), first);
        let mut s = snapshot(&d);
        s.remove("search_timing.json").expect("timing sidecar");
        snaps.push(s);
    }
    assert_eq!(snaps[0], snaps[1]);
    let summary = String::from_utf8(snaps[0]["summary.txt"].clone()).unwrap();
    assert!(summary.contains("rank 1"));
    let md = String::from_utf8(snaps[0]["report.md"].clone()).unwrap();
    assert!(md.contains("## Induction") && md.contains("- recovered: "));
}

#[test]
fn report_over_generate_only_dir() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(code(&bin(&["generate", "--designs", "P0|g1,g2,g3|R0,R0,R0", "--out", p(tmp.path())])), 0);
    assert_eq!(code(&bin(&["report", "--out", p(tmp.path())])), 0);
    let md = fs::read_to_string(tmp.path().join("report.md")).unwrap();
    assert!(md.contains("## Dataset"));
    assert!(!md.contains("## Induction") && !md.contains("## Loop") && !md.contains("recovered"));
}

#[test]
fn report_lists_missing_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let o = bin(&["report", "--out", p(tmp.path())]);
    assert_eq!(code(&o), 3);
    let err = stderr(&o);
    assert!(err.contains("manifest.json") && err.contains("search_report.json") && err.contains("run_state.json"));
}

#[test]
fn loop_with_zero_budget() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("b0.json");
    fs::write(&cfg, CHEAP.replace("\"budget\": 2", "\"budget\": 0")).unwrap();
    let o = bin(&["loop", "--config", p(&cfg), "--out", p(tmp.path())]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let history = fs::read_to_string(tmp.path().join("history.csv")).unwrap();
    assert_eq!(history.lines().count(), 1);
    let state: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("run_state.json")).unwrap()).unwrap();
    assert_eq!(state["stopped"], "budget_exhausted");
    assert_eq!(state["seed_designs"].as_array().unwrap().len(), 2);
}

#[test]
fn loop_resume_matches_uninterrupted() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = cheap_config(tmp.path());
    for baseline in [None, Some("random")] {
        let whole = tmp.path().join(format!("whole-{baseline:?}"));
        let part = tmp.path().join(format!("part-{baseline:?}"));
        let mut args = vec!["loop", "--config", &cfg];
        if let Some(b) = baseline {
            args.extend(["--baseline", b]);
        }
        let o = bin(&[&args[..], &["--out", p(&whole)]].concat());
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let o = bin(&[&args[..], &["--out", p(&part), "--max-rounds", "1"]].concat());
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        assert_eq!(fs::read_to_string(part.join("history.csv")).unwrap().lines().count(), 2);
        let checkpoint = part.join("run_state.json");
        let o = bin(&["loop", "--resume", p(&checkpoint)]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        assert_eq!(snapshot(&whole), snapshot(&part), "{baseline:?}");
    }
}

#[test]
fn corrupt_or_foreign_checkpoints_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = cheap_config(tmp.path());
    let bad = tmp.path().join("bad.json");
    fs::write(&bad, "{\"format_version\": 1, ").unwrap();
    let o = bin(&["loop", "--config", &cfg, "--resume", p(&bad), "--out", p(tmp.path())]);
    assert_eq!(code(&o), 3);
    fs::write(&bad, "{\"format_version\": 42}").unwrap();
    let o = bin(&["loop", "--config", &cfg, "--resume", p(&bad), "--out", p(tmp.path())]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("42"), "{}", stderr(&o));

    let run = tmp.path().join("run");
    let b0 = tmp.path().join("b0.json");
    fs::write(&b0, CHEAP.replace("\"budget\": 2", "\"budget\": 0")).unwrap();
    assert_eq!(code(&bin(&["loop", "--config", p(&b0), "--out", p(&run)])), 0);
    let o = bin(&["loop", "--config", &cfg, "--resume", p(&run.join("run_state.json"))]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn held_lock_is_a_runtime_failure() {
    let tmp = tempfile::tempdir().unwrap();
    let lock = tmp.path().join(".operon-dbtl.lock");
    fs::write(&lock, "").unwrap();
    let o = bin(&["generate", "--designs", "P0|g1,g2,g3|R0,R0,R0", "--out", p(tmp.path())]);
    assert_eq!(code(&o), 4);
    assert!(!tmp.path().join("manifest.json").exists());
    fs::remove_file(&lock).unwrap();
    assert_eq!(code(&bin(&["generate", "--designs", "P0|g1,g2,g3|R0,R0,R0", "--out", p(tmp.path())])), 0);
    assert!(!lock.exists());
}
