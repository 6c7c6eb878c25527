// SPDX-License-Identifier: Apache-2.0
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn upathlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_upathlab")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn fingerprinted(dir: &Path) {
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.extension().is_some_and(|x| x == "json") {
            let v = json(&p);
            assert!(v["schema"].as_str().unwrap().starts_with("upathlab/"), "{}", p.display());
            assert_eq!(v["fingerprint"]["bound"], 64, "{}", p.display());
            assert!(v["fingerprint"]["design_hash"].is_string(), "{}", p.display());
        }
    }
}

#[test]
fn synth_upaths_writes_paths_and_decisions() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = upathlab(&["synth-upaths", "--design", "zskip-mul", "--instr", "MUL", "--out", out]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).starts_with("MUL: 2 upaths\n"), "{}", stdout(&o));
    let rep = json(&dir.path().join("upaths-MUL.json"));
    assert_eq!(rep["schema"], "upathlab/upath-report/v1");
    assert_eq!(rep["data"]["upaths"].as_array().unwrap().len(), 2);
    fingerprinted(dir.path());

    let r = upathlab(&["render", "--from", dir.path().join("decisions-MUL.json").to_str().unwrap(), "--format", "text"]);
    assert!(r.status.success());
    assert!(stdout(&r).lines().any(|l| l.starts_with("MUL scbIss -> ")), "{}", stdout(&r));
    let d = upathlab(&["render", "--from", dir.path().join("upaths-MUL.json").to_str().unwrap()]);
    assert!(d.status.success() && stdout(&d).starts_with("digraph upaths {"));
}

#[test]
fn usage_errors_exit_one() {
    let o = upathlab(&["synth-upaths"]);
    assert_eq!(o.status.code(), Some(1));
    let o = upathlab(&["synth-upaths", "--design", "no-such-design"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"));
    let o = upathlab(&["synth-upaths", "--design", "zskip-mul", "--jobs", "0"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn check_safety_cross_check_passes_and_dumps_witness() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = upathlab(&["check-safety", "--design", "op-pack", "--cross-check", "--out", out]);
    assert_eq!(o.status.code(), Some(0), "{}{}", stdout(&o), String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("cross-check: every violation covered"));
    fingerprinted(dir.path());
    let vs = json(&dir.path().join("violations.json"));
    assert!(!vs["data"].as_array().unwrap().is_empty());

    let w = dir.path().join("witness.trace");
    let r = upathlab(&["render", "--from", w.to_str().unwrap(), "--design", "op-pack", "--format", "text"]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let text = stdout(&r);
    assert!(text.lines().next().unwrap().starts_with("@0"), "{text}");
    assert!(text.contains("ID:1"), "{text}");
    let r = upathlab(&["render", "--from", w.to_str().unwrap(), "--format", "text"]);
    assert_eq!(r.status.code(), Some(1));
}

#[test]
fn contracts_render_as_text_only() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = upathlab(&["derive-contract", "--design", "zskip-mul", "--out", out]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("[CT] 2 rows"), "{}", stdout(&o));
    fingerprinted(dir.path());
    let c = dir.path().join("contracts.json");
    let r = upathlab(&["render", "--from", c.to_str().unwrap(), "--format", "text"]);
    assert!(r.status.success() && stdout(&r).contains("[OISA]"));
    let r = upathlab(&["render", "--from", c.to_str().unwrap(), "--format", "dot"]);
    assert_eq!(r.status.code(), Some(1));
}
