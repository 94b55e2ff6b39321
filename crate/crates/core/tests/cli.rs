use std::fs;
use std::path::PathBuf;
use std::process::{Command, Output};

use xstage::harness::{load_scenario, run_assign, AssignOptions, Report};

fn xstage(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_xstage")).args(args).output().unwrap()
}

fn handoff() -> String {
    let p: PathBuf = [env!("CARGO_MANIFEST_DIR"), "..", "..", "scenarios", "handoff.json"].iter().collect();
    p.to_str().unwrap().to_string()
}

fn report(out: &Output) -> Report {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    Report::from_json(std::str::from_utf8(&out.stdout).unwrap()).unwrap()
}

#[test]
fn assign_handoff_scenario() {
    let r = report(&xstage(&["assign", "--scenario", &handoff()]));
    assert_eq!(r.command, "assign");
    assert_eq!(r.metric("instability"), Some(0.25));
    assert_eq!(r.metric("pos_count[1]"), Some(3.0));
    let own = report(&xstage(&["assign", "--scenario", &handoff(), "--scope", "own_stage"]));
    assert_eq!(own.metric("pos_count[1]"), Some(2.0));
}

#[test]
fn cli_report_matches_library() {
    let path = handoff();
    let from_cli = report(&xstage(&["assign", "--scenario", &path]));
    let from_lib = run_assign(&load_scenario(&path).unwrap(), &AssignOptions::default()).unwrap();
    assert_eq!(from_cli, from_lib);
}

#[test]
fn simulate_replays_through_assign() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = dir.path().join("sim.json");
    let sim_out = dir.path().join("sim_report.json");
    let out = xstage(&[
        "simulate",
        "--seed",
        "4",
        "--num-queries",
        "6",
        "--save-scenario",
        scenario.to_str().unwrap(),
        "--out",
        sim_out.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let sim = Report::from_json(&fs::read_to_string(&sim_out).unwrap()).unwrap();
    let replay = report(&xstage(&["assign", "--scenario", scenario.to_str().unwrap()]));
    assert_eq!(sim.metrics, replay.metrics);
}

#[test]
fn flops_defaults_and_overrides() {
    let r = report(&xstage(&["flops"]));
    assert!((r.metric("flops.ratio").unwrap() - 8.047).abs() < 1e-3);
    assert_eq!(r.metric("params.adapter"), Some(8192.0));
    let r = report(&xstage(&["flops", "--points-in", "64"]));
    assert!((r.metric("flops.ratio").unwrap() - 4.024).abs() < 1e-3);
}

#[test]
fn nms_report() {
    let r = report(&xstage(&["nms", "--scenario", &handoff(), "--iou-threshold", "0.5"]));
    // the two stage-1 boxes on the first object share their top class
    assert_eq!(r.metric("nms.pre[1]"), Some(3.0));
    assert_eq!(r.metric("nms.post[1]"), Some(2.0));
}

#[test]
fn gradcheck_exit_codes() {
    let ok = xstage(&["gradcheck", "--op", "adapt_filter"]);
    assert_eq!(ok.status.code(), Some(0));
    assert!(report(&ok).metric("gradcheck.max").unwrap() < 1e-4);
    let coarse = xstage(&["gradcheck", "--op", "focal_loss_multihot", "--step", "0.3"]);
    assert_eq!(coarse.status.code(), Some(2));
    let unknown = xstage(&["gradcheck", "--op", "nope"]);
    assert_eq!(unknown.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&unknown.stderr).contains("unknown op"));
}

#[test]
fn input_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    let text = fs::read_to_string(handoff()).unwrap().replace("[130, 60, 190, 150]", "[190, 60, 130, 150]");
    fs::write(&bad, text).unwrap();
    let out = xstage(&["assign", "--scenario", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("ground_truths[1].box") && err.contains("line 7"), "{err}");

    assert_eq!(xstage(&["assign"]).status.code(), Some(1));
    assert_eq!(xstage(&["assign", "--scenario", &handoff(), "--scope", "sideways"]).status.code(), Some(1));
    assert_eq!(xstage(&["assign", "--scenario", &handoff(), "--eta", "1.5"]).status.code(), Some(1));
    assert_eq!(xstage(&["simulate", "--groups", "3"]).status.code(), Some(1));
}
