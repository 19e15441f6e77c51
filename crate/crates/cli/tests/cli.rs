use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn dte(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dte")).args(args).output().expect("binary runs")
}

fn small_run(out: &Path) -> Output {
    dte(&[
        "run",
        "--task",
        "maze",
        "--agent",
        "dte",
        "--heads",
        "3",
        "--episodes",
        "40",
        "--seed",
        "3",
        "--serial",
        "--set",
        "learn_every=16",
        "--out",
        out.to_str().unwrap(),
    ])
}

#[test]
fn serial_runs_repeat_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = small_run(out);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let read = |d: &Path| fs::read_to_string(d.join("episodes.csv")).unwrap();
    assert_eq!(read(&a), read(&b));
    assert!(read(&a).starts_with("seed,episode,head,return,niche,ms\n"));
    assert_eq!(read(&a).lines().count(), 41);
    assert!(a.join("config.txt").exists());
}

#[test]
fn report_and_plot_read_a_run() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    assert!(small_run(&run).status.success());

    let o = dte(&["report", "--in", run.to_str().unwrap(), "--window", "10"]);
    assert!(o.status.success());
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("seed 3"), "{text}");

    let svg = dir.path().join("curves.svg");
    let o = dte(&["plot", "--in", run.to_str().unwrap(), "--out", svg.to_str().unwrap(), "--window", "10"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(fs::read_to_string(&svg).unwrap().contains("<svg"));
}

#[test]
fn empty_log_warns_without_failing() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("episodes.csv"), "seed,episode,head,return,niche,ms\n").unwrap();
    let svg = dir.path().join("empty.svg");
    let o = dte(&["plot", "--in", dir.path().to_str().unwrap(), "--out", svg.to_str().unwrap()]);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("warning"));
}

#[test]
fn bad_arguments_fail_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = dte(&["run", "--task", "no_such_task", "--episodes", "1", "--out", out]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("error"));

    let o = dte(&["run", "--set", "epsilon", "--out", out]);
    assert!(!o.status.success());

    let o = dte(&["report", "--in", dir.path().join("missing").to_str().unwrap()]);
    assert!(!o.status.success());
}
