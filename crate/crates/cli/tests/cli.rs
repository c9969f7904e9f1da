use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn rtsrk(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rtsrk")).args(args).output().expect("binary runs")
}

fn run_ok(args: &[&str]) {
    let out = rtsrk(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// All output files except the manifest, whose wall time differs between runs.
fn outputs(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap() != "manifest.json")
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

const SMALL_CHEMISTRY: [&str; 6] = ["--set", "t_final=10", "--set", "members=8", "--set", "record_every=5"];

#[test]
fn euler_on_linear_decay_halves_each_step() {
    let dir = tempfile::tempdir().unwrap();
    run_ok(&["run", "integrate", "--out", path(dir.path())]);
    let csv = fs::read_to_string(dir.path().join("trajectory.csv")).unwrap();
    let ys: Vec<f64> = csv.lines().skip(1).map(|l| l.rsplit(',').next().unwrap().parse().unwrap()).collect();
    assert_eq!(ys, [1.0, 0.5, 0.25]);
}

#[test]
fn reruns_are_byte_identical_and_thread_independent() {
    let dirs: Vec<_> = (0..3).map(|_| tempfile::tempdir().unwrap()).collect();
    for (dir, threads) in dirs.iter().zip(["1", "1", "4"]) {
        let mut args = vec!["run", "chemistry", "--seed", "5", "--threads", threads, "--out", path(dir.path())];
        args.extend(SMALL_CHEMISTRY);
        run_ok(&args);
    }
    let first = outputs(dirs[0].path());
    assert!(first.len() >= 3);
    assert_eq!(first, outputs(dirs[1].path()));
    assert_eq!(first, outputs(dirs[2].path()));
}

#[test]
fn seeds_change_random_outputs() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for (dir, seed) in [(&a, "1"), (&b, "2")] {
        let mut args = vec!["run", "chemistry", "--seed", seed, "--out", path(dir.path())];
        args.extend(SMALL_CHEMISTRY);
        run_ok(&args);
    }
    assert_ne!(outputs(a.path()), outputs(b.path()));
}

#[test]
fn replay_reproduces_a_run() {
    let first = tempfile::tempdir().unwrap();
    let mut args = vec!["run", "chemistry", "--seed", "9", "--threads", "2", "--out", path(first.path())];
    args.extend(SMALL_CHEMISTRY);
    run_ok(&args);
    let manifest = first.path().join("manifest.json");
    let text = fs::read_to_string(&manifest).unwrap();
    assert!(text.contains("\"seed\": 9"));
    assert!(text.contains("members = 8"));

    let second = tempfile::tempdir().unwrap();
    run_ok(&["replay", path(&manifest), "--out", path(second.path())]);
    assert_eq!(outputs(first.path()), outputs(second.path()));
}

#[test]
fn unknown_key_is_rejected_by_name() {
    let dir = tempfile::tempdir().unwrap();
    let out = rtsrk(&["run", "integrate", "--set", "stepsize=0.1", "--out", path(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("stepsize"));
    assert!(!dir.path().join("manifest.json").exists());
}

#[test]
fn invalid_value_is_rejected_before_running() {
    let dir = tempfile::tempdir().unwrap();
    let out = rtsrk(&["run", "table-ms", "--set", "stepper=rk9", "--out", path(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    let out = rtsrk(&["run", "mc-mse", "--set", "dist.p=-1", "--out", path(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("dist.p"));
    assert!(fs::read_dir(dir.path()).unwrap().next().is_none());
}

#[test]
fn user_config_file_replaces_default() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    fs::write(
        &cfg,
        "experiment = \"integrate\"\nstepper = \"rk4\"\nscheme = \"det\"\nsteps = 4\n\
         [problem]\nname = \"pendulum\"\n[dist]\nh = 0.1\n",
    )
    .unwrap();
    let out = dir.path().join("out");
    run_ok(&["run", "integrate", "--config", path(&cfg), "--out", path(&out)]);
    let csv = fs::read_to_string(out.join("trajectory.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "k,t_nominal,t_realized,y0,y1");
    assert_eq!(csv.lines().count(), 6);
}

#[test]
fn strict_mode_fails_on_flagged_points() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["run", "table-weak", "--set", "m=2000", "--set", "levels=3", "--out", path(dir.path())];
    run_ok(&args);
    let mut strict = args.to_vec();
    strict.push("--strict");
    let out = rtsrk(&strict);
    assert_eq!(out.status.code(), Some(3));
    assert!(dir.path().join("table.csv").exists());
}

#[test]
fn list_and_show_config() {
    let out = rtsrk(&["list"]);
    assert!(out.status.success());
    assert_eq!(String::from_utf8_lossy(&out.stdout).lines().count(), 11);
    let out = rtsrk(&["show-config", "mc-mse"]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("r = 32"));
    assert_eq!(rtsrk(&["show-config", "nope"]).status.code(), Some(2));
}
