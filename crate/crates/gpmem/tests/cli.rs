//! End-to-end checks of the command-line binary: workflow round trips,
//! run-to-run determinism of every output artifact, and exit codes.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_gpmem")
}

fn run_in(dir: &Path, args: &[&str]) -> Output {
    Command::new(bin())
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary spawns")
}

fn tempdir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("gpmem-cli-{tag}-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn read(dir: &Path, rel: &str) -> Vec<u8> {
    std::fs::read(dir.join(rel)).unwrap_or_else(|e| panic!("reading {rel}: {e}"))
}

#[test]
fn gen_data_regress_round_trip_is_deterministic() {
    let dir = tempdir("regress");
    let gen = run_in(&dir, &["gen-data", "--generator", "neal", "--n", "40", "--seed", "3", "--out", "d"]);
    assert!(gen.status.success(), "{}", String::from_utf8_lossy(&gen.stderr));

    let args = [
        "regress", "--seed", "7", "--data", "d/gen_neal.csv", "--out", "r",
        "--schedule", "repeat(10, do(mh(hyperhyper,2), mh(hyper,1)))",
    ];
    let first = run_in(&dir, &args);
    assert!(first.status.success(), "{}", String::from_utf8_lossy(&first.stderr));
    let grid1 = read(&dir, "r/regress_grid.csv");
    let paths1 = read(&dir, "r/regress_paths.csv");
    let params1 = read(&dir, "r/regress_params.json");

    // Grid has a header plus 201 rows of finite numbers.
    let grid_text = String::from_utf8(grid1.clone()).unwrap();
    let mut lines = grid_text.lines().skip_while(|l| l.starts_with('#'));
    assert_eq!(lines.next(), Some("x,mean,lo,hi"));
    assert_eq!(lines.clone().count(), 201);
    for line in lines {
        for field in line.split(',') {
            let v: f64 = field.parse().unwrap();
            assert!(v.is_finite());
        }
    }

    let second = run_in(&dir, &args);
    assert!(second.status.success());
    assert_eq!(grid1, read(&dir, "r/regress_grid.csv"), "grid output not deterministic");
    assert_eq!(paths1, read(&dir, "r/regress_paths.csv"), "paths output not deterministic");
    assert_eq!(params1, read(&dir, "r/regress_params.json"), "params output not deterministic");

    // A different seed changes the artifacts.
    let other = run_in(&dir, &[
        "regress", "--seed", "8", "--data", "d/gen_neal.csv", "--out", "r2",
        "--schedule", "repeat(10, do(mh(hyperhyper,2), mh(hyper,1)))",
    ]);
    assert!(other.status.success());
    assert_ne!(params1, read(&dir, "r2/regress_params.json"));
}

#[test]
fn discover_and_query_round_trip() {
    let dir = tempdir("discover");
    let gen = run_in(&dir, &["gen-data", "--generator", "lin-per-wn", "--n", "40", "--seed", "5", "--out", "d"]);
    assert!(gen.status.success());

    let args = ["discover", "--seed", "2", "--data", "d/gen_lin_per_wn.csv", "--steps", "40", "--out", "s"];
    let first = run_in(&dir, &args);
    assert!(first.status.success(), "{}", String::from_utf8_lossy(&first.stderr));
    let samples1 = read(&dir, "s/discover_samples.log");
    let marginals1 = read(&dir, "s/discover_marginals.json");

    let second = run_in(&dir, &args);
    assert!(second.status.success());
    assert_eq!(samples1, read(&dir, "s/discover_samples.log"));
    assert_eq!(marginals1, read(&dir, "s/discover_marginals.json"));

    // Feed the sample log into the query calculus.
    let q = run_in(&dir, &["query", "--samples", "s/discover_samples.log", "--query", "WN OR LIN*WN"]);
    assert!(q.status.success(), "{}", String::from_utf8_lossy(&q.stderr));
    let out: serde_json::Value = serde_json::from_slice(&q.stdout).unwrap();
    let p = out["result"]["probability"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&p));
    assert!(out["result"]["terms"].is_array());
}

#[test]
fn optimize_is_deterministic() {
    let dir = tempdir("optimize");
    let args = ["optimize", "--seed", "11", "--iterations", "5", "--out", "o"];
    let first = run_in(&dir, &args);
    assert!(first.status.success(), "{}", String::from_utf8_lossy(&first.stderr));
    let trace1 = read(&dir, "o/optimize_trace.csv");
    let summary1 = read(&dir, "o/optimize_summary.json");
    let second = run_in(&dir, &args);
    assert!(second.status.success());
    assert_eq!(trace1, read(&dir, "o/optimize_trace.csv"));
    assert_eq!(summary1, read(&dir, "o/optimize_summary.json"));

    let summary: serde_json::Value = serde_json::from_slice(&summary1).unwrap();
    assert_eq!(summary["schema_version"], "1");
    assert!(summary["result"]["best"]["reward"].as_f64().unwrap().is_finite());
}

#[test]
fn config_errors_exit_2() {
    let dir = tempdir("exit2");
    run_in(&dir, &["gen-data", "--generator", "neal", "--n", "10", "--seed", "1", "--out", "d"]);
    // Unparseable schedule text.
    let bad_schedule = run_in(&dir, &[
        "regress", "--seed", "1", "--data", "d/gen_neal.csv", "--out", "r",
        "--schedule", "repeat(oops",
    ]);
    assert_eq!(bad_schedule.status.code(), Some(2), "{}", String::from_utf8_lossy(&bad_schedule.stderr));
    // Unparseable kernel expression.
    let bad_kernel = run_in(&dir, &[
        "regress", "--seed", "1", "--data", "d/gen_neal.csv", "--out", "r", "--kernel", "SE(",
    ]);
    assert_eq!(bad_kernel.status.code(), Some(2));
    // Query over an empty sample set.
    std::fs::write(dir.join("empty.log"), "# rep\tstructure\tlog_lik\ttheta\n").unwrap();
    let empty = run_in(&dir, &["query", "--samples", "empty.log", "--query", "WN"]);
    assert_eq!(empty.status.code(), Some(2));
}

#[test]
fn data_errors_exit_3() {
    let dir = tempdir("exit3");
    let missing = run_in(&dir, &["regress", "--seed", "1", "--data", "nope.csv", "--out", "r"]);
    assert_eq!(missing.status.code(), Some(3), "{}", String::from_utf8_lossy(&missing.stderr));
    std::fs::write(dir.join("bad.csv"), "x,y\n1,huh\n").unwrap();
    let malformed = run_in(&dir, &["discover", "--seed", "1", "--data", "bad.csv", "--out", "s"]);
    assert_eq!(malformed.status.code(), Some(3));
    let stderr = String::from_utf8_lossy(&malformed.stderr);
    assert!(stderr.contains("line 2"), "{stderr}");
}

#[test]
fn failing_external_objective_is_survivable() {
    let dir = tempdir("objective");
    // An objective program that always fails still yields a summary with the
    // aborted iterations recorded.
    let script = dir.join("fail.sh");
    std::fs::write(&script, "#!/bin/sh\nexit 1\n").unwrap();
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        std::fs::set_permissions(&script, std::fs::Permissions::from_mode(0o755)).unwrap();
    }
    let out = run_in(&dir, &[
        "optimize", "--seed", "1", "--iterations", "3", "--out", "o",
        "--objective", &format!("cmd:{}", script.display()),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary: serde_json::Value =
        serde_json::from_slice(&read(&dir, "o/optimize_summary.json")).unwrap();
    assert_eq!(summary["result"]["aborted_iterations"].as_array().unwrap().len(), 3);
}
