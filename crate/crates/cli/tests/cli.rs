use std::path::Path;
use std::process::{Command, Output};

use rngd::data::{read_run_log, synth_msl, write_msl_csv};

fn rngd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rngd"))
        .args(args)
        .env_remove(rngd_cli::THREADS_ENV)
        .output()
        .expect("start rngd")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn unknown_algorithm_is_a_usage_error() {
    let out = rngd(&["run", "--algo", "adam", "--synthetic", "n=6,N=10,p=2"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("rngd, rsgd"));
}

#[test]
fn bad_flags_and_thread_settings_exit_2() {
    assert_eq!(rngd(&["run", "--bogus"]).status.code(), Some(2));
    assert_eq!(rngd(&["--threads", "0", "verify", "--suite", "geometry"]).status.code(), Some(2));
    let out = Command::new(env!("CARGO_BIN_EXE_rngd"))
        .args(["verify", "--suite", "geometry"])
        .env(rngd_cli::THREADS_ENV, "many")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(rngd(&["verify", "--suite", "nope"]).status.code(), Some(2));
    assert_eq!(rngd(&["run", "--dataset", "/does/not/exist.csv"]).status.code(), Some(2));
}

#[test]
fn noiseless_synthetic_run_writes_fifty_records() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("run.csv");
    let out = rngd(&[
        "run", "--problem", "lrmc", "--algo", "rngd", "--synthetic", "n=60,N=200,p=4", "--epochs", "50", "--seed",
        "7", "--out", s(&log),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let log = read_run_log(&log).unwrap();
    assert_eq!(log.records.len(), 50);
    assert!(log.records.last().unwrap().train < 1e-8);
    assert_eq!(log.metadata["config.epochs"], "50");
    assert_eq!(log.metadata["seed"], "7");
    assert!(log.metadata.contains_key("split_checksum"));
    assert!(log.metadata["version"].starts_with("rngd "));
}

#[test]
fn flags_override_set_which_overrides_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.cfg");
    std::fs::write(&cfg, "# shared settings\nsynthetic = n=12,N=30,p=2\nepochs = 9\nalgo = rsgd\nstep = 0.2\n").unwrap();
    let log = dir.path().join("run.csv");
    let out = rngd(&[
        "run", "--config", s(&cfg), "--set", "epochs=4", "--set", "step=0.05", "--epochs", "3", "--out", s(&log),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let log = read_run_log(&log).unwrap();
    assert_eq!(log.records.len(), 3);
    assert_eq!(log.metadata["config.algo"], "rsgd");
    assert_eq!(log.metadata["config.step"], "0.05");
    std::fs::write(&cfg, "no_such_key = 1\n").unwrap();
    assert_eq!(rngd(&["run", "--config", s(&cfg)]).status.code(), Some(2));
}

#[test]
fn subspace_run_on_a_task_file() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("tasks.csv");
    write_msl_csv(&synth_msl(10, 6, 12, 15, 0.01, 3).unwrap().tasks, &data).unwrap();
    let log = dir.path().join("run.csv");
    let out = rngd(&[
        "run", "--problem", "subspace", "--algo", "rngd", "--dataset", s(&data), "--p", "6", "--epochs", "5",
        "--out", s(&log),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let log = read_run_log(&log).unwrap();
    assert_eq!(log.records.len(), 5);
    assert!(log.records.iter().all(|r| r.test.is_some_and(f64::is_finite)));
    assert_eq!(log.metadata["config.p"], "6");
}

#[test]
fn fixed_step_and_deterministic_modes_run() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("fixed.csv");
    let out = rngd(&[
        "run", "--synthetic", "n=20,N=40,p=2,obs=0.6", "--fixed-step", "0.05", "--epochs", "3", "--out", s(&log),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(read_run_log(&log).unwrap().metadata["config.fixed_step"], "0.05");

    let log = dir.path().join("det.csv");
    let out = rngd(&[
        "run", "--problem", "nnbn", "--algo", "det-rngd", "--synthetic", "n=8,N=6,m=512", "--epochs", "30", "--out",
        s(&log),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let recs = read_run_log(&log).unwrap().records;
    assert!(recs.last().unwrap().train < 1e-12 * recs[0].train.max(1.0) || recs.len() == 30);
    assert!(recs.last().unwrap().train < recs[0].train);

    let out = rngd(&["run", "--problem", "lrmc", "--algo", "det-rngd", "--synthetic", "n=8,N=6,p=2"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn compare_merges_traces_on_a_shared_split() {
    let dir = tempfile::tempdir().unwrap();
    let merged = dir.path().join("cmp.csv");
    let out = rngd(&[
        "compare", "--algos", "rngd,rsgd", "--problem", "lrmc", "--synthetic", "n=30,N=60,p=3,obs=0.5,snr=20",
        "--epochs", "30", "--set", "grad_batch=10", "--set", "batch=10", "--out", s(&merged),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&merged).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "epoch,rngd_train,rngd_test,rsgd_train,rsgd_test");
    assert_eq!(lines.len(), 31);
    for (k, line) in lines[1..].iter().enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        assert_eq!(fields.len(), 5);
        assert_eq!(fields[0], (k + 1).to_string());
        assert!(fields[1..].iter().all(|f| f.parse::<f64>().is_ok()));
    }
    let a = read_run_log(&rngd_cli::experiment::sibling(&merged, "rngd")).unwrap();
    let b = read_run_log(&rngd_cli::experiment::sibling(&merged, "rsgd")).unwrap();
    assert_eq!(a.metadata["split_checksum"], b.metadata["split_checksum"]);
    assert_eq!(a.metadata["config.algo"], "rngd");
    assert_eq!(b.metadata["config.algo"], "rsgd");
}

#[test]
fn compare_rejects_single_and_mismatched_configurations() {
    let dir = tempfile::tempdir().unwrap();
    let merged = dir.path().join("cmp.csv");
    let one = dir.path().join("one.cfg");
    std::fs::write(&one, "synthetic = n=10,N=20,p=2\n").unwrap();
    assert_eq!(rngd(&["compare", "--config", s(&one), "--out", s(&merged)]).status.code(), Some(2));
    assert_eq!(rngd(&["compare", "--algos", "rngd", "--config", s(&one), "--out", s(&merged)]).status.code(), Some(2));

    let other = dir.path().join("other.cfg");
    std::fs::write(&other, "problem = subspace\nsynthetic = n=10,p=2\nname = msl\n").unwrap();
    let out = rngd(&["compare", "--config", s(&one), "--config", s(&other), "--out", s(&merged)]);
    assert_eq!(out.status.code(), Some(2));

    let reseeded = dir.path().join("reseeded.cfg");
    std::fs::write(&reseeded, "synthetic = n=10,N=20,p=2\nseed = 9\nname = again\n").unwrap();
    let out = rngd(&["compare", "--config", s(&one), "--config", s(&reseeded), "--out", s(&merged)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("split"));
    assert!(!merged.exists());
}

#[test]
fn verify_geometry_passes_and_reports_csv() {
    let out = rngd(&["verify", "--suite", "geometry", "--seed", "2"]);
    assert!(out.status.success());
    let csv = String::from_utf8(out.stdout).unwrap();
    assert!(csv.starts_with(rngd::verify::REPORT_COLUMNS));
    assert!(csv.lines().skip(1).all(|l| l.starts_with("geometry,2,pass,")));
}
