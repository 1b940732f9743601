use std::process::{Command, Output};

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ergodic-bem")).args(args).output().unwrap()
}

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(bin(&["--help"]).status.code(), Some(0));
    assert_eq!(bin(&["--version"]).status.code(), Some(0));
}

#[test]
fn bad_arguments_exit_one() {
    assert_eq!(bin(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(bin(&["suite", "nonsense"]).status.code(), Some(1));
    assert_eq!(bin(&["clt-table", "--set", "bogus_key=1"]).status.code(), Some(1));
}

#[test]
fn inadmissible_alpha_is_rejected_before_running() {
    let out = bin(&["clt-table", "--set", "alpha=0.5"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("(1, 2]"), "{err}");
}

#[test]
fn config_file_with_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "experiment = \"deviations\"\ntau = 0.1\nn_paths = 5\npi_h = 1\n").unwrap();
    let out = bin(&["run", "--config", cfg.to_str().unwrap(), "--paths", "3"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = String::from_utf8(out.stdout).unwrap();
    assert_eq!(csv.lines().count(), 4);
    assert!(csv.starts_with("path,z"));
}

#[test]
fn outputs_do_not_depend_on_worker_count() {
    let mut bodies = Vec::new();
    for w in ["1", "4"] {
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path().to_str().unwrap();
        let out = bin(&[
            "clt-table", "--set", "taus=[0.05, 0.02]", "--paths", "120", "--set", "pi_h=1", "--workers", w, "--out", d,
        ]);
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
        let csv = std::fs::read(dir.path().join("clt-table.csv")).unwrap();
        let meta: serde_json::Value =
            serde_json::from_slice(&std::fs::read(dir.path().join("clt-table.json")).unwrap()).unwrap();
        assert_eq!(meta["experiment"], "clt-table");
        assert!(meta["config"]["workers"].is_null());
        bodies.push((csv, meta));
    }
    assert_eq!(bodies[0], bodies[1]);
}
