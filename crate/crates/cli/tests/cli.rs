use std::path::Path;
use std::process::{Command, Output};

use catgrad_core::harness::PRESETS;

fn catgrad(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_catgrad")).args(args).output().expect("spawn catgrad")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn selftest_passes() {
    let o = catgrad(&["selftest"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(!stdout(&o).contains("FAIL"));
}

#[test]
fn injected_fault_is_reported() {
    let o = catgrad(&["selftest", "--inject-fault", "indecater-bias"]);
    assert_eq!(o.status.code(), Some(1));
    let text = stdout(&o);
    assert!(text.contains("FAIL unbiasedness"), "{text}");
    assert!(text.contains("failing suites:"), "{text}");
}

#[test]
fn usage_errors_exit_two() {
    for args in [
        &[][..],
        &["bogus"],
        &["opt-synth", "--format", "yaml"],
        &["opt-synth", "--preset", "dvae-desk"],
        &["nesy", "--preset", "missing"],
        &["bench-exact", "--estimators", "leg-0"],
        &["selftest", "--inject-fault", "nothing"],
    ] {
        let o = catgrad(args);
        assert_eq!(o.status.code(), Some(2), "{args:?}: {}", stderr(&o));
    }
}

#[test]
fn missing_config_file_fails() {
    let o = catgrad(&["dvae", "--config", "/nonexistent/run.toml"]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
}

#[test]
fn every_preset_runs_one_iteration() {
    let dir = tempfile::tempdir().unwrap();
    for (name, exp) in PRESETS {
        let out = dir.path().join(format!("{name}.csv"));
        let o = catgrad(&[exp.name(), "--preset", name, "--iters", "1", "--seed", "5", "--out", out.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(0), "{name}: {}", stderr(&o));
        assert!(stdout(&o).starts_with("arm"), "{name}");
        let text = std::fs::read_to_string(&out).unwrap();
        assert!(text.lines().count() >= 2, "{name}: {text}");
    }
}

fn run_to(path: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["bench-exact", "--preset", "fig1b", "--iters", "20", "-q", "--out", path.to_str().unwrap()];
    args.extend_from_slice(extra);
    catgrad(&args)
}

#[test]
fn json_and_csv_reports() {
    let dir = tempfile::tempdir().unwrap();
    let json = dir.path().join("r.json");
    let o = run_to(&json, &[]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).is_empty());
    let report = catgrad_core::report::read_report(&json).unwrap();
    assert_eq!(report.arms.len(), 4);

    let csv = dir.path().join("r.txt");
    assert_eq!(run_to(&csv, &["--format", "csv"]).status.code(), Some(0));
    let rows = catgrad_core::report::read_metrics(&csv, catgrad_core::Format::Csv).unwrap();
    assert_eq!(rows.len(), 4);
}

#[test]
fn seeded_runs_repeat() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.json");
    let b = dir.path().join("b.json");
    let c = dir.path().join("c.json");
    run_to(&a, &["--seed", "9"]);
    run_to(&b, &["--seed", "9"]);
    run_to(&c, &["--seed", "10"]);
    let read = |p: &Path| {
        let r = catgrad_core::report::read_report(p).unwrap().without_timing();
        (r.arms, r.steps)
    };
    assert_eq!(read(&a), read(&b));
    assert_ne!(read(&a), read(&c));
}

#[test]
fn config_file_with_estimator_override() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(
        &cfg,
        "version = 1\nexperiment = \"opt-synth\"\nseed = 2\niterations = 3\n\n[task]\ndims = 20\nlog_every = 1\n\n[[arm]]\nestimator = \"indecater\"\nsamples = 2\nlr = 5.0\n",
    )
    .unwrap();
    let o = catgrad(&["opt-synth", "--config", cfg.to_str().unwrap(), "--estimators", "indecater-1,rloo-4", "-v"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("indecater-1") && text.contains("rloo-4"), "{text}");
}
