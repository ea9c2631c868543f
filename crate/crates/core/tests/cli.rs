use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn scenario(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/scenarios").join(name)
}

fn paramdrop(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_paramdrop")).args(args).output().unwrap()
}

fn run(config: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["run", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    paramdrop(&args)
}

#[test]
fn run_writes_report_log_and_timeline() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&scenario("small.toml"), dir.path(), &[]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8(o.stdout).unwrap();
    assert!(stdout.starts_with("kunserve"), "{stdout}");

    let report = std::fs::read_to_string(dir.path().join("report.csv")).unwrap();
    let mut lines = report.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(header.len(), row.len());
    assert!(lines.next().is_none());
    let col = |name: &str| row[header.iter().position(|h| *h == name).unwrap_or_else(|| panic!("no column {name}"))];
    assert_eq!(col("policy"), "kunserve");
    assert_eq!(col("completed"), "40");
    assert!(col("ttft_p99").parse::<f64>().unwrap() > 0.0);
    assert!(row.iter().all(|v| !v.is_empty()));

    let log = std::fs::read_to_string(dir.path().join("events.log")).unwrap();
    assert_eq!(log.lines().filter(|l| l.contains(" arrival ")).count(), 40);
    assert_eq!(log.lines().filter(|l| l.contains(" finish ")).count(), 40);
    let timeline = std::fs::read_to_string(dir.path().join("timeline.csv")).unwrap();
    assert!(timeline.starts_with("time_s,occupancy,queued,mean_ttft_s,groups,drop_active"));
    assert!(timeline.lines().count() > 2);
}

#[test]
fn identical_invocations_give_identical_outputs() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        assert!(run(&scenario("small.toml"), d.path(), &["--policy", "swap", "--seed", "5"]).status.success());
    }
    for f in ["report.csv", "events.log", "timeline.csv"] {
        let x = std::fs::read(a.path().join(f)).unwrap();
        let y = std::fs::read(b.path().join(f)).unwrap();
        assert!(x == y, "{f} differs");
    }
}

#[test]
fn policy_flag_overrides_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&scenario("small.toml"), dir.path(), &["--policy", "recompute"]);
    assert!(o.status.success());
    let report = std::fs::read_to_string(dir.path().join("report.csv")).unwrap();
    assert!(report.lines().nth(1).unwrap().starts_with("recompute,"));
}

#[test]
fn unknown_policy_exits_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&scenario("small.toml"), dir.path(), &["--policy", "lru"]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8(o.stderr).unwrap();
    assert!(err.contains("policy") && err.contains("lru"), "{err}");
    assert!(!dir.path().join("report.csv").exists());
}

#[test]
fn bad_config_exits_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[model]\nnum_layers = 1\n").unwrap();
    let o = run(&cfg, &dir.path().join("out"), &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8(o.stderr).unwrap().starts_with("error:"));
    let o = run(&dir.path().join("missing.toml"), &dir.path().join("out"), &[]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn compare_writes_one_row_per_policy() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = scenario("small.toml");
    let o = paramdrop(&["compare", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report = std::fs::read_to_string(dir.path().join("report.csv")).unwrap();
    let policies: Vec<&str> = report.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(policies, ["kunserve", "recompute", "swap", "migrate"]);
    for p in policies {
        assert!(dir.path().join(format!("events-{p}.log")).exists());
        assert!(dir.path().join(format!("timeline-{p}.csv")).exists());
    }
}
