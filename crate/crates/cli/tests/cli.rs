use std::fs;
use std::process::Command;

fn kerhrm() -> Command {
    Command::new(env!("CARGO_BIN_EXE_kerhrm"))
}

const TINY: &str = "\
# small enough to finish in seconds
cls.n_per_env = 120, 120, 80
hidden = 16
k = 4
iterations = 1
epochs = 30
inv_steps = 500
em_restarts = 2
em_max_iter = 30
seeds = 0, 1
";

#[test]
fn check_passes_and_reports_each_property() {
    let out = kerhrm().args(["check", "--cases", "5"]).output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().filter(|l| l.starts_with("PASS")).count(), 6, "{text}");
}

#[test]
fn run_writes_the_three_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.cfg");
    fs::write(&cfg, TINY).unwrap();
    let out_dir = dir.path().join("out");
    let out = kerhrm()
        .args([
            "run", "--quiet", "--seed", "3", "--method", "erm", "--method", "kerhrm", "--config",
        ])
        .arg(&cfg)
        .arg("--out")
        .arg(&out_dir)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["report.json", "results.csv", "trace.csv"] {
        assert!(out_dir.join(f).is_file(), "missing {f}");
    }
    let rows = fs::read_to_string(out_dir.join("results.csv")).unwrap();
    // one seed, one test environment, two methods
    assert_eq!(rows.lines().count(), 3);
    assert!(rows.lines().skip(1).all(|l| l.contains(",3,")));
}

#[test]
fn gen_writes_one_csv_per_environment() {
    let dir = tempfile::tempdir().unwrap();
    let out = kerhrm()
        .args(["gen", "--quiet", "--set", "cls.n_per_env = 10, 20, 30", "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for (e, n) in [(0, 10), (1, 20), (2, 30)] {
        let text = fs::read_to_string(dir.path().join(format!("env{e}.csv"))).unwrap();
        let mut lines = text.lines();
        assert!(lines.next().unwrap().ends_with("y,env,spurious"));
        assert_eq!(lines.count(), n);
    }
}

#[test]
fn unknown_config_key_exits_with_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "no_such_key = 1\n").unwrap();
    let out = kerhrm().args(["run", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no_such_key"));
}

#[test]
fn malformed_override_exits_with_error() {
    let out = kerhrm().args(["gen", "--set", "hidden"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_method_is_a_usage_error() {
    let out = kerhrm().args(["run", "--method", "dro"]).output().unwrap();
    assert!(!out.status.success());
}
