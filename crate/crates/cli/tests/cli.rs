use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn fdivlab(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fdivlab"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("spawn fdivlab")
}

const ONE_CELL: &str = r#"
losses = ["hellinger"]
noise_levels = [0.2]
seeds = [3]

[task]
samples_per_split = 400
"#;

#[test]
fn run_writes_one_row_per_cell_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("grid.toml"), ONE_CELL).unwrap();
    for out in ["a", "b"] {
        let o = fdivlab(
            &[
                "run",
                "--config",
                "grid.toml",
                "--out",
                out,
                "--workers",
                "1",
            ],
            dir.path(),
        );
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let runs = fs::read_to_string(dir.path().join("a/runs.csv")).unwrap();
    assert_eq!(runs.lines().count(), 2);
    assert!(runs.lines().nth(1).unwrap().starts_with("Hellinger,0.2,3,"));
    for name in ["runs.csv", "runs.json", "summary.csv", "summary.json"] {
        assert_eq!(
            fs::read(dir.path().join("a").join(name)).unwrap(),
            fs::read(dir.path().join("b").join(name)).unwrap(),
            "{name}"
        );
    }

    let o = fdivlab(
        &["report", "--runs", "a/runs.csv", "--out", "c"],
        dir.path(),
    );
    assert!(o.status.success());
    assert_eq!(
        fs::read(dir.path().join("a/summary.csv")).unwrap(),
        fs::read(dir.path().join("c/summary.csv")).unwrap()
    );
}

#[test]
fn bad_configs_exit_with_usage_status() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.toml"), "noise_levels = [0.9]\n").unwrap();
    let o = fdivlab(&["run", "--config", "bad.toml"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    let o = fdivlab(&["run", "--config", "missing.toml"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    let o = fdivlab(&["verify", "--suites", ""], dir.path());
    assert_eq!(o.status.code(), Some(2));
    let o = fdivlab(&["verify", "--suites", "nonsense"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn verify_reports_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    for out in ["one.json", "two.json"] {
        let o = fdivlab(
            &[
                "verify",
                "--suites",
                "pinsker,equivalence",
                "--trials",
                "2000",
                "--seed",
                "4",
                "--out",
                out,
            ],
            dir.path(),
        );
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let one = fs::read(dir.path().join("one.json")).unwrap();
    assert_eq!(one, fs::read(dir.path().join("two.json")).unwrap());
    let report: serde_json::Value = serde_json::from_slice(&one).unwrap();
    assert_eq!(report["passed"], true);
    assert_eq!(report["suites"].as_array().unwrap().len(), 2);
}

#[test]
fn gen_writes_three_splits_and_the_teacher() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("grid.toml"), ONE_CELL).unwrap();
    let o = fdivlab(
        &["gen", "--config", "grid.toml", "--out", "task"],
        dir.path(),
    );
    assert!(o.status.success());
    for name in [
        "ground_truth.csv",
        "weak_supervision.csv",
        "test.csv",
        "teacher.json",
    ] {
        assert!(dir.path().join("task").join(name).exists(), "{name}");
    }
    let test = fs::read_to_string(dir.path().join("task/test.csv")).unwrap();
    assert_eq!(test.lines().count(), 401);
}
