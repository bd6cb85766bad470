use std::fs;
use std::path::Path;
use std::process::Command;

use bilevel_adapt::experiment::{emit_report, ExperimentConfig};
use bilevel_adapt::Error;

const BIN: &str = env!("CARGO_BIN_EXE_bilevel-adapt");

const SMALL: &str = r#"
[world]
source_size = 200
validation_size = 20
stream_length = 12

[pretrain]
hidden = [6]
steps = 40

[experiment]
schemes = ["Final"]
seeds = [0]
steps = [1]
"#;

fn run(args: &[&str]) -> (i32, String, String) {
    let out = Command::new(BIN).args(args).output().unwrap();
    (
        out.status.code().unwrap(),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn small_config(dir: &Path, extra: &str) -> String {
    let path = dir.join("small.toml");
    fs::write(&path, format!("{SMALL}{extra}")).unwrap();
    path.display().to_string()
}

#[test]
fn pretrain_adapt_report_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "");
    let out = dir.path().join("res").display().to_string();
    let (code, stdout, stderr) = run(&["pretrain", "--config", &cfg, "--out", &out]);
    assert_eq!(code, 0, "{stderr}");
    assert!(stdout.contains("source validation MPJPE"));
    let (code, _, stderr) = run(&["adapt", "--config", &cfg, "--out", &out]);
    assert_eq!(code, 0, "{stderr}");
    let runs: Vec<_> = fs::read_dir(dir.path().join("res/runs")).unwrap().collect();
    assert_eq!(runs.len(), 1);
    let text = fs::read_to_string(dir.path().join("res/runs/Final_seed0_T1.csv")).unwrap();
    let hash = ExperimentConfig::load(Path::new(&cfg)).unwrap().hash();
    assert!(text.starts_with(&format!("# config_hash={hash},scheme=Final,seed=0,steps=1,version=")));
    assert_eq!(text.lines().count(), 2 + 12);
    let (code, stdout, _) = run(&["report", "--out", &out]);
    assert_eq!(code, 0);
    assert!(stdout.contains("Final"));
    for f in [
        "ablation.csv",
        "steps.csv",
        "loss_metric.csv",
        "report_long.csv",
        "summary.txt",
        "config.toml",
    ] {
        assert!(dir.path().join("res").join(f).exists(), "{f}");
    }
}

#[test]
fn flags_override_the_grid() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "");
    let out = dir.path().join("res").display().to_string();
    assert_eq!(run(&["pretrain", "--config", &cfg, "--out", &out, "--seed", "3"]).0, 0);
    let (code, _, err) = run(&[
        "adapt",
        "--config",
        &cfg,
        "--out",
        &out,
        "--seed",
        "7",
        "--scheme",
        "b1,final",
        "--steps",
        "1,2",
        "--second-order",
        "first",
    ]);
    assert_eq!(code, 0, "{err}");
    let mut names: Vec<String> = fs::read_dir(dir.path().join("res/runs"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(
        names,
        [
            "B1_seed7_T1.csv",
            "B1_seed7_T2.csv",
            "Final_seed7_T1.csv",
            "Final_seed7_T2.csv"
        ]
    );
    let saved = fs::read_to_string(dir.path().join("res/config.toml")).unwrap();
    assert!(saved.contains("second_order = \"first\""));
}

#[test]
fn failed_assertion_exits_with_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(
        dir.path(),
        "\n[[experiment.assertions]]\nkind = \"better\"\nbetter = \"Final\"\nworse = \"Final\"\n",
    );
    let out = dir.path().join("res").display().to_string();
    assert_eq!(run(&["pretrain", "--config", &cfg, "--out", &out]).0, 0);
    assert_eq!(run(&["adapt", "--config", &cfg, "--out", &out]).0, 0);
    let (code, stdout, _) = run(&["report", "--out", &out]);
    assert_eq!(code, 3);
    assert!(stdout.contains("[FAIL]"));
}

#[test]
fn diverging_run_exits_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "\n[adapt]\neta = 1e6\nalpha = 1e6\n");
    let out = dir.path().join("res").display().to_string();
    assert_eq!(run(&["pretrain", "--config", &cfg, "--out", &out]).0, 0);
    let (code, stdout, _) = run(&["adapt", "--config", &cfg, "--out", &out]);
    assert_eq!(code, 2);
    assert!(stdout.contains("diverged"));
    let text = fs::read_to_string(dir.path().join("res/runs/Final_seed0_T1.csv")).unwrap();
    assert!(text.lines().next().unwrap().contains("status=diverged@"));
}

#[test]
fn invalid_input_exits_with_1() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("none").display().to_string();
    assert_eq!(run(&["adapt", "--out", &missing]).0, 1);
    assert_eq!(run(&["report", "--out", &missing]).0, 1);
    assert_eq!(run(&["adapt", "--scheme", "nope"]).0, 1);
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[adapt]\nalpha = -1\n").unwrap();
    assert_eq!(
        run(&["pretrain", "--config", &bad.display().to_string(), "--out", &missing]).0,
        1
    );
    assert_eq!(run(&["--help"]).0, 0);
}

#[test]
fn malformed_run_csv_reports_the_row() {
    let dir = tempfile::tempdir().unwrap();
    let runs = dir.path().join("runs");
    fs::create_dir_all(&runs).unwrap();
    let header = bilevel_adapt::adaptation::DIAGNOSTICS_HEADER;
    fs::write(
        runs.join("B1_seed0_T1.csv"),
        format!("# config_hash=x,scheme=B1,seed=0,steps=1,version=0,status=completed\n{header}\n0,B1,1,2\n"),
    )
    .unwrap();
    match emit_report(dir.path()) {
        Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
        other => panic!("{:?}", other.map(|r| r.summary)),
    }
    let (code, _, stderr) = run(&["report", "--out", &dir.path().display().to_string()]);
    assert_eq!(code, 1);
    assert!(stderr.contains("line 3"));
}

#[test]
fn single_run_report_equals_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let runs = dir.path().join("runs");
    fs::create_dir_all(&runs).unwrap();
    let header = bilevel_adapt::adaptation::DIAGNOSTICS_HEADER;
    let row = |f: usize, m: f64| format!("{f},B3,0,0,0,0,0,0,0,{m},{},0.5,0,0\n", m / 2.0);
    fs::write(
        runs.join("B3_seed4_T2.csv"),
        format!(
            "# config_hash=x,scheme=B3,seed=4,steps=2,version=0,status=completed\n{header}\n{}{}",
            row(0, 0.1),
            row(1, 0.3)
        ),
    )
    .unwrap();
    let report = emit_report(dir.path()).unwrap();
    assert_eq!(report.groups.len(), 1);
    let g = &report.groups[0];
    assert!((g.mpjpe.median - 0.2).abs() < 1e-15 && g.mpjpe.q1 == g.mpjpe.median && g.mpjpe.q3 == g.mpjpe.median);
    assert!(report.passed());
}

#[test]
fn shipped_configs_parse() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for e in fs::read_dir(root).unwrap() {
        let p = e.unwrap().path();
        ExperimentConfig::load(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
        n += 1;
    }
    assert!(n >= 2);
}
