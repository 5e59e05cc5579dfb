use std::path::Path;
use std::process::{Command, Output};

fn classquant(args: &[&str], env_dir: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_classquant"));
    cmd.args(args).env_remove("CLASSQUANT_OUTPUT_DIR").env("RUST_LOG", "error");
    if let Some(d) = env_dir {
        cmd.env("CLASSQUANT_OUTPUT_DIR", d);
    }
    cmd.output().expect("binary runs")
}

const SMALL: &[&str] = &[
    "--seed",
    "5",
    "--data-source",
    "blobs",
    "--samples",
    "1000",
    "--train-epochs",
    "6",
    "--refine-epochs",
    "1",
    "--search-samples",
    "150",
];

fn with<'a>(head: &[&'a str], tail: &[&'a str]) -> Vec<&'a str> {
    head.iter().chain(SMALL).chain(tail).copied().collect()
}

#[test]
fn help_exits_zero() {
    let out = classquant(&["--help"], None);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("pipeline"));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(classquant(&[], None).status.code(), Some(1));
    assert_eq!(classquant(&["train", "--no-such-flag"], None).status.code(), Some(1));
    let out = classquant(&["train"], None);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("seed"));
}

#[test]
fn invalid_config_exits_one() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("run");
    let out = classquant(
        &["pipeline", "--seed", "1", "--data-source", "csv", "--data-path", "/nonexistent.csv", "--output-dir", dir.to_str().unwrap()],
        None,
    );
    assert_eq!(out.status.code(), Some(1));
    let cfg = tmp.path().join("bad.toml");
    std::fs::write(&cfg, "seed = 1\nunknown_key = 2\n").unwrap();
    assert_eq!(classquant(&["pipeline", "--config", cfg.to_str().unwrap()], None).status.code(), Some(1));
}

#[test]
fn missing_inputs_exit_two() {
    let tmp = tempfile::tempdir().unwrap();
    let out = classquant(&with(&["search"], &["--output-dir", tmp.path().to_str().unwrap()]), None);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing"));
}

#[test]
fn stages_then_report_through_the_environment_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("run");
    for stage in ["train", "score", "search", "quantize", "refine"] {
        let out = classquant(&with(&[stage], &[]), Some(&dir));
        assert_eq!(out.status.code(), Some(0), "{stage}: {}", String::from_utf8_lossy(&out.stderr));
        assert!(String::from_utf8_lossy(&out.stdout).starts_with(&format!("{stage}: done")));
    }
    let resumed = classquant(&with(&["train"], &["--resume"]), Some(&dir));
    assert!(String::from_utf8_lossy(&resumed.stdout).contains("skipped"));
    let report = classquant(&["report"], Some(&dir));
    assert_eq!(report.status.code(), Some(0));
    let text = String::from_utf8_lossy(&report.stdout);
    assert!(text.contains("average bit-width b_cur"), "{text}");
    assert!(text.contains("missing artifacts: none"), "{text}");
}

#[test]
fn pipeline_prints_a_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let out = classquant(&with(&["pipeline"], &["--output-dir", tmp.path().to_str().unwrap()]), None);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8_lossy(&out.stdout);
    for stage in ["train", "score", "search", "quantize", "refine", "report"] {
        assert!(text.contains(stage), "{text}");
    }
    assert!(tmp.path().join("report.txt").is_file());
}
