use std::path::Path;
use std::process::{Command, Output};

fn mcdal(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mcdal"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("spawn mcdal")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited by signal")
}

const TINY: &str = "source = rings\nn = 200\nnoise = 0.1\nhidden_dims = 8\nmax_epochs = 2\nseeds = 3\nstrategies = mcdal, random\n";

#[test]
fn help_and_version_exit_zero() {
    let dir = tempfile::tempdir().unwrap();
    for flag in ["--help", "--version"] {
        let out = mcdal(&[flag], dir.path());
        assert_eq!(code(&out), 0, "{flag}");
    }
}

#[test]
fn bad_flag_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&mcdal(&["run", "--no-such-flag"], dir.path())), 1);
    assert_eq!(code(&mcdal(&["run", "--distance", "cosine"], dir.path())), 1);
}

#[test]
fn bad_config_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.cfg"), "stage_increment = -0.1\n").unwrap();
    let out = mcdal(&["run", "--config", "bad.cfg"], dir.path());
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));

    std::fs::write(dir.path().join("typo.cfg"), "max_epoch = 3\n").unwrap();
    assert_eq!(code(&mcdal(&["run", "--config", "typo.cfg"], dir.path())), 1);
}

#[test]
fn run_writes_metrics_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("tiny.cfg"), TINY).unwrap();
    let out = mcdal(
        &["run", "--config", "tiny.cfg", "--out", "out/m.csv", "--summary", "s.csv"],
        dir.path(),
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(dir.path().join("out/m.csv")).unwrap();
    // 2 strategies x 7 stages plus the header.
    assert_eq!(text.lines().count(), 15);
    assert!(text.starts_with("seed,strategy,stage,"));
    assert!(dir.path().join("s.csv").exists());
    assert!(String::from_utf8_lossy(&out.stderr).contains("accuracy"));
}

#[test]
fn json_format_is_inferred_from_extension() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("tiny.cfg"), TINY).unwrap();
    let out = mcdal(&["run", "--config", "tiny.cfg", "--strategy", "entropy", "--out", "m.json"], dir.path());
    assert_eq!(code(&out), 0);
    let text = std::fs::read_to_string(dir.path().join("m.json")).unwrap();
    assert!(text.trim_start().starts_with('['));
    assert_eq!(text.matches("\"strategy\"").count(), 7);
}

#[test]
fn metrics_go_to_stdout_without_out() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("tiny.cfg"), TINY).unwrap();
    let out = mcdal(&["run", "--config", "tiny.cfg", "--strategy", "margin"], dir.path());
    assert_eq!(code(&out), 0);
    assert_eq!(String::from_utf8_lossy(&out.stdout).lines().count(), 8);
}

#[test]
fn generated_data_feeds_a_csv_run() {
    let dir = tempfile::tempdir().unwrap();
    let out = mcdal(
        &["gen-data", "--kind", "blobs", "--n", "300", "--classes", "3", "--seed", "5", "--out", "blobs.csv"],
        dir.path(),
    );
    assert_eq!(code(&out), 0);
    let text = std::fs::read_to_string(dir.path().join("blobs.csv")).unwrap();
    assert_eq!(text.lines().count(), 301);
    assert_eq!(text.lines().next().unwrap(), "x0,x1,label");

    std::fs::write(
        dir.path().join("csv.cfg"),
        "source = csv\ncsv_path = blobs.csv\nhidden_dims = 8\nmax_epochs = 2\nseeds = 1\nstrategies = mcdal\n",
    )
    .unwrap();
    let out = mcdal(&["run", "--config", "csv.cfg", "--out", "m.csv"], dir.path());
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));

    let uneven = mcdal(&["gen-data", "--kind", "blobs", "--n", "301", "--classes", "3", "--out", "x.csv"], dir.path());
    assert_eq!(code(&uneven), 1);
}

#[test]
fn score_reads_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("tiny.cfg"), TINY).unwrap();
    let out = mcdal(
        &["run", "--config", "tiny.cfg", "--strategy", "mcdal", "--checkpoint-dir", "ck", "--out", "m.csv"],
        dir.path(),
    );
    assert_eq!(code(&out), 0);
    let pool: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("ck/seed3_mcdal_stage1.pool.json")).unwrap()).unwrap();
    let unlabeled = pool["unlabeled"].as_array().unwrap().len();

    let out = mcdal(
        &[
            "score",
            "--checkpoint",
            "ck/seed3_mcdal_stage1.model.json",
            "--data",
            "ck/seed3_train.csv",
            "--pool",
            "ck/seed3_mcdal_stage1.pool.json",
            "--out",
            "scores.csv",
        ],
        dir.path(),
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(dir.path().join("scores.csv")).unwrap();
    assert_eq!(text.lines().count(), unlabeled + 1);
    for line in text.lines().skip(1) {
        let score: f64 = line.rsplit(',').next().unwrap().parse().unwrap();
        assert!(score >= 0.0);
    }

    // Wrong feature space.
    std::fs::write(dir.path().join("wide.csv"), "a,b,c,label\n1,2,3,0\n").unwrap();
    let out = mcdal(
        &[
            "score",
            "--checkpoint",
            "ck/seed3_mcdal_stage1.model.json",
            "--data",
            "wide.csv",
            "--pool",
            "ck/seed3_mcdal_stage1.pool.json",
        ],
        dir.path(),
    );
    assert_eq!(code(&out), 1);
}

#[test]
fn runtime_failures_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("hot.cfg"), format!("{TINY}learning_rate = 1e300\n")).unwrap();
    let out = mcdal(&["run", "--config", "hot.cfg", "--out", "m.csv"], dir.path());
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("seed 3"));

    std::fs::write(dir.path().join("tiny.cfg"), TINY).unwrap();
    std::fs::write(dir.path().join("blocker"), "x").unwrap();
    let out = mcdal(&["run", "--config", "tiny.cfg", "--out", "blocker/m.csv"], dir.path());
    assert_eq!(code(&out), 2);

    let out = mcdal(
        &["score", "--checkpoint", "missing.json", "--data", "x.csv", "--pool", "p.json"],
        dir.path(),
    );
    assert_eq!(code(&out), 2);
}
