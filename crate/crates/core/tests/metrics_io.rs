use mcdal_core::experiment::{emit_metrics, read_metrics, METRICS_COLUMNS};
use mcdal_core::{run_experiment, DataSource, ExperimentConfig, MetricsFormat, StageRecord, Strategy};

fn tiny(seeds: Vec<u64>) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        source: DataSource::Rings { n: 300, noise: 0.1 },
        hidden_dims: vec![8],
        strategies: vec![Strategy::mcdal()],
        seeds,
        ..ExperimentConfig::default()
    };
    cfg.train.max_epochs = 2;
    cfg
}

fn strip(records: &[StageRecord]) -> Vec<StageRecord> {
    records
        .iter()
        .cloned()
        .map(|mut r| {
            r.selected.clear();
            r
        })
        .collect()
}

#[test]
fn five_seeds_give_35_records_and_36_lines() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("nested").join("metrics.csv");
    let mut cfg = tiny(vec![1, 2, 3, 4, 5]);
    cfg.output = Some(path.clone());
    let res = run_experiment(&cfg).unwrap();
    assert_eq!(res.records.len(), 35);
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().count(), 36);
    let header = METRICS_COLUMNS.join(",");
    assert_eq!(text.lines().next().unwrap(), header);
    assert_eq!(text.lines().filter(|l| *l == header).count(), 1);
}

#[test]
fn csv_and_json_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(vec![4, 9]);
    cfg.timing = true;
    let res = run_experiment(&cfg).unwrap();
    for format in [MetricsFormat::Csv, MetricsFormat::Json] {
        let path = dir.path().join(format!("m.{format}"));
        emit_metrics(&res.records, &path, format).unwrap();
        assert_eq!(read_metrics(&path, format).unwrap(), strip(&res.records), "{format}");
    }
}

#[test]
fn floats_carry_seventeen_significant_digits() {
    let dir = tempfile::tempdir().unwrap();
    let res = run_experiment(&tiny(vec![1])).unwrap();
    let path = dir.path().join("m.csv");
    emit_metrics(&res.records, &path, MetricsFormat::Csv).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let row: Vec<&str> = text.lines().nth(1).unwrap().split(',').collect();
    for field in &row[3..8] {
        let mantissa = field.split('e').next().unwrap().replace(['.', '-'], "");
        assert_eq!(mantissa.len(), 17, "{field}");
    }
}

#[test]
fn json_mirrors_csv_columns() {
    let dir = tempfile::tempdir().unwrap();
    let res = run_experiment(&tiny(vec![1])).unwrap();
    let path = dir.path().join("m.json");
    emit_metrics(&res.records, &path, MetricsFormat::Json).unwrap();
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(&path).unwrap()).unwrap();
    let first = v.as_array().unwrap()[0].as_object().unwrap();
    let mut keys: Vec<&str> = first.keys().map(String::as_str).collect();
    let mut want = METRICS_COLUMNS.to_vec();
    keys.sort_unstable();
    want.sort_unstable();
    assert_eq!(keys, want);
}

#[test]
fn unwritable_path_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, "x").unwrap();
    let res = run_experiment(&tiny(vec![1])).unwrap();
    let err = emit_metrics(&res.records, &blocker.join("m.csv"), MetricsFormat::Csv).unwrap_err();
    assert!(!err.is_config_error());
}

#[test]
fn summary_and_checkpoints_are_written() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(vec![2]);
    cfg.final_fraction = 0.15;
    cfg.summary_output = Some(dir.path().join("summary.csv"));
    cfg.checkpoint_dir = Some(dir.path().join("ck"));
    run_experiment(&cfg).unwrap();
    let summary = std::fs::read_to_string(dir.path().join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 3);
    let ck = dir.path().join("ck");
    for name in [
        "seed2_train.csv",
        "seed2_mcdal_stage0.model.json",
        "seed2_mcdal_stage0.pool.json",
        "seed2_mcdal_stage1.model.json",
    ] {
        assert!(ck.join(name).exists(), "{name}");
    }
}

#[test]
fn stage_errors_name_their_context() {
    let mut cfg = tiny(vec![6]);
    cfg.train.lr_schedule = mcdal_core::LrSchedule::constant(1e300).unwrap();
    match run_experiment(&cfg).unwrap_err() {
        mcdal_core::Error::Stage { seed, strategy, stage, source } => {
            assert_eq!((seed, strategy.as_str(), stage), (6, "mcdal", 0));
            assert!(matches!(*source, mcdal_core::Error::NonFinite { .. }), "{source}");
        }
        other => panic!("{other}"),
    }
}

#[test]
fn missing_csv_source_is_reported() {
    let mut cfg = tiny(vec![1]);
    cfg.source = DataSource::Csv {
        path: "/nonexistent/data.csv".into(),
        label_column: "label".into(),
    };
    assert!(run_experiment(&cfg).is_err());
}

#[test]
fn labeling_everything_still_runs_the_last_stage() {
    let mut cfg = tiny(vec![1]);
    cfg.stage_increment = 0.3;
    cfg.final_fraction = 1.0;
    let res = run_experiment(&cfg).unwrap();
    let last = res.records.last().unwrap();
    assert_eq!(last.labeled_fraction, 1.0);
    assert_eq!((last.hdh_gap, last.unlabeled_disagreement_rate), (0.0, 0.0));
}
