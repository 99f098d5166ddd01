//! The multi-stage protocol: train a fresh model on the labeled pool, evaluate
//! it, score the unlabeled pool, label the top `b`, repeat. Runs over every
//! seed and strategy, then aggregates test accuracy per stage.
//!
//! Randomness is derived so that strategies are compared on equal footing.
//! For a given seed, the test split and initial pool come from one fork and the
//! model initialization and training batches of stage `t` come from another
//! keyed by `t` alone. Every strategy therefore trains the identical model at
//! stage 0, and later stages differ only through the labeled set. The random
//! baseline draws from a third fork keyed by strategy and stage.

use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::acquisition::{
    baseline_scores, empirical_hdh_gap, labeled_mean_discrepancy, mcdal_scores, select_top,
    unlabeled_disagreement_rate, PairTerms, Strategy,
};
use crate::data::{initial_split, load_csv, make_blobs, make_moons, make_rings, Dataset, Oracle, Pool, SplitConfig};
use crate::error::{Error, Result};
use crate::losses::DistanceKind;
use crate::model::{MlpSpec, ThreeHeadClassifier, DEFAULT_AUX_HEADS};
use crate::numeric::{Matrix, Rng};
use crate::trainer::{train, TrainConfig};

/// Where the samples come from. Synthetic sources are generated once per
/// experiment from `data_seed`; only the split varies with the run seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum DataSource {
    Moons { n: usize, noise: f64 },
    /// `n` samples spread evenly over `classes` Gaussian blobs.
    Blobs { n: usize, classes: usize, spread: f64 },
    Rings { n: usize, noise: f64 },
    Csv { path: PathBuf, label_column: String },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Moons { n: 2000, noise: 0.25 }
    }
}

impl DataSource {
    pub fn load(&self, data_seed: u64) -> Result<Dataset> {
        let mut rng = Rng::new(data_seed);
        match self {
            DataSource::Moons { n, noise } => make_moons(*n, *noise, &mut rng),
            DataSource::Rings { n, noise } => make_rings(*n, *noise, &mut rng),
            DataSource::Blobs { n, classes, spread } => {
                if *classes == 0 || n % classes != 0 {
                    return Err(Error::config(format!(
                        "blobs: n = {n} is not a multiple of classes = {classes}"
                    )));
                }
                make_blobs(n / classes, *classes, None, *spread, &mut rng)
            }
            DataSource::Csv { path, label_column } => load_csv(path, label_column, false),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            DataSource::Moons { .. } => "moons",
            DataSource::Blobs { .. } => "blobs",
            DataSource::Rings { .. } => "rings",
            DataSource::Csv { .. } => "csv",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum MetricsFormat {
    #[default]
    Csv,
    Json,
}

impl FromStr for MetricsFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "csv" => Ok(MetricsFormat::Csv),
            "json" => Ok(MetricsFormat::Json),
            other => Err(Error::config(format!("unknown format `{other}` (expected csv or json)"))),
        }
    }
}

impl fmt::Display for MetricsFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MetricsFormat::Csv => "csv",
            MetricsFormat::Json => "json",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub source: DataSource,
    pub data_seed: u64,
    pub hidden_dims: Vec<usize>,
    pub train: TrainConfig,
    pub strategies: Vec<Strategy>,
    pub initial_fraction: f64,
    pub stage_increment: f64,
    pub final_fraction: f64,
    pub test_fraction: f64,
    pub stratified: bool,
    pub standardize: bool,
    pub seeds: Vec<u64>,
    pub output: Option<PathBuf>,
    pub format: MetricsFormat,
    /// Per-(strategy, stage) accuracy summary, always written as CSV.
    pub summary_output: Option<PathBuf>,
    /// Saves each stage's model, pool and training split for later scoring.
    pub checkpoint_dir: Option<PathBuf>,
    /// Record wall-clock time per stage. Off by default so reruns are byte-identical.
    pub timing: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            source: DataSource::default(),
            data_seed: 0,
            hidden_dims: vec![32, 32],
            train: TrainConfig::default(),
            strategies: Strategy::standard_set(),
            initial_fraction: 0.10,
            stage_increment: 0.05,
            final_fraction: 0.40,
            test_fraction: 0.20,
            stratified: true,
            standardize: true,
            seeds: vec![1, 2, 3, 4, 5],
            output: None,
            format: MetricsFormat::Csv,
            summary_output: None,
            checkpoint_dir: None,
            timing: false,
        }
    }
}

const FRACTION_TOL: f64 = 1e-9;

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.num_stages()?;
        self.train.validate()?;
        if self.strategies.is_empty() {
            return Err(Error::config("no strategies given"));
        }
        for s in &self.strategies {
            s.validate()?;
        }
        let mut labels: Vec<String> = self.strategies.iter().map(Strategy::label).collect();
        labels.sort();
        if let Some(w) = labels.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::config(format!("strategy `{}` listed twice", w[0])));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("no seeds given"));
        }
        if self.hidden_dims.contains(&0) {
            return Err(Error::config("hidden layer widths must be positive"));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::config(format!("test_fraction must lie in (0, 1), got {}", self.test_fraction)));
        }
        Ok(())
    }

    /// Number of evaluated stages, i.e. one more than the number of transfers.
    pub fn num_stages(&self) -> Result<usize> {
        let (a, d, z) = (self.initial_fraction, self.stage_increment, self.final_fraction);
        for (name, v) in [("initial_fraction", a), ("stage_increment", d), ("final_fraction", z)] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::config(format!("{name} must lie in (0, 1], got {v}")));
            }
        }
        let k = ((z - a) / d).round();
        if k < 1.0 || (a + k * d - z).abs() > FRACTION_TOL {
            return Err(Error::config(format!(
                "initial_fraction {a} plus whole steps of {d} never reaches final_fraction {z}"
            )));
        }
        Ok(k as usize + 1)
    }

    /// Per-transfer budgets for a training set of `train_size`. Each is
    /// `round(stage_increment × train_size)` except the last, which absorbs the
    /// rounding residue so the pool ends at `round(final_fraction × train_size)`.
    pub fn budgets(&self, train_size: usize) -> Result<Vec<usize>> {
        let transfers = self.num_stages()? - 1;
        let n = train_size as f64;
        let initial = (self.initial_fraction * n).round() as usize;
        let target = (self.final_fraction * n).round() as usize;
        let b = (self.stage_increment * n).round() as usize;
        let head = b * (transfers - 1);
        if b == 0 || target < initial + head + 1 {
            return Err(Error::config(format!(
                "stage_increment {} is too small for {train_size} training samples",
                self.stage_increment
            )));
        }
        let mut out = vec![b; transfers - 1];
        out.push(target - initial - head);
        Ok(out)
    }

    pub fn split_config(&self) -> SplitConfig {
        SplitConfig {
            initial_fraction: self.initial_fraction,
            test_fraction: self.test_fraction,
            stratified: self.stratified,
            standardize: self.standardize,
        }
    }

    /// Overrides the distance of the training loop and of every MCDAL arm.
    pub fn set_distance(&mut self, kind: DistanceKind) {
        self.train.distance = kind;
        for s in &mut self.strategies {
            if let Strategy::Mcdal(o) = s {
                o.distance = kind;
            }
        }
    }
}

/// Training settings for one strategy. MCDAL arms carry their own distance and
/// discrepancy switch; baselines use the shared configuration.
pub fn strategy_train_config(base: &TrainConfig, strategy: &Strategy) -> TrainConfig {
    let mut cfg = base.clone();
    if let Strategy::Mcdal(o) = strategy {
        cfg.distance = o.distance;
        cfg.use_discrepancy_loss = o.use_discrepancy_loss;
    }
    cfg
}

fn aux_heads(strategy: &Strategy) -> usize {
    match strategy {
        Strategy::Mcdal(o) => o.aux_heads,
        _ => DEFAULT_AUX_HEADS,
    }
}

fn distance_terms(strategy: &Strategy) -> (DistanceKind, PairTerms) {
    match strategy {
        Strategy::Mcdal(o) => (o.distance, o.terms),
        _ => (DistanceKind::L1, PairTerms::All),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub seed: u64,
    pub strategy: String,
    pub stage: usize,
    pub labeled_fraction: f64,
    pub test_accuracy: f64,
    pub labeled_mean_discrepancy: f64,
    pub hdh_gap: f64,
    pub unlabeled_disagreement_rate: f64,
    pub wall_time_ms: u64,
    /// Pool indices labeled at the end of this stage, best first. Not part of
    /// the metrics file.
    #[serde(skip)]
    pub selected: Vec<usize>,
}

/// Coordinates of one stage within an experiment.
#[derive(Debug, Clone, Copy)]
pub struct StagePlan<'a> {
    pub seed: u64,
    pub stage: usize,
    /// Samples to label after evaluation; 0 on the last stage.
    pub budget: usize,
    pub strategy: &'a Strategy,
}

/// What a stage leaves behind besides its record.
pub struct StageOutcome {
    pub record: StageRecord,
    pub model: ThreeHeadClassifier,
    /// The pool as it was during training, before the transfer.
    pub trained_on: crate::data::PoolSnapshot,
}

/// Model-initialization and training randomness for `(seed, stage)`.
pub fn stage_rng(seed: u64, stage: usize) -> Rng {
    Rng::new(seed).fork_named("stage").fork(stage as u64)
}

fn split_rng(seed: u64) -> Rng {
    Rng::new(seed).fork_named("split")
}

fn selection_rng(seed: u64, strategy: &Strategy, stage: usize) -> Rng {
    Rng::new(seed)
        .fork_named(&format!("select:{}", strategy.label()))
        .fork(stage as u64)
}

/// Trains a fresh model on the current pool, evaluates it on `test`, then
/// labels the top `plan.budget` unlabeled samples under `plan.strategy`.
pub fn run_stage(
    pool: &mut Pool,
    test: &Dataset,
    model_spec: &MlpSpec,
    base_train: &TrainConfig,
    plan: &StagePlan<'_>,
    timing: bool,
) -> Result<StageOutcome> {
    let started = Instant::now();
    if plan.budget > pool.num_unlabeled() {
        return Err(Error::Budget {
            requested: plan.budget,
            available: pool.num_unlabeled(),
        });
    }
    let strategy = plan.strategy;
    let rng = stage_rng(plan.seed, plan.stage);
    let train_cfg = strategy_train_config(base_train, strategy);
    let mut model = ThreeHeadClassifier::init_with_heads(model_spec, aux_heads(strategy), &rng.fork_named("init"))?;

    let trained_on = pool.snapshot();
    let labeled = pool.labeled_data();
    let unlabeled_x = pool.unlabeled_features();
    train(&mut model, &labeled, &unlabeled_x, &train_cfg, &rng.fork_named("train"))?;

    let test_accuracy = model.accuracy(&test.features, &test.labels)?;
    let (kind, terms) = distance_terms(strategy);
    let labeled_mean = labeled_mean_discrepancy(&model, &labeled.x, kind, terms)?;
    // With nothing left unlabeled both diagnostics are taken as 0.
    let (hdh_gap, unlabeled_rate) = if unlabeled_x.rows() == 0 {
        (0.0, 0.0)
    } else {
        (
            empirical_hdh_gap(&model, &labeled.x, &unlabeled_x)?,
            unlabeled_disagreement_rate(&model, &unlabeled_x)?,
        )
    };

    let mut selected = Vec::new();
    if plan.budget > 0 {
        let indices = &trained_on.unlabeled;
        let scores = match strategy {
            Strategy::Mcdal(o) => mcdal_scores(&model, &unlabeled_x, indices, labeled_mean, o)?,
            _ => {
                let mut rng = selection_rng(plan.seed, strategy, plan.stage);
                baseline_scores(&model, &unlabeled_x, indices, strategy, &mut rng)?
            }
        };
        selected = select_top(&scores, plan.budget)?;
        let train_set = Arc::clone(pool.train());
        pool.transfer(&selected, &Oracle::new(&train_set))?;
    }

    let record = StageRecord {
        seed: plan.seed,
        strategy: strategy.label(),
        stage: plan.stage,
        labeled_fraction: trained_on.labeled.len() as f64 / pool.train_size() as f64,
        test_accuracy,
        labeled_mean_discrepancy: labeled_mean,
        hdh_gap,
        unlabeled_disagreement_rate: unlabeled_rate,
        wall_time_ms: if timing { started.elapsed().as_millis() as u64 } else { 0 },
        selected,
    };
    Ok(StageOutcome {
        record,
        model,
        trained_on,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub strategy: String,
    pub stage: usize,
    pub labeled_fraction: f64,
    pub runs: usize,
    pub mean_accuracy: f64,
    /// Population standard deviation over runs.
    pub std_accuracy: f64,
}

/// Mean and standard deviation of test accuracy per (strategy, stage), in
/// order of first appearance.
pub fn summarize(records: &[StageRecord]) -> Vec<SummaryRow> {
    let mut strategies: Vec<&str> = Vec::new();
    let mut keys: Vec<(usize, usize)> = Vec::new();
    for r in records {
        let s = match strategies.iter().position(|&s| s == r.strategy) {
            Some(s) => s,
            None => {
                strategies.push(&r.strategy);
                strategies.len() - 1
            }
        };
        if !keys.contains(&(s, r.stage)) {
            keys.push((s, r.stage));
        }
    }
    keys.sort_unstable();
    keys.into_iter()
        .map(|(s, stage)| (strategies[s], stage))
        .map(|(strategy, stage)| {
            let group: Vec<&StageRecord> = records
                .iter()
                .filter(|r| r.strategy == strategy && r.stage == stage)
                .collect();
            let n = group.len() as f64;
            let mean = group.iter().map(|r| r.test_accuracy).sum::<f64>() / n;
            let var = group.iter().map(|r| (r.test_accuracy - mean).powi(2)).sum::<f64>() / n;
            SummaryRow {
                strategy: strategy.to_owned(),
                stage,
                labeled_fraction: group.iter().map(|r| r.labeled_fraction).sum::<f64>() / n,
                runs: group.len(),
                mean_accuracy: mean,
                std_accuracy: var.sqrt(),
            }
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub records: Vec<StageRecord>,
    pub summary: Vec<SummaryRow>,
}

/// Runs seeds × strategies × stages, then writes the configured outputs.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    cfg.validate()?;
    let dataset = cfg.source.load(cfg.data_seed)?;
    let spec = MlpSpec::new(dataset.input_dim(), cfg.hidden_dims.clone(), dataset.num_classes)?;
    let stages = cfg.num_stages()?;
    if let Some(dir) = &cfg.checkpoint_dir {
        fs::create_dir_all(dir)?;
    }

    let mut records = Vec::with_capacity(cfg.seeds.len() * cfg.strategies.len() * stages);
    for &seed in &cfg.seeds {
        let split = initial_split(&dataset, &cfg.split_config(), &mut split_rng(seed))?;
        let budgets = cfg.budgets(split.pool.train_size())?;
        if let Some(dir) = &cfg.checkpoint_dir {
            split.pool.train().write_csv(&dir.join(format!("seed{seed}_train.csv")), "label")?;
        }
        for strategy in &cfg.strategies {
            let mut pool = split.pool.clone();
            for stage in 0..stages {
                let plan = StagePlan {
                    seed,
                    stage,
                    budget: budgets.get(stage).copied().unwrap_or(0),
                    strategy,
                };
                let wrap = |e: Error| Error::Stage {
                    seed,
                    strategy: strategy.label(),
                    stage,
                    source: Box::new(e),
                };
                let outcome = run_stage(&mut pool, &split.test, &spec, &cfg.train, &plan, cfg.timing).map_err(wrap)?;
                if let Some(dir) = &cfg.checkpoint_dir {
                    save_stage(dir, &outcome).map_err(wrap)?;
                }
                records.push(outcome.record);
            }
        }
    }

    let summary = summarize(&records);
    if let Some(path) = &cfg.output {
        emit_metrics(&records, path, cfg.format)?;
    }
    if let Some(path) = &cfg.summary_output {
        write_summary_csv(&summary, path)?;
    }
    Ok(ExperimentResult { records, summary })
}

/// File stem used for a stage's checkpoint and pool snapshot.
pub fn stage_file_stem(seed: u64, strategy: &str, stage: usize) -> String {
    format!("seed{seed}_{strategy}_stage{stage}")
}

fn save_stage(dir: &Path, outcome: &StageOutcome) -> Result<()> {
    let r = &outcome.record;
    let stem = stage_file_stem(r.seed, &r.strategy, r.stage);
    outcome.model.save(&dir.join(format!("{stem}.model.json")))?;
    let pool = serde_json::to_vec_pretty(&outcome.trained_on)?;
    fs::write(dir.join(format!("{stem}.pool.json")), pool)?;
    Ok(())
}

pub const METRICS_COLUMNS: [&str; 9] = [
    "seed",
    "strategy",
    "stage",
    "labeled_fraction",
    "test_accuracy",
    "labeled_mean_discrepancy",
    "hdh_gap",
    "unlabeled_disagreement_rate",
    "wall_time_ms",
];

/// 17 significant digits, enough to round-trip any `f64`.
fn fmt_float(v: f64) -> String {
    format!("{v:.16e}")
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    Ok(BufWriter::new(fs::File::create(path)?))
}

/// Writes one row per record. JSON output is an array of objects with the
/// CSV column names as keys.
pub fn emit_metrics(records: &[StageRecord], path: &Path, format: MetricsFormat) -> Result<()> {
    if records.is_empty() {
        return Err(Error::config("no records to write"));
    }
    let mut w = create(path)?;
    match format {
        MetricsFormat::Csv => write_metrics_csv(records, &mut w)?,
        MetricsFormat::Json => write_metrics_json(records, &mut w)?,
    }
    w.flush()?;
    Ok(())
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_owned()
    }
}

pub fn write_metrics_csv<W: Write>(records: &[StageRecord], mut w: W) -> Result<()> {
    writeln!(w, "{}", METRICS_COLUMNS.join(","))?;
    for r in records {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{}",
            r.seed,
            csv_field(&r.strategy),
            r.stage,
            fmt_float(r.labeled_fraction),
            fmt_float(r.test_accuracy),
            fmt_float(r.labeled_mean_discrepancy),
            fmt_float(r.hdh_gap),
            fmt_float(r.unlabeled_disagreement_rate),
            r.wall_time_ms
        )?;
    }
    Ok(())
}

// Written by hand so floats keep the fixed 17-digit form of the CSV.
pub fn write_metrics_json<W: Write>(records: &[StageRecord], mut w: W) -> Result<()> {
    writeln!(w, "[")?;
    for (k, r) in records.iter().enumerate() {
        let sep = if k + 1 == records.len() { "" } else { "," };
        writeln!(
            w,
            "  {{\"seed\": {}, \"strategy\": {}, \"stage\": {}, \"labeled_fraction\": {}, \
             \"test_accuracy\": {}, \"labeled_mean_discrepancy\": {}, \"hdh_gap\": {}, \
             \"unlabeled_disagreement_rate\": {}, \"wall_time_ms\": {}}}{sep}",
            r.seed,
            serde_json::to_string(&r.strategy)?,
            r.stage,
            fmt_float(r.labeled_fraction),
            fmt_float(r.test_accuracy),
            fmt_float(r.labeled_mean_discrepancy),
            fmt_float(r.hdh_gap),
            fmt_float(r.unlabeled_disagreement_rate),
            r.wall_time_ms
        )?;
    }
    writeln!(w, "]")?;
    Ok(())
}

/// Reads a metrics file written by [`emit_metrics`]. `selected` comes back empty.
pub fn read_metrics(path: &Path, format: MetricsFormat) -> Result<Vec<StageRecord>> {
    match format {
        MetricsFormat::Json => Ok(serde_json::from_slice(&fs::read(path)?)?),
        MetricsFormat::Csv => {
            let err = |e: csv::Error| Error::Csv {
                path: path.to_path_buf(),
                msg: e.to_string(),
            };
            let mut rd = csv::Reader::from_path(path).map_err(err)?;
            let header: Vec<String> = rd.headers().map_err(err)?.iter().map(str::to_owned).collect();
            if header != METRICS_COLUMNS {
                return Err(Error::Csv {
                    path: path.to_path_buf(),
                    msg: format!("unexpected header {}", header.join(",")),
                });
            }
            rd.deserialize().map(|r| r.map_err(err)).collect()
        }
    }
}

pub fn write_summary_csv(summary: &[SummaryRow], path: &Path) -> Result<()> {
    let mut w = create(path)?;
    writeln!(w, "strategy,stage,labeled_fraction,runs,mean_accuracy,std_accuracy")?;
    for s in summary {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            csv_field(&s.strategy),
            s.stage,
            fmt_float(s.labeled_fraction),
            s.runs,
            fmt_float(s.mean_accuracy),
            fmt_float(s.std_accuracy)
        )?;
    }
    w.flush()?;
    Ok(())
}

/// Scores the unlabeled part of `pool` with a trained model, as the final
/// selection step of a stage would.
pub fn score_pool(
    model: &ThreeHeadClassifier,
    pool: &Pool,
    strategy: &Strategy,
    rng: &mut Rng,
) -> Result<Vec<crate::acquisition::AcquisitionScore>> {
    let unlabeled_x: Matrix = pool.unlabeled_features();
    let indices = pool.unlabeled_indices();
    match strategy {
        Strategy::Mcdal(o) => {
            let labeled = pool.labeled_data();
            let mean = labeled_mean_discrepancy(model, &labeled.x, o.distance, o.terms)?;
            mcdal_scores(model, &unlabeled_x, &indices, mean, o)
        }
        _ => baseline_scores(model, &unlabeled_x, &indices, strategy, rng),
    }
}
