//! Flat `key = value` experiment configuration.
//!
//! One setting per line; `#` starts a comment; blank lines are ignored. Keys
//! may appear at most once and unknown keys are rejected. Relative paths are
//! resolved against the directory of the config file. Every key is optional.
//!
//! | key | default | meaning |
//! |---|---|---|
//! | `source` | `moons` | `moons`, `blobs`, `rings` or `csv` |
//! | `n` | `2000` | samples to generate |
//! | `noise` | `0.25` | moons/rings noise |
//! | `classes` | `4` | blob count |
//! | `spread` | `1.0` | blob standard deviation |
//! | `csv_path` | | data file when `source = csv` |
//! | `label_column` | `label` | label column of `csv_path` |
//! | `data_seed` | `0` | seed of the synthetic generator |
//! | `hidden_dims` | `32,32` | backbone widths |
//! | `max_epochs` | `100` | epochs per stage |
//! | `batch_size` | `32` | labeled (and unlabeled) batch size |
//! | `learning_rate` | `0.1` | base rate |
//! | `lr_milestones` | `0.3,0.6,0.8` | fractions of `max_epochs`; empty for none |
//! | `lr_decay` | `0.2` | factor applied at each milestone |
//! | `distance` | `l1` | `l1`, `l2` or `kl`, for training and for `mcdal` arms without a distance modifier |
//! | `use_discrepancy_loss` | `true` | default for `mcdal` arms without `nodis` |
//! | `strategies` | `all` | comma list of strategy labels, or `all` |
//! | `initial_fraction` | `0.10` | labeled share of the training split at stage 0 |
//! | `stage_increment` | `0.05` | share labeled per stage |
//! | `final_fraction` | `0.40` | labeled share at the last stage |
//! | `test_fraction` | `0.20` | held-out share of the dataset |
//! | `stratified` | `true` | stratify the test split and initial pool by class |
//! | `standardize` | `true` | standardize with training-split statistics |
//! | `seeds` | `1,2,3,4,5` | one run per seed |
//! | `output` | | metrics file |
//! | `format` | `csv` | `csv` or `json` |
//! | `summary_output` | | per-stage accuracy summary (CSV) |
//! | `checkpoint_dir` | | per-stage models and pools |
//! | `timing` | `false` | record wall time (breaks byte-identical reruns) |

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::acquisition::Strategy;
use crate::error::{Error, Result};
use crate::experiment::{DataSource, ExperimentConfig};
use crate::losses::DistanceKind;
use crate::numeric::LrSchedule;

const KEYS: &[&str] = &[
    "source",
    "n",
    "noise",
    "classes",
    "spread",
    "csv_path",
    "label_column",
    "data_seed",
    "hidden_dims",
    "max_epochs",
    "batch_size",
    "learning_rate",
    "lr_milestones",
    "lr_decay",
    "distance",
    "use_discrepancy_loss",
    "strategies",
    "initial_fraction",
    "stage_increment",
    "final_fraction",
    "test_fraction",
    "stratified",
    "standardize",
    "seeds",
    "output",
    "format",
    "summary_output",
    "checkpoint_dir",
    "timing",
];

/// Parses a strategy list. `all` expands to the four standard arms. MCDAL
/// labels without an explicit distance or `nodis` take the given defaults.
pub fn parse_strategies(s: &str, distance: DistanceKind, use_discrepancy_loss: bool) -> Result<Vec<Strategy>> {
    let mut out = Vec::new();
    for token in s.split(',').map(str::trim).filter(|t| !t.is_empty()) {
        if token.eq_ignore_ascii_case("all") {
            for arm in Strategy::standard_set() {
                out.push(with_defaults(arm, "mcdal", distance, use_discrepancy_loss));
            }
            continue;
        }
        let arm: Strategy = token.parse()?;
        out.push(with_defaults(arm, token, distance, use_discrepancy_loss));
    }
    if out.is_empty() {
        return Err(Error::config("empty strategy list"));
    }
    Ok(out)
}

fn with_defaults(arm: Strategy, token: &str, distance: DistanceKind, use_dis: bool) -> Strategy {
    let Strategy::Mcdal(mut o) = arm else { return arm };
    let mods: Vec<String> = token.to_ascii_lowercase().split('-').skip(1).map(str::to_owned).collect();
    if !mods.iter().any(|m| matches!(m.as_str(), "l1" | "l2" | "kl")) {
        o.distance = distance;
    }
    if !mods.iter().any(|m| m == "nodis") {
        o.use_discrepancy_loss = o.use_discrepancy_loss && use_dis;
    }
    Strategy::Mcdal(o)
}

/// Comma-separated list; an empty string yields an empty list.
pub fn parse_list<T: FromStr>(s: &str) -> std::result::Result<Vec<T>, T::Err> {
    s.split(',').map(str::trim).filter(|t| !t.is_empty()).map(str::parse).collect()
}

fn parse_bool(s: &str) -> Option<bool> {
    match s.to_ascii_lowercase().as_str() {
        "true" | "yes" | "on" | "1" => Some(true),
        "false" | "no" | "off" | "0" => Some(false),
        _ => None,
    }
}

struct Entry {
    value: String,
    line: usize,
}

struct Reader<'a> {
    path: &'a Path,
    base: &'a Path,
    entries: BTreeMap<String, Entry>,
}

impl Reader<'_> {
    fn err(&self, line: usize, msg: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.to_path_buf(),
            line,
            msg: msg.into(),
        }
    }

    fn get<T>(&self, key: &str, parse: impl FnOnce(&str) -> Option<T>) -> Result<Option<T>> {
        match self.entries.get(key) {
            None => Ok(None),
            Some(e) => parse(&e.value)
                .map(Some)
                .ok_or_else(|| self.err(e.line, format!("bad value `{}` for `{key}`", e.value))),
        }
    }

    fn num<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        self.get(key, |v| v.parse().ok())
    }

    fn flag(&self, key: &str) -> Result<Option<bool>> {
        self.get(key, parse_bool)
    }

    fn path(&self, key: &str) -> Result<Option<PathBuf>> {
        self.get(key, |v| Some(self.base.join(v)))
    }

    fn line(&self, key: &str) -> usize {
        self.entries.get(key).map_or(0, |e| e.line)
    }

    /// Wraps a validation error with the line of `key`.
    fn at<T>(&self, key: &str, r: Result<T>) -> Result<T> {
        r.map_err(|e| self.err(self.line(key), format!("`{key}`: {e}")))
    }
}

/// Parses config text. `path` is used in error messages and as the base for
/// relative paths.
pub fn parse_config(text: &str, path: &Path) -> Result<ExperimentConfig> {
    let base = path.parent().unwrap_or(Path::new(""));
    let mut rd = Reader {
        path,
        base,
        entries: BTreeMap::new(),
    };
    for (k, raw) in text.lines().enumerate() {
        let line = k + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let Some((key, value)) = content.split_once('=') else {
            return Err(rd.err(line, format!("expected `key = value`, got `{content}`")));
        };
        let key = key.trim().to_ascii_lowercase();
        if !KEYS.contains(&key.as_str()) {
            return Err(rd.err(line, format!("unknown key `{key}`")));
        }
        if let Some(prev) = rd.entries.get(&key) {
            return Err(rd.err(line, format!("`{key}` already set on line {}", prev.line)));
        }
        rd.entries.insert(
            key,
            Entry {
                value: value.trim().to_owned(),
                line,
            },
        );
    }

    let mut cfg = ExperimentConfig::default();

    let n: Option<usize> = rd.num("n")?;
    let noise: Option<f64> = rd.num("noise")?;
    let source = rd.get("source", |v| Some(v.to_ascii_lowercase()))?;
    cfg.source = match source.as_deref().unwrap_or("moons") {
        "moons" => DataSource::Moons {
            n: n.unwrap_or(2000),
            noise: noise.unwrap_or(0.25),
        },
        "rings" => DataSource::Rings {
            n: n.unwrap_or(2000),
            noise: noise.unwrap_or(0.25),
        },
        "blobs" => DataSource::Blobs {
            n: n.unwrap_or(2000),
            classes: rd.num("classes")?.unwrap_or(4),
            spread: rd.num("spread")?.unwrap_or(1.0),
        },
        "csv" => DataSource::Csv {
            path: rd
                .path("csv_path")?
                .ok_or_else(|| rd.err(rd.line("source"), "`source = csv` needs `csv_path`"))?,
            label_column: rd.get("label_column", |v| Some(v.to_owned()))?.unwrap_or_else(|| "label".into()),
        },
        other => {
            return Err(rd.err(
                rd.line("source"),
                format!("unknown source `{other}` (expected moons, blobs, rings or csv)"),
            ))
        }
    };
    if let Some(seed) = rd.num("data_seed")? {
        cfg.data_seed = seed;
    }
    if let Some(dims) = rd.get("hidden_dims", |v| parse_list::<usize>(v).ok())? {
        cfg.hidden_dims = dims;
    }

    let t = &mut cfg.train;
    if let Some(v) = rd.num("max_epochs")? {
        t.max_epochs = v;
    }
    if let Some(v) = rd.num("batch_size")? {
        t.batch_size = v;
    }
    let default_lr = LrSchedule::default();
    let rate = rd.num("learning_rate")?.unwrap_or(default_lr.base_rate());
    let milestones = rd
        .get("lr_milestones", |v| parse_list::<f64>(v).ok())?
        .unwrap_or_else(|| default_lr.milestones().to_vec());
    let decay = rd.num("lr_decay")?.unwrap_or(default_lr.decay());
    let key = ["learning_rate", "lr_milestones", "lr_decay"]
        .into_iter()
        .find(|k| rd.entries.contains_key(*k))
        .unwrap_or("learning_rate");
    t.lr_schedule = rd.at(key, LrSchedule::new(rate, milestones, decay))?;
    if let Some(d) = rd.get("distance", |v| v.parse::<DistanceKind>().ok())? {
        t.distance = d;
    }
    if let Some(v) = rd.flag("use_discrepancy_loss")? {
        t.use_discrepancy_loss = v;
    }
    let (distance, use_dis) = (t.distance, t.use_discrepancy_loss);
    let strategies = rd.get("strategies", |v| Some(v.to_owned()))?.unwrap_or_else(|| "all".into());
    cfg.strategies = rd.at("strategies", parse_strategies(&strategies, distance, use_dis))?;

    for (key, slot) in [
        ("initial_fraction", &mut cfg.initial_fraction),
        ("stage_increment", &mut cfg.stage_increment),
        ("final_fraction", &mut cfg.final_fraction),
        ("test_fraction", &mut cfg.test_fraction),
    ] {
        if let Some(v) = rd.num(key)? {
            *slot = v;
        }
    }
    for (key, slot) in [
        ("stratified", &mut cfg.stratified),
        ("standardize", &mut cfg.standardize),
        ("timing", &mut cfg.timing),
    ] {
        if let Some(v) = rd.flag(key)? {
            *slot = v;
        }
    }
    if let Some(seeds) = rd.get("seeds", |v| parse_list::<u64>(v).ok())? {
        cfg.seeds = seeds;
    }
    cfg.output = rd.path("output")?;
    cfg.summary_output = rd.path("summary_output")?;
    cfg.checkpoint_dir = rd.path("checkpoint_dir")?;
    if let Some(f) = rd.get("format", |v| v.parse().ok())? {
        cfg.format = f;
    }

    if let Err(e) = cfg.validate() {
        return Err(rd.err(0, e.to_string()));
    }
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: 0,
        msg: e.to_string(),
    })?;
    parse_config(&text, path)
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

/// Renders a configuration in the file format. Paths are written as given, so
/// the output parses back to the same configuration when read from a file in
/// the current directory or when the paths are absolute.
pub fn render_config(cfg: &ExperimentConfig) -> String {
    let mut s = String::new();
    let mut put = |k: &str, v: String| {
        let _ = writeln!(s, "{k} = {v}");
    };
    put("source", cfg.source.name().into());
    match &cfg.source {
        DataSource::Moons { n, noise } | DataSource::Rings { n, noise } => {
            put("n", n.to_string());
            put("noise", noise.to_string());
        }
        DataSource::Blobs { n, classes, spread } => {
            put("n", n.to_string());
            put("classes", classes.to_string());
            put("spread", spread.to_string());
        }
        DataSource::Csv { path, label_column } => {
            put("csv_path", path.display().to_string());
            put("label_column", label_column.clone());
        }
    }
    put("data_seed", cfg.data_seed.to_string());
    put("hidden_dims", join(&cfg.hidden_dims));
    let t = &cfg.train;
    put("max_epochs", t.max_epochs.to_string());
    put("batch_size", t.batch_size.to_string());
    put("learning_rate", t.lr_schedule.base_rate().to_string());
    put("lr_milestones", join(t.lr_schedule.milestones()));
    put("lr_decay", t.lr_schedule.decay().to_string());
    put("distance", t.distance.to_string());
    put("use_discrepancy_loss", t.use_discrepancy_loss.to_string());
    put("strategies", join(&cfg.strategies.iter().map(explicit_label).collect::<Vec<_>>()));
    put("initial_fraction", cfg.initial_fraction.to_string());
    put("stage_increment", cfg.stage_increment.to_string());
    put("final_fraction", cfg.final_fraction.to_string());
    put("test_fraction", cfg.test_fraction.to_string());
    put("stratified", cfg.stratified.to_string());
    put("standardize", cfg.standardize.to_string());
    put("seeds", join(&cfg.seeds));
    if let Some(p) = &cfg.output {
        put("output", p.display().to_string());
    }
    put("format", cfg.format.to_string());
    if let Some(p) = &cfg.summary_output {
        put("summary_output", p.display().to_string());
    }
    if let Some(p) = &cfg.checkpoint_dir {
        put("checkpoint_dir", p.display().to_string());
    }
    put("timing", cfg.timing.to_string());
    s
}

/// Label with the distance spelled out, so it does not depend on `distance`.
fn explicit_label(s: &Strategy) -> String {
    match s {
        Strategy::Mcdal(o) if o.distance == DistanceKind::L1 => s.label().replacen("mcdal", "mcdal-l1", 1),
        _ => s.label(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::acquisition::McdalOptions;
    use crate::experiment::MetricsFormat;

    fn parse(text: &str) -> Result<ExperimentConfig> {
        parse_config(text, Path::new("exp.cfg"))
    }

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(parse("# nothing\n\n").unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn reads_every_section() {
        let cfg = parse(
            "source = blobs\nn = 400\nclasses = 4 # four blobs\nspread = 1.5\nhidden_dims = 16\n\
             max_epochs = 5\nlearning_rate = 0.05\nlr_milestones =\nstrategies = mcdal, random\n\
             seeds = 7,8\nformat = json\noutput = out/m.json\ntiming = yes\n",
        )
        .unwrap();
        assert_eq!(
            cfg.source,
            DataSource::Blobs {
                n: 400,
                classes: 4,
                spread: 1.5
            }
        );
        assert_eq!(cfg.hidden_dims, vec![16]);
        assert_eq!(cfg.train.max_epochs, 5);
        assert_eq!(cfg.train.lr_schedule, LrSchedule::new(0.05, vec![], 0.2).unwrap());
        assert_eq!(cfg.strategies, vec![Strategy::mcdal(), Strategy::Random]);
        assert_eq!(cfg.seeds, vec![7, 8]);
        assert_eq!(cfg.format, MetricsFormat::Json);
        assert_eq!(cfg.output, Some(PathBuf::from("out/m.json")));
        assert!(cfg.timing);
    }

    #[test]
    fn relative_paths_follow_config_location() {
        let cfg = parse_config("source = csv\ncsv_path = d.csv\n", Path::new("/tmp/exp/a.cfg")).unwrap();
        assert_eq!(
            cfg.source,
            DataSource::Csv {
                path: PathBuf::from("/tmp/exp/d.csv"),
                label_column: "label".into()
            }
        );
    }

    #[test]
    fn distance_default_reaches_plain_mcdal_only() {
        let cfg = parse("distance = kl\nstrategies = mcdal, mcdal-l2, random\n").unwrap();
        let kinds: Vec<Option<DistanceKind>> = cfg
            .strategies
            .iter()
            .map(|s| match s {
                Strategy::Mcdal(o) => Some(o.distance),
                _ => None,
            })
            .collect();
        assert_eq!(kinds, vec![Some(DistanceKind::KL), Some(DistanceKind::L2), None]);
        assert_eq!(cfg.train.distance, DistanceKind::KL);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let cases = [
            ("n = 10\nbogus = 1\n", 2),
            ("max_epochs = ten\n", 1),
            ("\n\njust words\n", 3),
            ("seeds = 1\nseeds = 2\n", 2),
            ("source = parquet\n", 1),
            ("lr_decay = 2\n", 1),
            ("strategies = mcdal-h1\n", 1),
        ];
        for (text, line) in cases {
            match parse(text) {
                Err(Error::Parse { line: l, .. }) => assert_eq!(l, line, "{text:?}"),
                other => panic!("{text:?}: {other:?}"),
            }
        }
    }

    #[test]
    fn cross_field_errors_are_config_errors() {
        let e = parse("stage_increment = 0.07\n").unwrap_err();
        assert!(e.is_config_error());
        assert!(parse("source = csv\n").unwrap_err().is_config_error());
    }

    #[test]
    fn render_round_trips() {
        let mut cfg = ExperimentConfig {
            source: DataSource::Rings { n: 300, noise: 0.1 },
            seeds: vec![3],
            output: Some(PathBuf::from("/abs/m.csv")),
            ..ExperimentConfig::default()
        };
        cfg.strategies.push(Strategy::Mcdal(McdalOptions {
            distance: DistanceKind::L2,
            use_discrepancy_loss: false,
            ..McdalOptions::default()
        }));
        cfg.train.distance = DistanceKind::KL;
        let back = parse_config(&render_config(&cfg), Path::new("x.cfg")).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(parse(&render_config(&ExperimentConfig::default())).unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn all_expands_to_standard_arms() {
        let s = parse_strategies("all", DistanceKind::L1, true).unwrap();
        assert_eq!(s, Strategy::standard_set());
        let s = parse_strategies("all", DistanceKind::L1, false).unwrap();
        assert_eq!(s[0].label(), "mcdal-nodis");
        assert!(parse_strategies(" , ", DistanceKind::L1, true).is_err());
    }
}
