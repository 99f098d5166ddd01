//! `mcdal`: run active-learning experiments, generate synthetic data, and dump
//! acquisition scores for a saved model.
//!
//! Exit codes: 0 on success, 1 for bad arguments or configuration, 2 when a
//! run fails.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{error::ErrorKind, Args, Parser, Subcommand, ValueEnum};
use mcdal_core::config::{load_config, parse_list, parse_strategies, render_config};
use mcdal_core::data::{load_csv, make_blobs, make_moons, make_rings, Pool, PoolSnapshot};
use mcdal_core::experiment::{score_pool, write_metrics_csv, write_metrics_json, SummaryRow};
use mcdal_core::{
    acquisition, run_experiment, DistanceKind, Error, ExperimentConfig, MetricsFormat, Rng, Strategy,
    ThreeHeadClassifier,
};

#[derive(Parser)]
#[command(name = "mcdal", version, about = "Pool-based active learning with auxiliary-head discrepancy")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the multi-stage protocol over seeds and strategies.
    Run(RunArgs),
    /// Write a synthetic dataset to CSV.
    GenData(GenArgs),
    /// Score the unlabeled part of a pool with a saved model.
    Score(ScoreArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Flat key = value config file. Defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Metrics file. Without it the metrics go to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Metrics format; inferred from a `.json` extension on --out otherwise.
    #[arg(long, value_enum)]
    format: Option<Format>,
    /// Comma-separated seeds, e.g. "1,2,3".
    #[arg(long)]
    seeds: Option<String>,
    /// Comma-separated strategies: mcdal, random, entropy, margin, all, or
    /// mcdal variants such as mcdal-l2, mcdal-nodis, mcdal-h3, mcdal-2term.
    #[arg(long)]
    strategy: Option<String>,
    /// Distance for training and for every MCDAL arm.
    #[arg(long, value_enum)]
    distance: Option<Distance>,
    /// Epochs per stage.
    #[arg(long)]
    epochs: Option<usize>,
    /// Per-stage accuracy summary (CSV).
    #[arg(long)]
    summary: Option<PathBuf>,
    /// Save each stage's model and pool here, for `score`.
    #[arg(long)]
    checkpoint_dir: Option<PathBuf>,
    /// Record wall time per stage.
    #[arg(long)]
    timing: bool,
    /// Print the resolved configuration and exit.
    #[arg(long)]
    print_config: bool,
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, value_enum, default_value_t = Kind::Moons)]
    kind: Kind,
    /// Total samples (split evenly across classes for blobs).
    #[arg(long, default_value_t = 2000)]
    n: usize,
    /// Noise for moons and rings.
    #[arg(long, default_value_t = 0.25)]
    noise: f64,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    /// Blob standard deviation.
    #[arg(long, default_value_t = 1.0)]
    spread: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "label")]
    label_column: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ScoreArgs {
    /// Model checkpoint (JSON) as written by `run --checkpoint-dir`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Training data in the model's feature space, e.g. `seed<k>_train.csv`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "label")]
    label_column: String,
    /// Pool partition (JSON with `labeled` and `unlabeled` index lists).
    #[arg(long)]
    pool: PathBuf,
    #[arg(long, default_value = "mcdal")]
    strategy: String,
    /// Seed for the random baseline.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Scores CSV; stdout if omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Clone, Copy, ValueEnum)]
enum Distance {
    L1,
    L2,
    Kl,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Moons,
    Blobs,
    Rings,
}

impl From<Format> for MetricsFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Csv => MetricsFormat::Csv,
            Format::Json => MetricsFormat::Json,
        }
    }
}

impl From<Distance> for DistanceKind {
    fn from(d: Distance) -> Self {
        match d {
            Distance::L1 => DistanceKind::L1,
            Distance::L2 => DistanceKind::L2,
            Distance::Kl => DistanceKind::KL,
        }
    }
}

fn resolve_run_config(args: &RunArgs) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &args.config {
        Some(path) => load_config(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(list) = &args.strategy {
        cfg.strategies = parse_strategies(list, cfg.train.distance, cfg.train.use_discrepancy_loss)?;
    }
    if let Some(d) = args.distance {
        cfg.set_distance(d.into());
    }
    if let Some(seeds) = &args.seeds {
        cfg.seeds = parse_list(seeds).map_err(|_| Error::InvalidConfig(format!("bad seed list `{seeds}`")))?;
    }
    if let Some(e) = args.epochs {
        cfg.train.max_epochs = e;
    }
    if let Some(out) = &args.out {
        cfg.output = Some(out.clone());
        if args.format.is_none() {
            let json = out.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
            cfg.format = if json { MetricsFormat::Json } else { MetricsFormat::Csv };
        }
    }
    if let Some(f) = args.format {
        cfg.format = f.into();
    }
    if let Some(s) = &args.summary {
        cfg.summary_output = Some(s.clone());
    }
    if let Some(d) = &args.checkpoint_dir {
        cfg.checkpoint_dir = Some(d.clone());
    }
    cfg.timing |= args.timing;
    cfg.validate()?;
    Ok(cfg)
}

fn print_summary(rows: &[SummaryRow]) {
    let mut err = io::stderr().lock();
    let _ = writeln!(err, "{:<16} {:>5} {:>9} {:>9} {:>8}", "strategy", "stage", "labeled", "accuracy", "std");
    for r in rows {
        let _ = writeln!(
            err,
            "{:<16} {:>5} {:>8.1}% {:>8.2}% {:>7.2}%",
            r.strategy,
            r.stage,
            100.0 * r.labeled_fraction,
            100.0 * r.mean_accuracy,
            100.0 * r.std_accuracy
        );
    }
}

fn run(args: RunArgs) -> Result<(), Error> {
    let cfg = resolve_run_config(&args)?;
    if args.print_config {
        print!("{}", render_config(&cfg));
        return Ok(());
    }
    let res = run_experiment(&cfg)?;
    if cfg.output.is_none() {
        let mut out = io::stdout().lock();
        match cfg.format {
            MetricsFormat::Csv => write_metrics_csv(&res.records, &mut out)?,
            MetricsFormat::Json => write_metrics_json(&res.records, &mut out)?,
        }
        out.flush()?;
    }
    print_summary(&res.summary);
    Ok(())
}

fn gen_data(args: GenArgs) -> Result<(), Error> {
    let mut rng = Rng::new(args.seed);
    let ds = match args.kind {
        Kind::Moons => make_moons(args.n, args.noise, &mut rng)?,
        Kind::Rings => make_rings(args.n, args.noise, &mut rng)?,
        Kind::Blobs => {
            if args.classes == 0 || !args.n.is_multiple_of(args.classes) {
                return Err(Error::InvalidConfig(format!(
                    "--n {} is not a multiple of --classes {}",
                    args.n, args.classes
                )));
            }
            make_blobs(args.n / args.classes, args.classes, None, args.spread, &mut rng)?
        }
    };
    ds.write_csv(&args.out, &args.label_column)
}

fn writer(path: Option<&Path>) -> io::Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(io::stdout().lock()),
    })
}

fn score(args: ScoreArgs) -> Result<(), Error> {
    let strategy: Strategy = args.strategy.parse()?;
    let model = ThreeHeadClassifier::load(&args.checkpoint)?;
    let data = load_csv(&args.data, &args.label_column, false)?;
    if data.input_dim() != model.spec().input_dim {
        return Err(Error::InvalidConfig(format!(
            "{} has {} feature columns but the model expects {}",
            args.data.display(),
            data.input_dim(),
            model.spec().input_dim
        )));
    }
    if let Strategy::Mcdal(o) = &strategy {
        if o.aux_heads != model.num_aux_heads() {
            return Err(Error::InvalidConfig(format!(
                "strategy {strategy} needs {} auxiliary heads, the model has {}",
                o.aux_heads,
                model.num_aux_heads()
            )));
        }
    }
    let snap: PoolSnapshot = serde_json::from_slice(&std::fs::read(&args.pool)?)?;
    let pool = Pool::from_snapshot(Arc::new(data), &snap)?;
    let scores = score_pool(&model, &pool, &strategy, &mut Rng::new(args.seed))?;
    acquisition::write_scores_csv(&scores, writer(args.out.as_deref())?)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let result = match cli.command {
        Command::Run(a) => run(a),
        Command::GenData(a) => gen_data(a),
        Command::Score(a) => score(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config_error() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
