//! Sample acquisition: discrepancy scoring relative to the labeled pool,
//! top-`b` selection, uncertainty baselines, and disagreement diagnostics.
//!
//! For a sample `x` with main-head probabilities `p` and auxiliary
//! probabilities `p_1..p_k`, the total discrepancy is
//!
//! ```text
//! D(x) = Σ_{i<j} d(p_i, p_j) + Σ_i d(p, p_i)
//! ```
//!
//! and the score of an unlabeled sample is `S(x) = |D(x) − mean_{x_l ∈ labeled} D(x_l)|`.
//! Samples whose discrepancy sits far below the labeled average therefore
//! score as highly as those far above it.
//!
//! The disagreement diagnostics are empirical stand-ins for the H∆H
//! divergence between the labeled and unlabeled pools, computed from the
//! argmax predictions of the first two auxiliary heads:
//!
//! ```text
//! gap  = | rate_labeled − rate_unlabeled |
//! rate = fraction of samples where argmax F1∘G(x) ≠ argmax F2∘G(x)
//! ```
//!
//! The supremum over hypothesis pairs in the divergence itself, and the
//! source/target risks and joint-error constant of the adaptation bound it
//! appears in, are not computable here and are not estimated.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{pair_distance, DistanceKind};
use crate::model::{ForwardRecord, ThreeHeadClassifier, DEFAULT_AUX_HEADS};
use crate::numeric::{Matrix, Rng};

/// Rows per forward pass when scoring large pools.
const SCORING_BATCH: usize = 512;

/// Which pairs enter `D(x)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum PairTerms {
    /// Every auxiliary pair plus every (main, auxiliary) pair.
    #[default]
    All,
    /// Auxiliary pairs only, i.e. `d(p1, p2)` with two heads.
    AuxOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum ScoreMode {
    /// `|D(x) − labeled mean|`.
    #[default]
    RelativeToLabeled,
    /// `D(x)` itself.
    Raw,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McdalOptions {
    pub distance: DistanceKind,
    pub use_discrepancy_loss: bool,
    pub aux_heads: usize,
    pub terms: PairTerms,
    pub mode: ScoreMode,
}

impl Default for McdalOptions {
    fn default() -> Self {
        McdalOptions {
            distance: DistanceKind::L1,
            use_discrepancy_loss: true,
            aux_heads: DEFAULT_AUX_HEADS,
            terms: PairTerms::All,
            mode: ScoreMode::RelativeToLabeled,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Strategy {
    Mcdal(McdalOptions),
    Random,
    /// Entropy of the main head.
    Entropy,
    /// `1 − (top1 − top2)` of the main head.
    Margin,
}

impl Strategy {
    pub fn mcdal() -> Self {
        Strategy::Mcdal(McdalOptions::default())
    }

    /// The four standard arms.
    pub fn standard_set() -> Vec<Strategy> {
        vec![Strategy::mcdal(), Strategy::Random, Strategy::Entropy, Strategy::Margin]
    }

    /// Canonical label, e.g. `mcdal`, `mcdal-kl-nodis`, `random`.
    pub fn label(&self) -> String {
        match self {
            Strategy::Random => "random".into(),
            Strategy::Entropy => "entropy".into(),
            Strategy::Margin => "margin".into(),
            Strategy::Mcdal(o) => {
                let mut s = String::from("mcdal");
                if o.distance != DistanceKind::L1 {
                    s.push('-');
                    s.push_str(o.distance.name());
                }
                if !o.use_discrepancy_loss {
                    s.push_str("-nodis");
                }
                if o.aux_heads != DEFAULT_AUX_HEADS {
                    s.push_str(&format!("-h{}", o.aux_heads));
                }
                if o.terms == PairTerms::AuxOnly {
                    s.push_str("-2term");
                }
                if o.mode == ScoreMode::Raw {
                    s.push_str("-raw");
                }
                s
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Strategy::Mcdal(o) = self {
            o.distance.validate()?;
            if o.aux_heads < 2 {
                return Err(Error::config(format!(
                    "{}: need at least 2 auxiliary heads",
                    self.label()
                )));
            }
        }
        Ok(())
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    /// Accepts `random`, `entropy`, `margin`, or `mcdal` followed by any of the
    /// dash-separated modifiers `l1|l2|kl`, `nodis`, `h<k>`, `2term|3term`, `raw`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        let mut parts = s.split('-');
        match parts.next() {
            Some("random") | Some("entropy") | Some("margin") if s.contains('-') => {
                Err(Error::config(format!("baseline `{s}` takes no modifiers")))
            }
            Some("random") => Ok(Strategy::Random),
            Some("entropy") => Ok(Strategy::Entropy),
            Some("margin") => Ok(Strategy::Margin),
            Some("mcdal") => {
                let mut o = McdalOptions::default();
                for part in parts {
                    match part {
                        "l1" | "l2" | "kl" => o.distance = part.parse()?,
                        "nodis" => o.use_discrepancy_loss = false,
                        "2term" => o.terms = PairTerms::AuxOnly,
                        "3term" => o.terms = PairTerms::All,
                        "raw" => o.mode = ScoreMode::Raw,
                        h if h.starts_with('h') => {
                            o.aux_heads = h[1..].parse().map_err(|_| {
                                Error::config(format!("bad head count `{h}` in `{s}`"))
                            })?;
                        }
                        other => {
                            return Err(Error::config(format!("unknown mcdal modifier `{other}` in `{s}`")))
                        }
                    }
                }
                let strat = Strategy::Mcdal(o);
                strat.validate()?;
                Ok(strat)
            }
            _ => Err(Error::config(format!(
                "unknown strategy `{s}` (expected mcdal, random, entropy or margin)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AcquisitionScore {
    /// Index into the training set (the pool's index space).
    pub sample_index: usize,
    pub d_total: f64,
    pub score: f64,
}

/// Per-sample `D(x)` from one forward record.
pub fn total_discrepancy(record: &ForwardRecord, kind: DistanceKind, terms: PairTerms) -> Result<Vec<f64>> {
    let aux = &record.p_aux;
    for p in aux {
        if p.shape() != record.p.shape() {
            return Err(Error::ShapeMismatch {
                op: "total_discrepancy",
                left: record.p.shape(),
                right: p.shape(),
            });
        }
    }
    let mut out = Vec::with_capacity(record.batch_size());
    for r in 0..record.batch_size() {
        let mut d = 0.0;
        for i in 0..aux.len() {
            for j in i + 1..aux.len() {
                d += pair_distance(aux[i].row(r), aux[j].row(r), kind)?;
            }
            if terms == PairTerms::All {
                d += pair_distance(record.p.row(r), aux[i].row(r), kind)?;
            }
        }
        out.push(d);
    }
    Ok(out)
}

fn for_each_batch(model: &ThreeHeadClassifier, x: &Matrix, mut f: impl FnMut(&ForwardRecord) -> Result<()>) -> Result<()> {
    let mut start = 0;
    while start < x.rows() {
        let end = (start + SCORING_BATCH).min(x.rows());
        let idx: Vec<usize> = (start..end).collect();
        f(&model.forward(&x.gather_rows(&idx))?)?;
        start = end;
    }
    Ok(())
}

/// `D(x)` for every row of `x`, computed in batches.
pub fn discrepancies(model: &ThreeHeadClassifier, x: &Matrix, kind: DistanceKind, terms: PairTerms) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(x.rows());
    for_each_batch(model, x, |rec| {
        out.extend(total_discrepancy(rec, kind, terms)?);
        Ok(())
    })?;
    Ok(out)
}

/// Mean `D(x)` over the whole labeled pool.
pub fn labeled_mean_discrepancy(model: &ThreeHeadClassifier, labeled_x: &Matrix, kind: DistanceKind, terms: PairTerms) -> Result<f64> {
    if labeled_x.rows() == 0 {
        return Err(Error::EmptyPool("labeled"));
    }
    let d = discrepancies(model, labeled_x, kind, terms)?;
    Ok(d.iter().sum::<f64>() / d.len() as f64)
}

fn check_indices(x: &Matrix, indices: &[usize]) -> Result<()> {
    if x.rows() == 0 {
        return Err(Error::EmptyPool("unlabeled"));
    }
    if indices.len() != x.rows() {
        return Err(Error::ShapeMismatch {
            op: "scores",
            left: x.shape(),
            right: (indices.len(), 1),
        });
    }
    Ok(())
}

/// Scores every unlabeled row. `indices[k]` is the pool index of row `k`.
pub fn mcdal_scores(
    model: &ThreeHeadClassifier,
    unlabeled_x: &Matrix,
    indices: &[usize],
    labeled_mean: f64,
    options: &McdalOptions,
) -> Result<Vec<AcquisitionScore>> {
    check_indices(unlabeled_x, indices)?;
    let d = discrepancies(model, unlabeled_x, options.distance, options.terms)?;
    Ok(indices
        .iter()
        .zip(d)
        .map(|(&sample_index, d_total)| AcquisitionScore {
            sample_index,
            d_total,
            score: match options.mode {
                ScoreMode::RelativeToLabeled => (d_total - labeled_mean).abs(),
                ScoreMode::Raw => d_total,
            },
        })
        .collect())
}

fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>()
}

fn margin(p: &[f64]) -> f64 {
    let (mut top1, mut top2) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for &v in p {
        if v > top1 {
            top2 = top1;
            top1 = v;
        } else if v > top2 {
            top2 = v;
        }
    }
    1.0 - (top1 - top2)
}

/// Scores for the baseline strategies. `d_total` carries the default `D(x)`
/// for inspection; only `score` drives selection. Random scores are uniform
/// draws from `rng`, one per row in order.
pub fn baseline_scores(
    model: &ThreeHeadClassifier,
    unlabeled_x: &Matrix,
    indices: &[usize],
    strategy: &Strategy,
    rng: &mut Rng,
) -> Result<Vec<AcquisitionScore>> {
    check_indices(unlabeled_x, indices)?;
    let mut out = Vec::with_capacity(indices.len());
    let mut k = 0;
    for_each_batch(model, unlabeled_x, |rec| {
        let d = total_discrepancy(rec, DistanceKind::L1, PairTerms::All)?;
        for (r, d_total) in d.into_iter().enumerate() {
            let p = rec.p.row(r);
            let score = match strategy {
                Strategy::Random => rng.uniform(),
                Strategy::Entropy => entropy(p),
                Strategy::Margin => margin(p),
                Strategy::Mcdal(_) => {
                    return Err(Error::config("mcdal is not a baseline strategy"));
                }
            };
            out.push(AcquisitionScore {
                sample_index: indices[k],
                d_total,
                score,
            });
            k += 1;
        }
        Ok(())
    })?;
    Ok(out)
}

/// The `b` highest-scoring sample indices, best first. Equal scores are
/// ordered by ascending sample index.
pub fn select_top(scores: &[AcquisitionScore], b: usize) -> Result<Vec<usize>> {
    if b > scores.len() {
        return Err(Error::Budget {
            requested: b,
            available: scores.len(),
        });
    }
    let mut order: Vec<&AcquisitionScore> = scores.iter().collect();
    order.sort_by(|a, c| c.score.total_cmp(&a.score).then(a.sample_index.cmp(&c.sample_index)));
    Ok(order[..b].iter().map(|s| s.sample_index).collect())
}

/// Fraction of rows where the first two auxiliary heads predict different classes.
pub fn disagreement_rate(model: &ThreeHeadClassifier, x: &Matrix) -> Result<f64> {
    if x.rows() == 0 {
        return Err(Error::EmptyPool("disagreement"));
    }
    let mut differ = 0usize;
    for_each_batch(model, x, |rec| {
        let a = rec.logits_aux[0].argmax_rows();
        let b = rec.logits_aux[1].argmax_rows();
        differ += a.iter().zip(&b).filter(|(u, v)| u != v).count();
        Ok(())
    })?;
    Ok(differ as f64 / x.rows() as f64)
}

pub fn unlabeled_disagreement_rate(model: &ThreeHeadClassifier, unlabeled_x: &Matrix) -> Result<f64> {
    if unlabeled_x.rows() == 0 {
        return Err(Error::EmptyPool("unlabeled"));
    }
    disagreement_rate(model, unlabeled_x)
}

pub fn empirical_hdh_gap(model: &ThreeHeadClassifier, labeled_x: &Matrix, unlabeled_x: &Matrix) -> Result<f64> {
    if labeled_x.rows() == 0 {
        return Err(Error::EmptyPool("labeled"));
    }
    if unlabeled_x.rows() == 0 {
        return Err(Error::EmptyPool("unlabeled"));
    }
    Ok((disagreement_rate(model, labeled_x)? - disagreement_rate(model, unlabeled_x)?).abs())
}

/// CSV with columns `sample_index,d_total,score`.
pub fn write_scores_csv<W: Write>(scores: &[AcquisitionScore], w: W) -> Result<()> {
    let mut w = std::io::BufWriter::new(w);
    writeln!(w, "sample_index,d_total,score")?;
    for s in scores {
        writeln!(w, "{},{:.16e},{:.16e}", s.sample_index, s.d_total, s.score)?;
    }
    w.flush()?;
    Ok(())
}
