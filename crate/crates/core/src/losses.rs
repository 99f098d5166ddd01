//! Cross-entropy, pairwise distances between probability rows, and the
//! discrepancy loss over the main and auxiliary heads.
//!
//! Every distance is applied to post-softmax probabilities. With heads
//! `p` (main) and `p_1..p_k` (auxiliary), the discrepancy of one sample is
//!
//! ```text
//! Σ_i d(p_i, p) + Σ_{i<j} d(p_i, p_j)
//! ```
//!
//! which for two auxiliary heads is `d(p1,p) + d(p2,p) + d(p1,p2)`. The loss
//! is the batch mean of that quantity.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::Matrix;

/// Floor applied to probabilities before any logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub enum DistanceKind {
    /// `(1/C) Σ |a_c − b_c|`
    #[default]
    L1,
    /// `(1/C) Σ (a_c − b_c)²`
    L2,
    /// `Σ a_c log(a_c / max(b_c, ε))`, i.e. KL(a ‖ b).
    Kl { epsilon: f64 },
}

impl DistanceKind {
    pub const KL: DistanceKind = DistanceKind::Kl { epsilon: PROB_FLOOR };

    pub fn name(&self) -> &'static str {
        match self {
            DistanceKind::L1 => "l1",
            DistanceKind::L2 => "l2",
            DistanceKind::Kl { .. } => "kl",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            DistanceKind::Kl { epsilon } if epsilon.is_nan() || epsilon <= 0.0 => Err(Error::config(format!(
                "KL epsilon must be > 0, got {epsilon}"
            ))),
            _ => Ok(()),
        }
    }
}

impl fmt::Display for DistanceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DistanceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "l1" => Ok(DistanceKind::L1),
            "l2" => Ok(DistanceKind::L2),
            "kl" => Ok(DistanceKind::KL),
            other => Err(Error::config(format!("unknown distance `{other}` (expected l1, l2 or kl)"))),
        }
    }
}

fn check_labels(labels: &[usize], num_classes: usize) -> Result<()> {
    match labels.iter().find(|&&y| y >= num_classes) {
        Some(&label) => Err(Error::LabelOutOfRange { label, num_classes }),
        None => Ok(()),
    }
}

/// Mean over the batch of `−log p[label]`. An empty batch has loss 0.
pub fn cross_entropy(p: &Matrix, labels: &[usize]) -> Result<f64> {
    if p.rows() != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "cross_entropy",
            left: p.shape(),
            right: (labels.len(), 1),
        });
    }
    check_labels(labels, p.cols())?;
    if labels.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| -p.get(i, y).max(PROB_FLOOR).ln())
        .sum();
    Ok(total / labels.len() as f64)
}

/// Gradient of [`cross_entropy`] with respect to the logits that produced `p`.
pub fn cross_entropy_logit_grad(p: &Matrix, labels: &[usize]) -> Result<Matrix> {
    if p.rows() != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "cross_entropy_logit_grad",
            left: p.shape(),
            right: (labels.len(), 1),
        });
    }
    check_labels(labels, p.cols())?;
    let mut g = p.clone();
    let inv = 1.0 / labels.len().max(1) as f64;
    for (i, &y) in labels.iter().enumerate() {
        let row = g.row_mut(i);
        row[y] -= 1.0;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
    Ok(g)
}

pub fn pair_distance(a: &[f64], b: &[f64], kind: DistanceKind) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch {
            op: "pair_distance",
            left: (1, a.len()),
            right: (1, b.len()),
        });
    }
    Ok(distance_unchecked(a, b, kind))
}

#[inline]
fn distance_unchecked(a: &[f64], b: &[f64], kind: DistanceKind) -> f64 {
    let c = a.len() as f64;
    match kind {
        DistanceKind::L1 => a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / c,
        DistanceKind::L2 => a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / c,
        DistanceKind::Kl { epsilon } => a
            .iter()
            .zip(b)
            .map(|(&x, &y)| {
                if x <= 0.0 {
                    0.0
                } else {
                    x * (x.max(epsilon).ln() - y.max(epsilon).ln())
                }
            })
            .sum::<f64>()
            .max(0.0),
    }
}

/// Accumulates `scale · ∂d(a,b)/∂a` into `grad_a` and `scale · ∂d(a,b)/∂b` into `grad_b`.
///
/// The L1 subgradient at `a_c == b_c` is 0.
pub(crate) fn accumulate_distance_grad(
    a: &[f64],
    b: &[f64],
    kind: DistanceKind,
    scale: f64,
    grad_a: Option<&mut [f64]>,
    grad_b: Option<&mut [f64]>,
) {
    let c = a.len() as f64;
    let mut ga = grad_a;
    let mut gb = grad_b;
    for k in 0..a.len() {
        let (da, db) = match kind {
            DistanceKind::L1 => {
                let diff = a[k] - b[k];
                let s = if diff > 0.0 {
                    1.0
                } else if diff < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                (s / c, -s / c)
            }
            DistanceKind::L2 => {
                let diff = a[k] - b[k];
                (2.0 * diff / c, -2.0 * diff / c)
            }
            DistanceKind::Kl { epsilon } => {
                let (x, y) = (a[k], b[k]);
                let da = if x > epsilon {
                    x.ln() - y.max(epsilon).ln() + 1.0
                } else {
                    0.0
                };
                let db = if y > epsilon { -x / y } else { 0.0 };
                (da, db)
            }
        };
        if let Some(g) = ga.as_deref_mut() {
            g[k] += scale * da;
        }
        if let Some(g) = gb.as_deref_mut() {
            g[k] += scale * db;
        }
    }
}

/// Backpropagates a gradient on softmax outputs to the logits, row by row.
pub(crate) fn softmax_backward(p: &Matrix, grad_p: &Matrix) -> Matrix {
    debug_assert_eq!(p.shape(), grad_p.shape());
    let mut out = Matrix::zeros(p.rows(), p.cols());
    for r in 0..p.rows() {
        let (pr, gr) = (p.row(r), grad_p.row(r));
        let dot: f64 = pr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for (o, (pv, gv)) in out.row_mut(r).iter_mut().zip(pr.iter().zip(gr)) {
            *o = pv * (gv - dot);
        }
    }
    out
}

fn check_same_shape(op: &'static str, reference: &Matrix, others: &[&Matrix]) -> Result<()> {
    for m in others {
        if m.shape() != reference.shape() {
            return Err(Error::ShapeMismatch {
                op,
                left: reference.shape(),
                right: m.shape(),
            });
        }
    }
    Ok(())
}

/// Per-sample discrepancy `Σ_i d(p_i, p) + Σ_{i<j} d(p_i, p_j)` between the
/// main head and the auxiliary heads.
pub fn sample_discrepancies(main: &Matrix, aux: &[&Matrix], kind: DistanceKind) -> Result<Vec<f64>> {
    check_same_shape("discrepancy", main, aux)?;
    Ok((0..main.rows())
        .map(|r| {
            let mut total = 0.0;
            for (i, pi) in aux.iter().enumerate() {
                total += distance_unchecked(pi.row(r), main.row(r), kind);
                for pj in &aux[i + 1..] {
                    total += distance_unchecked(pi.row(r), pj.row(r), kind);
                }
            }
            total
        })
        .collect())
}

/// Batch mean of [`sample_discrepancies`] for any number of auxiliary heads.
pub fn discrepancy_loss_multi(main: &Matrix, aux: &[&Matrix], kind: DistanceKind) -> Result<f64> {
    let per = sample_discrepancies(main, aux, kind)?;
    if per.is_empty() {
        return Ok(0.0);
    }
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

/// `mean[d(p1,p) + d(p2,p) + d(p1,p2)]`.
pub fn discrepancy_loss(p: &Matrix, p1: &Matrix, p2: &Matrix, kind: DistanceKind) -> Result<f64> {
    discrepancy_loss_multi(p, &[p1, p2], kind)
}

/// Gradient of [`discrepancy_loss_multi`] with respect to each auxiliary
/// head's probabilities. The main head is treated as a constant.
pub(crate) fn discrepancy_prob_grads(main: &Matrix, aux: &[&Matrix], kind: DistanceKind) -> Vec<Matrix> {
    let n = main.rows();
    let scale = 1.0 / n.max(1) as f64;
    let mut grads: Vec<Matrix> = aux.iter().map(|_| Matrix::zeros(n, main.cols())).collect();
    for r in 0..n {
        for i in 0..aux.len() {
            accumulate_distance_grad(
                aux[i].row(r),
                main.row(r),
                kind,
                scale,
                Some(grads[i].row_mut(r)),
                None,
            );
            for j in i + 1..aux.len() {
                let (lo, hi) = grads.split_at_mut(j);
                accumulate_distance_grad(
                    aux[i].row(r),
                    aux[j].row(r),
                    kind,
                    scale,
                    Some(lo[i].row_mut(r)),
                    Some(hi[0].row_mut(r)),
                );
            }
        }
    }
    grads
}
