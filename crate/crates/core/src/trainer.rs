//! Adversarial training of the auxiliary heads.
//!
//! One epoch is a full pass over the labeled set in mini-batches. Each labeled
//! batch is followed by one unlabeled batch:
//!
//! 1. cross-entropy on the labeled batch, descent on `G`, `F` and every
//!    auxiliary head (auxiliary gradients stop at the features);
//! 2. discrepancy loss on the unlabeled batch, ascent on the auxiliary heads only.
//!
//! Both steps use the same scheduled learning rate. Unlabeled batches have the
//! labeled batch size and cycle through a reshuffled unlabeled set as needed.

use serde::{Deserialize, Serialize};

use crate::data::LabeledData;
use crate::error::{Error, Result};
use crate::losses::{self, DistanceKind};
use crate::model::ThreeHeadClassifier;
use crate::numeric::{shuffle_indices, Direction, LrSchedule, Matrix, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub batch_size: usize,
    pub lr_schedule: LrSchedule,
    pub distance: DistanceKind,
    pub use_discrepancy_loss: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_epochs: 100,
            batch_size: 32,
            lr_schedule: LrSchedule::default(),
            distance: DistanceKind::L1,
            use_discrepancy_loss: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_epochs == 0 {
            return Err(Error::config("max_epochs must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be >= 1"));
        }
        self.distance.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub learning_rate: f64,
    /// Mean main-head cross-entropy over the epoch's labeled batches.
    pub ce_loss: f64,
    /// Mean auxiliary-head cross-entropy, averaged over heads.
    pub aux_ce_loss: f64,
    /// Mean discrepancy loss over the epoch's unlabeled batches, if any ran.
    pub dis_loss: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
}

/// Cycles through a reshuffled index set in fixed-size batches.
struct BatchCycler {
    n: usize,
    perm: Vec<usize>,
    pos: usize,
    rng: Rng,
}

impl BatchCycler {
    fn new(n: usize, rng: Rng) -> Self {
        BatchCycler {
            n,
            perm: Vec::new(),
            pos: 0,
            rng,
        }
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let size = size.min(self.n);
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos == self.perm.len() {
                self.perm = shuffle_indices(self.n, &mut self.rng);
                self.pos = 0;
            }
            let take = (size - out.len()).min(self.perm.len() - self.pos);
            out.extend_from_slice(&self.perm[self.pos..self.pos + take]);
            self.pos += take;
        }
        out
    }
}

/// One supervised step on every head. Returns (main CE, mean auxiliary CE) before the update.
pub fn supervised_step(model: &mut ThreeHeadClassifier, x: &Matrix, labels: &[usize], rate: f64) -> Result<(f64, f64)> {
    let record = model.forward(x)?;
    let ce = losses::cross_entropy(&record.p, labels)?;
    let mut aux_ce = 0.0;
    for p in &record.p_aux {
        aux_ce += losses::cross_entropy(p, labels)?;
    }
    aux_ce /= record.p_aux.len() as f64;
    let grads = model.backward_ce_all(&record, x, labels)?;
    model.apply(&grads, rate, Direction::Descent)?;
    Ok((ce, aux_ce))
}

/// Gradient ascent on the discrepancy loss for the auxiliary heads. Returns the loss before the update.
pub fn discrepancy_ascent_step(model: &mut ThreeHeadClassifier, x: &Matrix, rate: f64, kind: DistanceKind) -> Result<f64> {
    if x.rows() == 0 {
        return Err(Error::EmptyPool("unlabeled batch"));
    }
    let record = model.forward(x)?;
    let loss = losses::discrepancy_loss_multi(&record.p, &record.aux_refs(), kind)?;
    let grads = model.backward_dis(&record, kind)?;
    model.apply(&grads, rate, Direction::Ascent)?;
    Ok(loss)
}

fn finite(v: f64, what: &'static str, epoch: usize) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite { what, epoch })
    }
}

/// A non-finite intermediate during a step means training diverged.
fn at_epoch(e: Error, epoch: usize) -> Error {
    match e {
        Error::NonFiniteValue { .. } => Error::NonFinite {
            what: "gradients or activations",
            epoch,
        },
        other => other,
    }
}

pub fn train(
    model: &mut ThreeHeadClassifier,
    labeled: &LabeledData,
    unlabeled: &Matrix,
    cfg: &TrainConfig,
    rng: &Rng,
) -> Result<TrainLog> {
    cfg.validate()?;
    if labeled.is_empty() {
        return Err(Error::EmptyPool("labeled"));
    }
    let mut labeled_rng = rng.fork_named("labeled-batches");
    let mut unlabeled_batches = BatchCycler::new(unlabeled.rows(), rng.fork_named("unlabeled-batches"));
    let run_dis = cfg.use_discrepancy_loss && unlabeled.rows() > 0;
    let mut log = TrainLog::default();

    for epoch in 0..cfg.max_epochs {
        let rate = cfg.lr_schedule.rate(epoch, cfg.max_epochs);
        let perm = shuffle_indices(labeled.len(), &mut labeled_rng);
        let (mut ce_sum, mut aux_sum, mut dis_sum) = (0.0, 0.0, 0.0);
        let mut batches = 0usize;
        for chunk in perm.chunks(cfg.batch_size) {
            let xb = labeled.x.gather_rows(chunk);
            let yb: Vec<usize> = chunk.iter().map(|&i| labeled.y[i]).collect();
            let (ce, aux_ce) = supervised_step(model, &xb, &yb, rate).map_err(|e| at_epoch(e, epoch))?;
            ce_sum += ce;
            aux_sum += aux_ce;
            if run_dis {
                let ub = unlabeled.gather_rows(&unlabeled_batches.next_batch(cfg.batch_size));
                dis_sum += discrepancy_ascent_step(model, &ub, rate, cfg.distance).map_err(|e| at_epoch(e, epoch))?;
            }
            batches += 1;
        }
        let n = batches as f64;
        let entry = EpochLog {
            epoch,
            learning_rate: rate,
            ce_loss: finite(ce_sum / n, "cross-entropy", epoch)?,
            aux_ce_loss: finite(aux_sum / n, "auxiliary cross-entropy", epoch)?,
            dis_loss: if run_dis {
                Some(finite(dis_sum / n, "discrepancy loss", epoch)?)
            } else {
                None
            },
        };
        if !model.is_finite() {
            return Err(Error::NonFinite {
                what: "parameters",
                epoch,
            });
        }
        log.epochs.push(entry);
    }
    Ok(log)
}

/// Runs only the discrepancy-ascent half of training: `max_epochs` passes over
/// the unlabeled set. The task model (`G` and `F`) is never touched.
pub fn train_discrepancy_only(
    model: &mut ThreeHeadClassifier,
    unlabeled: &Matrix,
    cfg: &TrainConfig,
    rng: &Rng,
) -> Result<TrainLog> {
    cfg.validate()?;
    if unlabeled.rows() == 0 {
        return Err(Error::EmptyPool("unlabeled"));
    }
    let mut batches = BatchCycler::new(unlabeled.rows(), rng.fork_named("unlabeled-batches"));
    let per_epoch = unlabeled.rows().div_ceil(cfg.batch_size);
    let mut log = TrainLog::default();
    for epoch in 0..cfg.max_epochs {
        let rate = cfg.lr_schedule.rate(epoch, cfg.max_epochs);
        let mut sum = 0.0;
        for _ in 0..per_epoch {
            let ub = unlabeled.gather_rows(&batches.next_batch(cfg.batch_size));
            sum += discrepancy_ascent_step(model, &ub, rate, cfg.distance).map_err(|e| at_epoch(e, epoch))?;
        }
        log.epochs.push(EpochLog {
            epoch,
            learning_rate: rate,
            ce_loss: 0.0,
            aux_ce_loss: 0.0,
            dis_loss: Some(finite(sum / per_epoch as f64, "discrepancy loss", epoch)?),
        });
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::MlpSpec;

    fn toy(n: usize, seed: u64) -> (LabeledData, Matrix) {
        let mut rng = Rng::new(seed);
        let mut x = Vec::new();
        let mut y = Vec::new();
        for i in 0..n {
            let label = i % 2;
            let shift = if label == 0 { -2.0 } else { 2.0 };
            x.push(shift + 0.3 * rng.normal());
            x.push(0.5 * rng.normal());
            y.push(label);
        }
        let x = Matrix::from_vec(n, 2, x).unwrap();
        let u = Matrix::from_vec(8, 2, (0..16).map(|_| rng.normal()).collect()).unwrap();
        (LabeledData::new(x, y, 2).unwrap(), u)
    }

    fn small_model(seed: u64) -> ThreeHeadClassifier {
        ThreeHeadClassifier::init(&MlpSpec::new(2, vec![8], 2).unwrap(), &Rng::new(seed)).unwrap()
    }

    #[test]
    fn cycler_wraps_and_covers() {
        let mut c = BatchCycler::new(5, Rng::new(0));
        let a = c.next_batch(3);
        let b = c.next_batch(3);
        assert_eq!(a.len(), 3);
        assert_eq!(b.len(), 3);
        let mut first_pass: Vec<usize> = a.iter().chain(&b[..2]).copied().collect();
        first_pass.sort_unstable();
        assert_eq!(first_pass, vec![0, 1, 2, 3, 4]);
        assert_eq!(BatchCycler::new(2, Rng::new(0)).next_batch(10).len(), 2);
    }

    #[test]
    fn empty_unlabeled_is_plain_supervised() {
        let (l, _) = toy(20, 1);
        let mut model = small_model(2);
        let before = model.clone();
        let log = train(&mut model, &l, &Matrix::zeros(0, 2), &TrainConfig { max_epochs: 1, ..Default::default() }, &Rng::new(3)).unwrap();
        assert_eq!(log.epochs.len(), 1);
        assert!(log.epochs[0].dis_loss.is_none());
        assert_ne!(model.task_params_bytes(), before.task_params_bytes());
    }

    #[test]
    fn empty_labeled_rejected() {
        let l = LabeledData::new(Matrix::zeros(0, 2), vec![], 2).unwrap();
        let mut model = small_model(2);
        let r = train(&mut model, &l, &Matrix::zeros(3, 2), &TrainConfig::default(), &Rng::new(3));
        assert!(matches!(r, Err(Error::EmptyPool(_))));
    }

    #[test]
    fn disabling_discrepancy_matches_ce_only_trajectory() {
        let (l, u) = toy(24, 4);
        let cfg = TrainConfig {
            max_epochs: 5,
            use_discrepancy_loss: false,
            ..Default::default()
        };
        let mut a = small_model(5);
        let mut b = small_model(5);
        train(&mut a, &l, &u, &cfg, &Rng::new(6)).unwrap();
        train(&mut b, &l, &Matrix::zeros(0, 2), &cfg, &Rng::new(6)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn discrepancy_never_changes_task_model() {
        let (l, u) = toy(24, 4);
        let cfg = TrainConfig {
            max_epochs: 5,
            ..Default::default()
        };
        let mut with = small_model(5);
        let mut without = small_model(5);
        train(&mut with, &l, &u, &cfg, &Rng::new(6)).unwrap();
        train(&mut without, &l, &u, &TrainConfig { use_discrepancy_loss: false, ..cfg.clone() }, &Rng::new(6)).unwrap();
        assert_eq!(with.task_params_bytes(), without.task_params_bytes());
        assert_ne!(with.aux_head(0), without.aux_head(0));
    }

    #[test]
    fn zero_rate_ascent_is_noop() {
        let (_, u) = toy(4, 4);
        let mut m = small_model(1);
        let before = m.clone();
        discrepancy_ascent_step(&mut m, &u, 0.0, DistanceKind::L1).unwrap();
        assert_eq!(m, before);
    }

    #[test]
    fn ascent_does_not_decrease_loss_at_small_rate() {
        let (_, u) = toy(4, 4);
        for seed in 0..10 {
            let mut m = small_model(seed);
            let before = discrepancy_ascent_step(&mut m, &u, 1e-4, DistanceKind::L1).unwrap();
            let rec = m.forward(&u).unwrap();
            let after = losses::discrepancy_loss_multi(&rec.p, &rec.aux_refs(), DistanceKind::L1).unwrap();
            assert!(after - before > -1e-10, "seed {seed}: {before} -> {after}");
        }
    }

    #[test]
    fn repeated_ascent_increases_loss() {
        let (_, u) = toy(4, 4);
        let mut m = small_model(9);
        let first = discrepancy_ascent_step(&mut m, &u, 1e-2, DistanceKind::L1).unwrap();
        for _ in 0..49 {
            discrepancy_ascent_step(&mut m, &u, 1e-2, DistanceKind::L1).unwrap();
        }
        let rec = m.forward(&u).unwrap();
        let last = losses::discrepancy_loss_multi(&rec.p, &rec.aux_refs(), DistanceKind::L1).unwrap();
        assert!(last > first, "{first} -> {last}");
    }

    #[test]
    fn training_is_deterministic() {
        let (l, u) = toy(30, 7);
        let cfg = TrainConfig {
            max_epochs: 4,
            batch_size: 7,
            ..Default::default()
        };
        let mut a = small_model(1);
        let mut b = small_model(1);
        let la = train(&mut a, &l, &u, &cfg, &Rng::new(8)).unwrap();
        let lb = train(&mut b, &l, &u, &cfg, &Rng::new(8)).unwrap();
        assert_eq!(a, b);
        assert_eq!(la, lb);
        assert!(la.epochs.iter().all(|e| e.dis_loss.is_some()));
    }

    #[test]
    fn separable_toy_reaches_full_accuracy() {
        let (l, u) = toy(40, 10);
        let cfg = TrainConfig {
            max_epochs: 200,
            batch_size: 8,
            ..Default::default()
        };
        let mut m = small_model(11);
        train(&mut m, &l, &u, &cfg, &Rng::new(12)).unwrap();
        assert_eq!(m.accuracy(&l.x, &l.y).unwrap(), 1.0);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig { max_epochs: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..Default::default() }.validate().is_err());
    }
}
