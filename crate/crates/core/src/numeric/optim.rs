use serde::{Deserialize, Serialize};

use super::Matrix;
use crate::error::{Error, Result};

/// Sign of an update: descent subtracts the gradient, ascent adds it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Descent,
    Ascent,
}

impl Direction {
    #[inline]
    pub fn sign(self) -> f64 {
        match self {
            Direction::Descent => -1.0,
            Direction::Ascent => 1.0,
        }
    }
}

/// Plain SGD update, returning the new parameters.
pub fn sgd_step(params: &Matrix, grads: &Matrix, rate: f64, direction: Direction) -> Result<Matrix> {
    if !(rate >= 0.0 && rate.is_finite()) {
        return Err(Error::config(format!("learning rate must be >= 0, got {rate}")));
    }
    let mut out = params.clone();
    out.axpy(direction.sign() * rate, grads)?;
    Ok(out)
}

/// Piecewise-constant learning rate: the base rate is multiplied by `decay`
/// once for every milestone (a fraction of the total epoch count) already passed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    base_rate: f64,
    milestones: Vec<f64>,
    decay: f64,
}

impl LrSchedule {
    pub fn new(base_rate: f64, milestones: Vec<f64>, decay: f64) -> Result<Self> {
        if !(base_rate > 0.0 && base_rate.is_finite()) {
            return Err(Error::config(format!("base learning rate must be > 0, got {base_rate}")));
        }
        if !(decay > 0.0 && decay <= 1.0) {
            return Err(Error::config(format!("lr decay must be in (0, 1], got {decay}")));
        }
        if milestones.iter().any(|&m| !(m > 0.0 && m < 1.0)) {
            return Err(Error::config(format!("lr milestones must lie in (0, 1): {milestones:?}")));
        }
        if milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config(format!(
                "lr milestones must be strictly increasing: {milestones:?}"
            )));
        }
        Ok(LrSchedule {
            base_rate,
            milestones,
            decay,
        })
    }

    pub fn constant(base_rate: f64) -> Result<Self> {
        LrSchedule::new(base_rate, Vec::new(), 1.0)
    }

    pub fn base_rate(&self) -> f64 {
        self.base_rate
    }

    pub fn milestones(&self) -> &[f64] {
        &self.milestones
    }

    pub fn decay(&self) -> f64 {
        self.decay
    }

    /// Rate for zero-based `epoch` out of `max_epochs`.
    pub fn rate(&self, epoch: usize, max_epochs: usize) -> f64 {
        let e = epoch as f64;
        let passed = self
            .milestones
            .iter()
            .filter(|&&m| m * max_epochs as f64 <= e + 1e-9)
            .count();
        self.base_rate * self.decay.powi(passed as i32)
    }
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule {
            base_rate: 0.1,
            milestones: vec![0.3, 0.6, 0.8],
            decay: 0.2,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_noop() {
        let p = Matrix::from_rows(&[[1.0, -2.0]]).unwrap();
        let out = sgd_step(&p, &Matrix::zeros(1, 2), 0.5, Direction::Descent).unwrap();
        assert_eq!(out, p);
    }

    #[test]
    fn descent_on_square() {
        // f(w) = w², grad 2w
        let w = Matrix::from_rows(&[[1.0]]).unwrap();
        let g = Matrix::from_rows(&[[2.0]]).unwrap();
        let out = sgd_step(&w, &g, 0.1, Direction::Descent).unwrap();
        assert!((out.get(0, 0) - 0.8).abs() < 1e-15);
    }

    #[test]
    fn ascent_undoes_descent() {
        let w = Matrix::from_rows(&[[0.3, -1.25, 7.5]]).unwrap();
        let g = Matrix::from_rows(&[[0.1, 2.0, -3.0]]).unwrap();
        let up = sgd_step(&w, &g, 0.01, Direction::Ascent).unwrap();
        let back = sgd_step(&up, &g, 0.01, Direction::Descent).unwrap();
        assert!(back.max_abs_diff(&w) <= 1e-15);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let r = sgd_step(&Matrix::zeros(1, 2), &Matrix::zeros(2, 1), 0.1, Direction::Descent);
        assert!(matches!(r, Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn multistep_bands() {
        let s = LrSchedule::new(0.1, vec![0.3, 0.6, 0.8], 0.2).unwrap();
        let close = |a: f64, b: f64| (a - b).abs() < 1e-15;
        for (epoch, want) in [
            (0, 0.1),
            (29, 0.1),
            (30, 0.02),
            (59, 0.02),
            (60, 0.004),
            (79, 0.004),
            (80, 0.0008),
            (99, 0.0008),
        ] {
            assert!(close(s.rate(epoch, 100), want), "epoch {epoch}: {}", s.rate(epoch, 100));
        }
    }

    #[test]
    fn schedule_validation() {
        assert!(LrSchedule::new(0.0, vec![], 0.5).is_err());
        assert!(LrSchedule::new(0.1, vec![], 0.0).is_err());
        assert!(LrSchedule::new(0.1, vec![], 1.5).is_err());
        assert!(LrSchedule::new(0.1, vec![0.5, 0.5], 0.5).is_err());
        assert!(LrSchedule::new(0.1, vec![1.0], 0.5).is_err());
        assert!(LrSchedule::constant(0.1).is_ok());
    }
}
