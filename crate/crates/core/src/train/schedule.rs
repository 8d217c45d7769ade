//! Step learning-rate schedule.

use crate::error::{config_err, Result};

pub const BASE_LR: f64 = 1e-3;
pub const DECAY_FACTOR: f64 = 10.0;

/// Reference plan: 100 epochs with decays after epochs 50 and 80.
pub const REFERENCE_EPOCHS: usize = 100;
pub const REFERENCE_DECAYS: [usize; 2] = [50, 80];

#[derive(Clone, Debug, PartialEq)]
pub struct LrSchedule {
    pub base: f64,
    /// Epochs (0-based) from which one more decay applies. Strictly increasing.
    pub decay_epochs: Vec<usize>,
    pub factor: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            base: BASE_LR,
            decay_epochs: REFERENCE_DECAYS.to_vec(),
            factor: DECAY_FACTOR,
        }
    }
}

impl LrSchedule {
    /// The reference plan rescaled to `epochs` total, e.g. 40 -> decays at 20, 32.
    pub fn scaled(epochs: usize) -> Self {
        let mut decay_epochs: Vec<usize> = REFERENCE_DECAYS
            .iter()
            .map(|&d| (d * epochs + REFERENCE_EPOCHS / 2) / REFERENCE_EPOCHS)
            .filter(|&d| d > 0)
            .collect();
        decay_epochs.dedup();
        Self {
            decay_epochs,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.decay_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return Err(config_err("decay epochs must be strictly increasing"));
        }
        if !(self.base >= 0.0) || !(self.factor > 0.0) {
            return Err(config_err(
                "learning rate must be >= 0 and decay factor > 0",
            ));
        }
        Ok(())
    }

    /// `base * factor^-k`, `k` = number of decay epochs `<= epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let k = self.decay_epochs.iter().filter(|&&d| d <= epoch).count();
        self.base / self.factor.powi(k as i32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() <= 1e-12 * b.abs()
    }

    #[test]
    fn reference_plan() {
        let s = LrSchedule::default();
        assert!(close(s.lr_at(0), 1e-3));
        assert!(close(s.lr_at(49), 1e-3));
        assert!(close(s.lr_at(50), 1e-4));
        assert!(close(s.lr_at(99), 1e-5));
    }

    #[test]
    fn scaled_plan_keeps_ratios() {
        assert_eq!(LrSchedule::scaled(40).decay_epochs, vec![20, 32]);
        assert_eq!(LrSchedule::scaled(100).decay_epochs, vec![50, 80]);
        assert_eq!(LrSchedule::scaled(1).decay_epochs, vec![1]);
    }

    #[test]
    fn rejects_unsorted_decays() {
        let s = LrSchedule {
            decay_epochs: vec![5, 5],
            ..LrSchedule::default()
        };
        assert!(s.validate().is_err());
    }
}
