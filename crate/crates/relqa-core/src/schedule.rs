//! Piecewise learning-rate schedule: linear warmup, a constant plateau,
//! then step decay. A second fixed rate is carried for the question
//! encoder, which trains at its own constant learning rate.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    pub warmup_start: f64,
    pub warmup_end: f64,
    pub warmup_epochs: u32,
    /// Last epoch of the plateau; the first decayed epoch is
    /// `decay_start_epoch + decay_every`.
    pub decay_start_epoch: u32,
    pub decay_factor: f64,
    pub decay_every: u32,
    pub final_epoch: u32,
    pub fixed_encoder_lr: f64,
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_start <= 0.0 || self.warmup_end <= 0.0 || self.fixed_encoder_lr <= 0.0 {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.decay_factor) || self.decay_factor == 0.0 {
            return Err(Error::Config(format!(
                "decay factor {} outside (0, 1]",
                self.decay_factor
            )));
        }
        if self.decay_every == 0 {
            return Err(Error::Config("decay_every must be at least 1".into()));
        }
        if self.decay_start_epoch < self.warmup_epochs {
            return Err(Error::Config(
                "decay cannot start before warmup completes".into(),
            ));
        }
        Ok(())
    }

    /// Learning rates at `epoch`: (main, fixed encoder rate).
    pub fn lr_at(&self, epoch: u32) -> Result<(f64, f64)> {
        if epoch > self.final_epoch {
            return Err(Error::Usage(format!(
                "epoch {epoch} beyond schedule end {}",
                self.final_epoch
            )));
        }
        let main = if epoch < self.warmup_epochs {
            let t = f64::from(epoch) / f64::from(self.warmup_epochs);
            self.warmup_start + (self.warmup_end - self.warmup_start) * t
        } else if epoch < self.decay_start_epoch {
            self.warmup_end
        } else {
            let decays = (epoch - self.decay_start_epoch) / self.decay_every;
            self.warmup_end * self.decay_factor.powi(decays as i32)
        };
        Ok((main, self.fixed_encoder_lr))
    }

    /// Schedule used by the full-scale preset: 5e-4 warming to 2e-3, a
    /// plateau, then a 0.2x step every 2 epochs, encoder fixed at 1e-4.
    pub fn paper_scale() -> Self {
        LrSchedule {
            warmup_start: 5e-4,
            warmup_end: 2e-3,
            warmup_epochs: 3,
            decay_start_epoch: 11,
            decay_factor: 0.2,
            decay_every: 2,
            final_epoch: 16,
            fixed_encoder_lr: 1e-4,
        }
    }

    /// Desk-scale default: same shape, scaled rates, 30 epochs.
    pub fn desk_scale() -> Self {
        LrSchedule {
            warmup_start: 1e-4,
            warmup_end: 4e-4,
            warmup_epochs: 5,
            decay_start_epoch: 15,
            decay_factor: 0.2,
            decay_every: 5,
            final_epoch: 30,
            fixed_encoder_lr: 1e-4,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_starts_at_initial_rate() {
        let s = LrSchedule::paper_scale();
        assert_eq!(s.lr_at(0).unwrap().0, 5e-4);
    }

    #[test]
    fn warmup_completion_reaches_peak() {
        let s = LrSchedule::paper_scale();
        assert_eq!(s.lr_at(s.warmup_epochs).unwrap().0, 2e-3);
    }

    #[test]
    fn first_decay_lands_two_epochs_after_plateau_end() {
        let s = LrSchedule::paper_scale();
        assert_eq!(s.lr_at(11).unwrap().0, 2e-3);
        assert_eq!(s.lr_at(12).unwrap().0, 2e-3);
        let lr13 = s.lr_at(13).unwrap().0;
        assert!((lr13 - 2e-3 * 0.2).abs() < 1e-18, "epoch 13 gave {lr13}");
    }

    #[test]
    fn encoder_rate_is_constant() {
        let s = LrSchedule::paper_scale();
        for e in 0..=16 {
            assert_eq!(s.lr_at(e).unwrap().1, 1e-4);
        }
    }

    #[test]
    fn out_of_range_epoch_is_usage_error() {
        let s = LrSchedule::paper_scale();
        assert!(s.lr_at(17).unwrap_err().is_usage());
    }

    #[test]
    fn piecewise_monotone_and_positive() {
        for s in [LrSchedule::paper_scale(), LrSchedule::desk_scale()] {
            let mut prev = 0.0;
            for e in 0..=s.final_epoch {
                let (lr, _) = s.lr_at(e).unwrap();
                assert!(lr > 0.0);
                if e > 0 {
                    if e <= s.warmup_epochs {
                        assert!(lr >= prev, "warmup must not decrease at {e}");
                    } else {
                        assert!(lr <= prev, "post-warmup must not increase at {e}");
                    }
                }
                prev = lr;
            }
        }
    }
}
