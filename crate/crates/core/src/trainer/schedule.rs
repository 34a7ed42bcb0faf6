use std::f64::consts::PI;

use crate::error::{Error, Result};

use super::TrainConfig;

/// Linear warmup from 0 to the peak rate, then cosine decay to the final
/// rate, indexed by optimizer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub peak_lr: f64,
    pub final_lr: f64,
}

impl Schedule {
    pub fn new(warmup_steps: usize, total_steps: usize, peak_lr: f64, final_lr: f64) -> Result<Self> {
        if total_steps > 0 && warmup_steps >= total_steps {
            return Err(Error::Config(format!(
                "warmup of {warmup_steps} steps leaves no decay phase in {total_steps} steps"
            )));
        }
        Ok(Self {
            warmup_steps,
            total_steps,
            peak_lr,
            final_lr,
        })
    }

    /// Schedule for `config` with `steps_per_epoch` optimizer steps per epoch.
    pub fn for_config(config: &TrainConfig, steps_per_epoch: usize) -> Result<Self> {
        let total = config.epochs * steps_per_epoch;
        let warmup = if total == 0 { 0 } else { config.warmup_epochs * steps_per_epoch };
        Self::new(warmup, total, config.peak_lr(), config.final_lr)
    }

    pub fn lr_at(&self, step: usize) -> Result<f64> {
        if step > self.total_steps {
            return Err(Error::Usage(format!(
                "step {step} is past the end of a {}-step schedule",
                self.total_steps
            )));
        }
        if self.total_steps == 0 {
            return Ok(0.0);
        }
        if step < self.warmup_steps {
            return Ok(self.peak_lr * step as f64 / self.warmup_steps as f64);
        }
        let t = (step - self.warmup_steps) as f64 / (self.total_steps - self.warmup_steps) as f64;
        Ok(self.final_lr + (self.peak_lr - self.final_lr) * 0.5 * (1.0 + (PI * t).cos()))
    }
}

/// Learning rate at `step` for `config` with `steps_per_epoch` steps per
/// epoch.
pub fn lr_at(step: usize, config: &TrainConfig, steps_per_epoch: usize) -> Result<f64> {
    Schedule::for_config(config, steps_per_epoch)?.lr_at(step)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn anchors() {
        let s = Schedule::new(10, 100, 0.6, 0.002).unwrap();
        assert_eq!(s.lr_at(0).unwrap(), 0.0);
        assert_eq!(s.lr_at(5).unwrap(), 0.3);
        assert_eq!(s.lr_at(10).unwrap(), 0.6);
        assert!((s.lr_at(100).unwrap() - 0.002).abs() < 1e-15);
        assert!(matches!(s.lr_at(101), Err(Error::Usage(_))));
    }

    #[test]
    fn monotone_phases() {
        let s = Schedule::new(7, 50, 1.2, 0.002).unwrap();
        let lrs: Vec<f64> = (0..=50).map(|k| s.lr_at(k).unwrap()).collect();
        assert!(lrs[..=7].windows(2).all(|w| w[0] < w[1]));
        assert!(lrs[7..].windows(2).all(|w| w[0] > w[1]));
    }

    #[test]
    fn degenerate_runs() {
        assert!(Schedule::new(5, 5, 1.0, 0.0).is_err());
        let s = Schedule::new(0, 0, 1.0, 0.0).unwrap();
        assert_eq!(s.lr_at(0).unwrap(), 0.0);
        let s = Schedule::new(0, 4, 1.0, 0.5).unwrap();
        assert_eq!(s.lr_at(0).unwrap(), 1.0);
    }

    #[test]
    fn peak_scales_with_batch() {
        let config = TrainConfig {
            batch_size: 512,
            ..TrainConfig::default()
        };
        assert_eq!(lr_at(10 * 16, &config, 16).unwrap(), 1.2);
    }
}
