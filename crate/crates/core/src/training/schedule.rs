use serde::{Deserialize, Serialize};

use crate::error::{config_err, DavitError, Result};

/// Linear rise from `floor_lr` to `peak_lr` over the first `peak_fraction`
/// of the run, then linear decay back to `floor_lr` at `total_steps`. The
/// rising edge doubles as warmup.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TriangularSchedule {
    pub peak_lr: f64,
    pub total_steps: usize,
    pub peak_fraction: f64,
    pub floor_lr: f64,
}

impl TriangularSchedule {
    pub fn new(peak_lr: f64, total_steps: usize) -> Result<Self> {
        let s = Self {
            peak_lr,
            total_steps,
            peak_fraction: 0.5,
            floor_lr: 0.0,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_steps == 0 {
            return Err(config_err!("schedule needs at least one step"));
        }
        if !(self.peak_fraction > 0.0 && self.peak_fraction < 1.0) {
            return Err(config_err!(
                "peak_fraction must lie in (0, 1), got {}",
                self.peak_fraction
            ));
        }
        if !(self.peak_lr >= 0.0 && self.floor_lr >= 0.0 && self.floor_lr <= self.peak_lr) {
            return Err(config_err!(
                "need 0 <= floor_lr <= peak_lr, got {} and {}",
                self.floor_lr,
                self.peak_lr
            ));
        }
        Ok(())
    }

    pub fn lr(&self, step: usize) -> Result<f64> {
        if step > self.total_steps {
            return Err(DavitError::Contract(format!(
                "step {step} outside 0..={}",
                self.total_steps
            )));
        }
        let t = self.total_steps as f64;
        let peak = self.peak_fraction * t;
        let s = step as f64;
        let frac = if s <= peak {
            s / peak
        } else {
            (t - s) / (t - peak)
        };
        Ok(self.floor_lr + (self.peak_lr - self.floor_lr) * frac)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_of_the_triangle() {
        let s = TriangularSchedule::new(0.4, 100).unwrap();
        assert_eq!(s.lr(0).unwrap(), 0.0);
        assert_eq!(s.lr(50).unwrap(), 0.4);
        assert!((s.lr(75).unwrap() - 0.2).abs() < 1e-15);
        assert!((s.lr(25).unwrap() - 0.2).abs() < 1e-15);
        assert_eq!(s.lr(100).unwrap(), 0.0);
        assert!(s.lr(101).is_err());
    }

    #[test]
    fn floor_and_validation() {
        let s = TriangularSchedule {
            peak_lr: 1.0,
            total_steps: 10,
            peak_fraction: 0.2,
            floor_lr: 0.1,
        };
        assert_eq!(s.lr(0).unwrap(), 0.1);
        assert_eq!(s.lr(2).unwrap(), 1.0);
        assert!((s.lr(10).unwrap() - 0.1).abs() < 1e-15);
        assert!(TriangularSchedule::new(1.0, 0).is_err());
        assert!(TriangularSchedule {
            peak_fraction: 1.0,
            ..s
        }
        .validate()
        .is_err());
    }
}
