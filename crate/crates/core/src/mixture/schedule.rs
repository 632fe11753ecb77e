use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Exponentially decaying softmax temperature, `max(t_min, t0·exp(−decay·epoch))`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemperatureSchedule {
    pub t0: f64,
    pub t_min: f64,
    /// Decay rate per epoch.
    pub decay: f64,
}

impl TemperatureSchedule {
    pub fn new(t0: f64, t_min: f64, decay: f64) -> Result<Self> {
        let s = TemperatureSchedule { t0, t_min, decay };
        s.validate()?;
        Ok(s)
    }

    pub fn constant(t: f64) -> Self {
        TemperatureSchedule { t0: t, t_min: t, decay: 0.0 }
    }

    /// Decays from `t0` to `t_min` over the first two thirds of `epochs`.
    pub fn for_epochs(t0: f64, t_min: f64, epochs: usize) -> Self {
        let horizon = (2.0 * epochs as f64 / 3.0).max(1.0);
        let decay = if t0 > t_min { (t0 / t_min).ln() / horizon } else { 0.0 };
        TemperatureSchedule { t0, t_min, decay }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.t0 > 0.0 && self.t_min > 0.0 && self.t0.is_finite()) {
            return Err(Error::Config { key: "temperature".into(), reason: "temperatures must be positive".into() });
        }
        if !(self.decay >= 0.0 && self.decay.is_finite()) {
            return Err(Error::Config { key: "temperature.decay".into(), reason: "decay must be non-negative".into() });
        }
        Ok(())
    }

    pub fn at(&self, epoch: usize) -> f64 {
        (self.t0 * (-self.decay * epoch as f64).exp()).max(self.t_min)
    }
}

impl Default for TemperatureSchedule {
    fn default() -> Self {
        TemperatureSchedule::constant(1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn examples() {
        let s = TemperatureSchedule::new(10.0, 0.5, 10f64.ln() / 100.0).unwrap();
        assert_eq!(s.at(0), 10.0);
        assert!((s.at(100) - 1.0).abs() < 1e-12);
        assert_eq!(TemperatureSchedule::new(3.0, 1.0, 0.0).unwrap().at(1000), 3.0);
    }

    #[test]
    fn reaches_floor_at_two_thirds() {
        let s = TemperatureSchedule::for_epochs(5.0, 1.0, 300);
        assert!((s.at(200) - 1.0).abs() < 1e-12);
        assert!(s.at(199) > 1.0);
        assert_eq!(s.at(299), 1.0);
    }

    #[test]
    fn non_increasing_and_positive() {
        let s = TemperatureSchedule::for_epochs(7.0, 0.3, 50);
        let mut prev = f64::INFINITY;
        for e in 0..200 {
            let t = s.at(e);
            assert!(t > 0.0 && t <= prev);
            prev = t;
        }
    }

    #[test]
    fn rejects_bad_values() {
        assert!(TemperatureSchedule::new(0.0, 1.0, 0.1).is_err());
        assert!(TemperatureSchedule::new(1.0, 1.0, -0.1).is_err());
    }
}
