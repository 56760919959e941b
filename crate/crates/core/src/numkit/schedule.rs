use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    pub start: f64,
    pub end: f64,
    pub total_steps: usize,
}

impl ScheduleSpec {
    pub fn new(start: f64, end: f64, total_steps: usize) -> Result<Self> {
        if total_steps == 0 {
            return Err(Error::InvalidConfig("schedule total_steps must be >= 1".into()));
        }
        Ok(Self { start, end, total_steps })
    }
}

/// Half-cosine interpolation from `start` at step 0 to `end` at `total_steps`.
pub fn cosine_schedule(step: usize, spec: &ScheduleSpec) -> Result<f64> {
    if spec.total_steps == 0 || step > spec.total_steps {
        return Err(Error::StepOutOfRange { step, total: spec.total_steps });
    }
    if step == 0 {
        return Ok(spec.start);
    }
    if step == spec.total_steps {
        return Ok(spec.end);
    }
    let phase = std::f64::consts::PI * step as f64 / spec.total_steps as f64;
    Ok(spec.end + (spec.start - spec.end) * (phase.cos() + 1.0) / 2.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints_and_midpoint() {
        let s = ScheduleSpec::new(0.996, 1.0, 100).unwrap();
        assert_eq!(cosine_schedule(0, &s).unwrap(), 0.996);
        assert_eq!(cosine_schedule(100, &s).unwrap(), 1.0);
        assert!((cosine_schedule(50, &s).unwrap() - 0.998).abs() < 1e-15);
    }

    #[test]
    fn monotone_between_endpoints() {
        let s = ScheduleSpec::new(0.1, 1e-5, 37).unwrap();
        let vals: Vec<f64> = (0..=37).map(|i| cosine_schedule(i, &s).unwrap()).collect();
        assert!(vals.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn out_of_range_step() {
        let s = ScheduleSpec::new(0.0, 1.0, 10).unwrap();
        assert_eq!(cosine_schedule(11, &s), Err(Error::StepOutOfRange { step: 11, total: 10 }));
        assert!(ScheduleSpec::new(0.0, 1.0, 0).is_err());
    }
}
