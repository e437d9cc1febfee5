use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Timestep curriculum: `t ~ U[t_min, t_max(iter)]` where the upper bound
/// decays linearly from `t_max_start` to `t_max_end` over the run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimestepSchedule {
    pub t_min: f64,
    pub t_max_start: f64,
    pub t_max_end: f64,
    pub total_iters: usize,
}

impl TimestepSchedule {
    pub fn new(total_iters: usize) -> Self {
        Self {
            t_min: 0.02,
            t_max_start: 0.8,
            t_max_end: 0.6,
            total_iters,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_iters == 0 {
            return Err(Error::config("total_iters", "must be at least 1"));
        }
        let ok = 0.0 < self.t_min
            && self.t_min < self.t_max_end
            && self.t_max_end <= self.t_max_start
            && self.t_max_start < 1.0;
        if !ok {
            return Err(Error::config(
                "timestep_schedule",
                "need 0 < t_min < t_max_end <= t_max_start < 1",
            ));
        }
        Ok(())
    }

    /// Upper bound of the sampling interval at `iter`.
    pub fn t_max(&self, iter: usize) -> Result<f64> {
        if iter >= self.total_iters {
            return Err(Error::config(
                "iter",
                format!("iteration {iter} outside schedule of {} iterations", self.total_iters),
            ));
        }
        if self.total_iters == 1 {
            return Ok(self.t_max_start);
        }
        let frac = iter as f64 / (self.total_iters - 1) as f64;
        Ok(self.t_max_start + frac * (self.t_max_end - self.t_max_start))
    }
}

pub fn sample_timestep(sched: &TimestepSchedule, iter: usize, rng: &mut impl Rng) -> Result<f64> {
    sched.validate()?;
    let hi = sched.t_max(iter)?;
    let u: f64 = rng.random();
    Ok(sched.t_min + u * (hi - sched.t_min))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn endpoints_and_midpoint() {
        let s = TimestepSchedule::new(101);
        assert_eq!(s.t_max(0).unwrap(), 0.8);
        assert!((s.t_max(100).unwrap() - 0.6).abs() < 1e-15);
        assert!((s.t_max(50).unwrap() - 0.7).abs() < 1e-15);
    }

    #[test]
    fn out_of_range_iteration() {
        let s = TimestepSchedule::new(10);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(sample_timestep(&s, 10, &mut rng), Err(Error::Config { .. })));
    }

    #[test]
    fn samples_stay_in_range() {
        let s = TimestepSchedule::new(50);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for iter in 0..50 {
            for _ in 0..100 {
                let t = sample_timestep(&s, iter, &mut rng).unwrap();
                assert!(t >= 0.02 && t <= s.t_max(iter).unwrap());
            }
        }
    }

    #[test]
    fn invalid_schedule() {
        let mut s = TimestepSchedule::new(10);
        s.t_max_end = 0.9;
        assert!(s.validate().is_err());
    }
}
