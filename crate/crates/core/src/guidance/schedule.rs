use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::scalar::{lit, Scalar};

/// Number of discrete diffusion timesteps.
pub const TOTAL_STEPS: u32 = 1000;

const TIMESTEP_TAG: u64 = 0x74696d65;

/// `x_t = alpha[t] x + sigma[t] eps`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule<T> {
    alpha: Vec<T>,
    sigma: Vec<T>,
}

impl<T: Scalar> NoiseSchedule<T> {
    pub fn new(alpha: Vec<T>, sigma: Vec<T>) -> Result<Self> {
        if alpha.len() != sigma.len() || alpha.is_empty() {
            return Err(Error::validation(
                "noise schedule needs matching, non-empty coefficient lists",
            ));
        }
        if alpha.iter().chain(&sigma).any(|v| !v.is_finite() || *v < T::zero()) {
            return Err(Error::validation(
                "noise schedule coefficients must be finite and non-negative",
            ));
        }
        if alpha.windows(2).any(|w| w[1] > w[0]) || sigma.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::validation(
                "noise schedule must have decreasing alpha and increasing sigma",
            ));
        }
        Ok(Self { alpha, sigma })
    }

    /// `alpha = sigma = 1` at every step.
    pub fn unit(steps: u32) -> Self {
        Self {
            alpha: vec![T::one(); steps as usize],
            sigma: vec![T::one(); steps as usize],
        }
    }

    /// Variance-preserving schedule with betas linear in `[1e-4, 0.02]`.
    pub fn linear_vp(steps: u32) -> Self {
        let n = steps.max(2) as usize;
        let mut prod = 1.0;
        let mut alpha = Vec::with_capacity(n);
        let mut sigma = Vec::with_capacity(n);
        for i in 0..n {
            let beta = 1e-4 + (0.02 - 1e-4) * i as f64 / (n - 1) as f64;
            prod *= 1.0 - beta;
            alpha.push(lit(prod.sqrt()));
            sigma.push(lit((1.0 - prod).sqrt()));
        }
        Self { alpha, sigma }
    }

    pub fn steps(&self) -> u32 {
        self.alpha.len() as u32
    }

    pub fn coefficients(&self, t: u32) -> Result<(T, T)> {
        let i = t as usize;
        if i >= self.alpha.len() {
            return Err(Error::validation(format!(
                "timestep {t} outside schedule of {} steps",
                self.alpha.len()
            )));
        }
        Ok((self.alpha[i], self.sigma[i]))
    }
}

/// Uniform integer timesteps in `[low, high]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimestepSampler {
    pub low: u32,
    pub high: u32,
    pub seed: u64,
}

impl TimestepSampler {
    pub fn new(low: u32, high: u32, seed: u64) -> Result<Self> {
        let s = Self { low, high, seed };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.low == 0 || self.low > self.high || self.high >= TOTAL_STEPS {
            return Err(Error::validation(format!(
                "timestep range [{}, {}] must satisfy 0 < low <= high < {TOTAL_STEPS}",
                self.low, self.high
            )));
        }
        Ok(())
    }

    /// Draw for one `(iteration, view)` slot. Independent of call order.
    pub fn sample(&self, iteration: u64, view: u64) -> u32 {
        use rand::Rng;
        rng::stream(self.seed, &[TIMESTEP_TAG, iteration, view]).random_range(self.low..=self.high)
    }
}

/// The weighting `w(t)` of the distillation residual.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WeightFn {
    Constant {
        value: f64,
    },
    /// `sigma_t²` from the provider's schedule.
    NoiseVariance,
}

impl Default for WeightFn {
    fn default() -> Self {
        WeightFn::Constant { value: 1.0 }
    }
}

impl WeightFn {
    pub fn eval<T: Scalar>(&self, schedule: &NoiseSchedule<T>, t: u32) -> Result<T> {
        match *self {
            WeightFn::Constant { value } => Ok(lit(value)),
            WeightFn::NoiseVariance => {
                let (_, s) = schedule.coefficients(t)?;
                Ok(s * s)
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            WeightFn::Constant { value } if !(value >= 0.0) || !value.is_finite() => Err(Error::config(
                "guidance.weighting.value",
                "must be finite and non-negative",
            )),
            _ => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sampler_range_and_determinism() {
        let s = TimestepSampler::new(800, 900, 3).unwrap();
        for i in 0..500 {
            let t = s.sample(i, 0);
            assert!((800..=900).contains(&t));
            assert_eq!(t, s.sample(i, 0));
        }
        assert!(TimestepSampler::new(0, 10, 0).is_err());
        assert!(TimestepSampler::new(20, 10, 0).is_err());
        assert!(TimestepSampler::new(20, 1000, 0).is_err());
    }

    #[test]
    fn schedules_are_monotone() {
        let s = NoiseSchedule::<f64>::linear_vp(TOTAL_STEPS);
        assert!(NoiseSchedule::new(s.alpha.clone(), s.sigma.clone()).is_ok());
        let (a0, s0) = s.coefficients(0).unwrap();
        let (a1, s1) = s.coefficients(999).unwrap();
        assert!(a0 > a1 && s0 < s1);
        assert!((a1 * a1 + s1 * s1 - 1.0).abs() < 1e-12);
        assert!(s.coefficients(1000).is_err());
        assert!(NoiseSchedule::new(vec![0.5, 0.9], vec![0.1, 0.2]).is_err());
    }
}
