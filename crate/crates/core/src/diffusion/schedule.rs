use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::DiffusionError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScheduleError {
    #[error("schedule needs at least one step")]
    Empty,
    #[error("expected {expected} sigma values, got {got}")]
    SigmaLength { expected: usize, got: usize },
    #[error("alpha_bar[0] must be exactly 1, got {0}")]
    FirstNotOne(f64),
    #[error("alpha_bar must lie in (0, 1] and strictly decrease; violated at step {0}")]
    NotDecreasing(usize),
    #[error("sigma[{0}] must be finite and non-negative")]
    BadSigma(usize),
}

/// Cumulative signal coefficients `alpha_bar[0..=T]` and sampling noise
/// `sigma[1..=T]` (stored zero-based).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSchedule", into = "RawSchedule")]
pub struct DenoiseSchedule {
    alpha_bar: Vec<f64>,
    sigma: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct RawSchedule {
    alpha_bar: Vec<f64>,
    sigma: Vec<f64>,
}

impl TryFrom<RawSchedule> for DenoiseSchedule {
    type Error = ScheduleError;

    fn try_from(raw: RawSchedule) -> Result<Self, Self::Error> {
        Self::new(raw.alpha_bar, raw.sigma)
    }
}

impl From<DenoiseSchedule> for RawSchedule {
    fn from(s: DenoiseSchedule) -> Self {
        Self { alpha_bar: s.alpha_bar, sigma: s.sigma }
    }
}

impl DenoiseSchedule {
    const COSINE_OFFSET: f64 = 0.008;
    const MAX_BETA: f64 = 0.999;

    pub fn new(alpha_bar: Vec<f64>, sigma: Vec<f64>) -> Result<Self, ScheduleError> {
        if alpha_bar.len() < 2 {
            return Err(ScheduleError::Empty);
        }
        if sigma.len() != alpha_bar.len() - 1 {
            return Err(ScheduleError::SigmaLength { expected: alpha_bar.len() - 1, got: sigma.len() });
        }
        if alpha_bar[0] != 1.0 {
            return Err(ScheduleError::FirstNotOne(alpha_bar[0]));
        }
        for t in 1..alpha_bar.len() {
            let a = alpha_bar[t];
            if !(a > 0.0 && a < alpha_bar[t - 1]) {
                return Err(ScheduleError::NotDecreasing(t));
            }
        }
        if let Some(i) = sigma.iter().position(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(ScheduleError::BadSigma(i + 1));
        }
        Ok(Self { alpha_bar, sigma })
    }

    /// Cosine schedule with `steps` steps. With `stochastic`, sigma follows the
    /// DDPM posterior standard deviation; otherwise sampling is deterministic.
    pub fn cosine(steps: usize, stochastic: bool) -> Self {
        assert!(steps >= 1, "cosine schedule needs at least one step");
        let f = |t: usize| {
            let x = (t as f64 / steps as f64 + Self::COSINE_OFFSET) / (1.0 + Self::COSINE_OFFSET);
            (x * std::f64::consts::FRAC_PI_2).cos().powi(2)
        };
        let mut alpha_bar = Vec::with_capacity(steps + 1);
        alpha_bar.push(1.0);
        for t in 1..=steps {
            let beta = (1.0 - f(t) / f(t - 1)).min(Self::MAX_BETA);
            alpha_bar.push(alpha_bar[t - 1] * (1.0 - beta));
        }
        let sigma = (1..=steps)
            .map(|t| {
                if stochastic {
                    let (prev, cur) = (alpha_bar[t - 1], alpha_bar[t]);
                    ((1.0 - prev) / (1.0 - cur)).sqrt() * (1.0 - cur / prev).sqrt()
                } else {
                    0.0
                }
            })
            .collect();
        Self::new(alpha_bar, sigma).expect("cosine schedule is valid")
    }

    /// Number of reverse steps T.
    pub fn steps(&self) -> usize {
        self.sigma.len()
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// Sampling noise of reverse step `t` in `1..=T`.
    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t - 1]
    }

    pub fn is_deterministic(&self) -> bool {
        self.sigma.iter().all(|&s| s == 0.0)
    }

    pub(crate) fn check_step(&self, t: usize) -> Result<(), DiffusionError> {
        if (1..=self.steps()).contains(&t) {
            Ok(())
        } else {
            Err(DiffusionError::StepOutOfRange { t, steps: self.steps() })
        }
    }

    pub(crate) fn check_index(&self, t: usize) -> Result<(), DiffusionError> {
        if t <= self.steps() {
            Ok(())
        } else {
            Err(DiffusionError::StepOutOfRange { t, steps: self.steps() })
        }
    }
}

impl Default for DenoiseSchedule {
    fn default() -> Self {
        Self::cosine(20, false)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_is_valid_and_decreasing() {
        for steps in [1, 5, 20, 100] {
            let s = DenoiseSchedule::cosine(steps, true);
            assert_eq!(s.steps(), steps);
            assert_eq!(s.alpha_bar(0), 1.0);
            assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0] && w[1] > 0.0));
            assert!((1..=steps).all(|t| s.sigma(t) >= 0.0 && s.sigma(t).is_finite()));
        }
        assert!(DenoiseSchedule::cosine(20, false).is_deterministic());
    }

    #[test]
    fn constructor_rejects_bad_schedules() {
        assert_eq!(DenoiseSchedule::new(vec![1.0], vec![]), Err(ScheduleError::Empty));
        assert_eq!(DenoiseSchedule::new(vec![0.9, 0.5], vec![0.0]), Err(ScheduleError::FirstNotOne(0.9)));
        assert_eq!(DenoiseSchedule::new(vec![1.0, 0.5, 0.6], vec![0.0; 2]), Err(ScheduleError::NotDecreasing(2)));
        assert_eq!(DenoiseSchedule::new(vec![1.0, 0.0], vec![0.0]), Err(ScheduleError::NotDecreasing(1)));
        assert_eq!(DenoiseSchedule::new(vec![1.0, 0.5], vec![-1.0]), Err(ScheduleError::BadSigma(1)));
        assert_eq!(
            DenoiseSchedule::new(vec![1.0, 0.5], vec![]),
            Err(ScheduleError::SigmaLength { expected: 1, got: 0 })
        );
    }

    #[test]
    fn serde_validates() {
        let s = DenoiseSchedule::cosine(3, false);
        let json = serde_json::to_string(&s).unwrap();
        assert_eq!(serde_json::from_str::<DenoiseSchedule>(&json).unwrap(), s);
        assert!(serde_json::from_str::<DenoiseSchedule>(r#"{"alpha_bar":[1.0,1.2],"sigma":[0.0]}"#).is_err());
    }
}
