//! Reverse diffusion sampling over standardized trajectories, with a per-step
//! hook that may replace the clean estimate before re-noising.

mod schedule;
mod synthetic;

pub use schedule::{DenoiseSchedule, ScheduleError};
pub use synthetic::{nominal_plan, SyntheticConfig, SyntheticDenoiser};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::dynamics::{EgoState, Trajectory, Waypoint};
use crate::path::Polyline;
use crate::safety::Neighbor;

/// One row per waypoint: standardized `(x, y, cos theta, sin theta)`.
pub type Sample = Vec<[f64; 4]>;

pub type HookError = Box<dyn std::error::Error + Send + Sync>;

#[derive(Debug, Error)]
pub enum DiffusionError {
    #[error("cumulative coefficient is 1 at step {0}; noise cannot be re-estimated")]
    ScheduleEdge(usize),
    #[error("step {t} outside 1..={steps}")]
    StepOutOfRange { t: usize, steps: usize },
    #[error("shape mismatch: expected {expected} rows, got {got}")]
    Shape { expected: usize, got: usize },
    #[error("route needs at least 2 distinct points")]
    DegenerateRoute,
    #[error("invalid scene context: {0}")]
    InvalidContext(String),
    #[error("denoiser produced a non-finite value at step {0}")]
    NonFinite(usize),
    #[error("correction hook failed: {0}")]
    Hook(HookError),
}

/// Conditioning information for one planning call.
#[derive(Debug, Clone)]
pub struct SceneContext {
    pub ego0: EgoState,
    pub route: Polyline,
    pub neighbors: Vec<Neighbor>,
    pub rng_seed: u64,
    /// Number of waypoints K.
    pub horizon: usize,
    pub dt: f64,
    /// Cruise speed the nominal plan aims for (m/s).
    pub target_speed: f64,
}

impl SceneContext {
    pub fn validate(&self) -> Result<(), DiffusionError> {
        if self.horizon < 2 {
            return Err(DiffusionError::InvalidContext(format!("horizon {} < 2", self.horizon)));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(DiffusionError::InvalidContext(format!("dt {}", self.dt)));
        }
        if !(self.target_speed >= 0.0 && self.target_speed.is_finite()) {
            return Err(DiffusionError::InvalidContext(format!("target speed {}", self.target_speed)));
        }
        if !self.ego0.is_finite() {
            return Err(DiffusionError::InvalidContext("ego state is not finite".into()));
        }
        Ok(())
    }
}

/// Noise predictor. Implementations bind their conditioning at construction.
pub trait Denoiser: Send + Sync {
    fn predict_noise(&self, tau_t: &[[f64; 4]], t: usize, schedule: &DenoiseSchedule)
        -> Result<Sample, DiffusionError>;
}

fn zip_map(a: &[[f64; 4]], b: &[[f64; 4]], f: impl Fn(f64, f64) -> f64) -> Sample {
    a.iter().zip(b).map(|(ra, rb)| std::array::from_fn(|c| f(ra[c], rb[c]))).collect()
}

fn check_shape(expected: usize, got: usize) -> Result<(), DiffusionError> {
    if expected == got {
        Ok(())
    } else {
        Err(DiffusionError::Shape { expected, got })
    }
}

/// Clean estimate `(tau_t - sqrt(1 - abar_t) eps) / sqrt(abar_t)`. Defined for
/// `t = 0` as well, where it is the identity.
pub fn clean_estimate(
    tau_t: &[[f64; 4]],
    eps: &[[f64; 4]],
    t: usize,
    sched: &DenoiseSchedule,
) -> Result<Sample, DiffusionError> {
    sched.check_index(t)?;
    check_shape(tau_t.len(), eps.len())?;
    let abar = sched.alpha_bar(t);
    let (a, b) = (abar.sqrt(), (1.0 - abar).sqrt());
    Ok(zip_map(tau_t, eps, |x, e| (x - b * e) / a))
}

/// Reverse step `sqrt(abar_{t-1}) tau0 + sqrt(1 - abar_{t-1}) eps + sigma_t z`.
pub fn ddpm_step(
    tau0: &[[f64; 4]],
    eps: &[[f64; 4]],
    t: usize,
    sched: &DenoiseSchedule,
    z: Option<&[[f64; 4]]>,
) -> Result<Sample, DiffusionError> {
    sched.check_step(t)?;
    check_shape(tau0.len(), eps.len())?;
    let prev = sched.alpha_bar(t - 1);
    let (a, b) = (prev.sqrt(), (1.0 - prev).sqrt());
    let mut out = zip_map(tau0, eps, |x, e| a * x + b * e);
    let sigma = sched.sigma(t);
    if let Some(z) = z {
        check_shape(out.len(), z.len())?;
        if sigma > 0.0 {
            for (row, zr) in out.iter_mut().zip(z) {
                for c in 0..4 {
                    row[c] += sigma * zr[c];
                }
            }
        }
    }
    Ok(out)
}

/// Noise consistent with a replacement clean estimate:
/// `(tau_t - sqrt(abar_t) tau0) / sqrt(1 - abar_t)`.
pub fn reestimate_noise(
    tau_t: &[[f64; 4]],
    tau0: &[[f64; 4]],
    t: usize,
    sched: &DenoiseSchedule,
) -> Result<Sample, DiffusionError> {
    sched.check_index(t)?;
    check_shape(tau_t.len(), tau0.len())?;
    let abar = sched.alpha_bar(t);
    if abar >= 1.0 {
        return Err(DiffusionError::ScheduleEdge(t));
    }
    let (a, b) = (abar.sqrt(), (1.0 - abar).sqrt());
    Ok(zip_map(tau_t, tau0, |x, c| (x - a * c) / b))
}

/// Re-noises a corrected clean estimate back to step `t - 1`.
pub fn renoise(
    tau_t: &[[f64; 4]],
    tau0_corrected: &[[f64; 4]],
    t: usize,
    sched: &DenoiseSchedule,
    z: Option<&[[f64; 4]]>,
) -> Result<Sample, DiffusionError> {
    let eps = reestimate_noise(tau_t, tau0_corrected, t, sched)?;
    ddpm_step(tau0_corrected, &eps, t, sched, z)
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize) -> Sample {
    (0..rows).map(|_| std::array::from_fn(|_| StandardNormal.sample(rng))).collect()
}

/// Per-step correction: receives `(t, clean estimate)` and returns a
/// replacement, or `None` to keep the estimate.
pub type Hook<'a> = dyn FnMut(usize, &[[f64; 4]]) -> Result<Option<Sample>, HookError> + 'a;

/// Runs the reverse process from standard-normal noise seeded by `seed`.
///
/// A hook output that differs from the clean estimate is re-noised with a
/// re-estimated noise term; otherwise the plain reverse step is used, which
/// is the same update without the round-off of re-estimation.
pub fn ddpm_sample(
    denoiser: &dyn Denoiser,
    rows: usize,
    seed: u64,
    sched: &DenoiseSchedule,
    mut hook: Option<&mut Hook<'_>>,
) -> Result<Sample, DiffusionError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tau = gaussian(&mut rng, rows);
    for t in (1..=sched.steps()).rev() {
        let eps = denoiser.predict_noise(&tau, t, sched)?;
        check_shape(rows, eps.len())?;
        if eps.iter().flatten().any(|v| !v.is_finite()) {
            return Err(DiffusionError::NonFinite(t));
        }
        let estimate = clean_estimate(&tau, &eps, t, sched)?;
        let corrected = match hook.as_mut() {
            Some(h) => h(t, &estimate).map_err(DiffusionError::Hook)?,
            None => None,
        };
        let z = (sched.sigma(t) > 0.0).then(|| gaussian(&mut rng, rows));
        tau = match corrected {
            Some(c) if c != estimate => {
                check_shape(rows, c.len())?;
                renoise(&tau, &c, t, sched, z.as_deref())?
            }
            _ => ddpm_step(&estimate, &eps, t, sched, z.as_deref())?,
        };
    }
    Ok(tau)
}

/// Fixed per-channel standardization around the ego's start position.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Normalizer {
    pub origin_x: f64,
    pub origin_y: f64,
    pub position_scale: f64,
    pub heading_scale: f64,
}

impl Normalizer {
    pub const POSITION_SCALE: f64 = 50.0;
    pub const HEADING_SCALE: f64 = 1.0;

    pub fn around(ego: &EgoState) -> Self {
        Self {
            origin_x: ego.x,
            origin_y: ego.y,
            position_scale: Self::POSITION_SCALE,
            heading_scale: Self::HEADING_SCALE,
        }
    }

    pub fn standardize(&self, traj: &Trajectory) -> Sample {
        traj.waypoints
            .iter()
            .map(|w| {
                [
                    (w.x - self.origin_x) / self.position_scale,
                    (w.y - self.origin_y) / self.position_scale,
                    w.cos_theta / self.heading_scale,
                    w.sin_theta / self.heading_scale,
                ]
            })
            .collect()
    }

    pub fn destandardize(&self, sample: &[[f64; 4]], dt: f64) -> Trajectory {
        let waypoints = sample
            .iter()
            .map(|r| {
                Waypoint::new(
                    r[0] * self.position_scale + self.origin_x,
                    r[1] * self.position_scale + self.origin_y,
                    r[2] * self.heading_scale,
                    r[3] * self.heading_scale,
                )
            })
            .collect();
        Trajectory { waypoints, dt }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_sample(seed: u64, rows: usize) -> Sample {
        gaussian(&mut ChaCha8Rng::seed_from_u64(seed), rows)
    }

    /// Returns the noise that maps `target` into the current iterate.
    struct Oracle {
        target: Sample,
    }

    impl Denoiser for Oracle {
        fn predict_noise(
            &self,
            tau_t: &[[f64; 4]],
            t: usize,
            sched: &DenoiseSchedule,
        ) -> Result<Sample, DiffusionError> {
            reestimate_noise(tau_t, &self.target, t, sched)
        }
    }

    #[test]
    fn clean_estimate_inverts_forward_noising() {
        let sched = DenoiseSchedule::cosine(20, false);
        let c = random_sample(1, 10);
        let eps = random_sample(2, 10);
        for t in 1..=20 {
            let abar = sched.alpha_bar(t);
            let tau = zip_map(&c, &eps, |x, e| abar.sqrt() * x + (1.0 - abar).sqrt() * e);
            let back = clean_estimate(&tau, &eps, t, &sched).unwrap();
            let err = zip_map(&back, &c, |a, b| (a - b).abs()).into_iter().flatten().fold(0.0, f64::max);
            assert!(err <= 1e-10, "t={t} err={err}");
        }
    }

    #[test]
    fn clean_estimate_at_unit_coefficient_is_identity() {
        let sched = DenoiseSchedule::cosine(20, false);
        let tau = random_sample(3, 4);
        let eps = random_sample(4, 4);
        assert_eq!(sched.alpha_bar(0), 1.0);
        assert_eq!(clean_estimate(&tau, &eps, 0, &sched).unwrap(), tau);
    }

    #[test]
    fn renoise_reduces_to_plain_step() {
        let sched = DenoiseSchedule::cosine(20, false);
        let tau = random_sample(4, 8);
        let eps = random_sample(5, 8);
        for t in 1..=20 {
            let est = clean_estimate(&tau, &eps, t, &sched).unwrap();
            let a = renoise(&tau, &est, t, &sched, None).unwrap();
            let b = ddpm_step(&est, &eps, t, &sched, None).unwrap();
            let err = zip_map(&a, &b, |x, y| (x - y).abs()).into_iter().flatten().fold(0.0, f64::max);
            assert!(err < 1e-9, "t={t} err={err}");
        }
    }

    #[test]
    fn renoise_round_trip() {
        let sched = DenoiseSchedule::cosine(20, false);
        let tau = random_sample(6, 8);
        let corrected = random_sample(7, 8);
        for t in 2..=20 {
            let next = renoise(&tau, &corrected, t, &sched, None).unwrap();
            let eps = reestimate_noise(&tau, &corrected, t, &sched).unwrap();
            let back = clean_estimate(&next, &eps, t - 1, &sched).unwrap();
            let err = zip_map(&back, &corrected, |x, y| (x - y).abs()).into_iter().flatten().fold(0.0, f64::max);
            assert!(err <= 1e-10, "t={t} err={err}");
        }
    }

    #[test]
    fn renoise_matches_direct_arithmetic() {
        let sched = DenoiseSchedule::new(vec![1.0, 0.8, 0.5], vec![0.0, 0.0]).unwrap();
        let tau = random_sample(8, 6);
        let corrected = random_sample(9, 6);
        let out = renoise(&tau, &corrected, 2, &sched, None).unwrap();
        for (k, row) in out.iter().enumerate() {
            for c in 0..4 {
                let eps = (tau[k][c] - 0.5f64.sqrt() * corrected[k][c]) / 0.5f64.sqrt();
                let expected = 0.8f64.sqrt() * corrected[k][c] + 0.2f64.sqrt() * eps;
                assert!((row[c] - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn schedule_edge_is_reported() {
        let sched = DenoiseSchedule::cosine(20, false);
        let tau = random_sample(10, 3);
        assert!(matches!(renoise(&tau, &tau, 0, &sched, None), Err(DiffusionError::ScheduleEdge(0))));
        assert!(matches!(renoise(&tau, &tau, 21, &sched, None), Err(DiffusionError::StepOutOfRange { .. })));
    }

    #[test]
    fn oracle_sampling_recovers_target() {
        let sched = DenoiseSchedule::cosine(20, false);
        let target = random_sample(11, 80);
        let oracle = Oracle { target: target.clone() };
        let out = ddpm_sample(&oracle, 80, 42, &sched, None).unwrap();
        let err = zip_map(&out, &target, |a, b| (a - b).abs()).into_iter().flatten().fold(0.0, f64::max);
        assert!(err <= 1e-6, "err {err}");
    }

    #[test]
    fn identity_hook_is_bit_identical() {
        let sched = DenoiseSchedule::cosine(20, false);
        let oracle = Oracle { target: random_sample(12, 30) };
        let plain = ddpm_sample(&oracle, 30, 5, &sched, None).unwrap();
        let mut identity =
            |_t: usize, est: &[[f64; 4]]| -> Result<Option<Sample>, HookError> { Ok(Some(est.to_vec())) };
        let hooked = ddpm_sample(&oracle, 30, 5, &sched, Some(&mut identity)).unwrap();
        assert_eq!(plain, hooked);
        let stochastic = DenoiseSchedule::cosine(20, true);
        let a = ddpm_sample(&oracle, 30, 5, &stochastic, None).unwrap();
        let b = ddpm_sample(&oracle, 30, 5, &stochastic, Some(&mut identity)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn normalizer_round_trip() {
        let ego = EgoState::new(12.0, -3.0, 0.0, 0.0, 5.0);
        let norm = Normalizer::around(&ego);
        let traj = Trajectory::new(vec![Waypoint::new(12.0, -3.0, 1.0, 0.0), Waypoint::new(62.0, 47.0, 0.6, 0.8)], 0.1)
            .unwrap();
        let std = norm.standardize(&traj);
        assert_eq!(std[1], [1.0, 1.0, 0.6, 0.8]);
        assert_eq!(norm.destandardize(&std, 0.1), traj);
    }
}
