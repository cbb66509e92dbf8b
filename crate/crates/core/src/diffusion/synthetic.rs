//! Stand-in denoiser: the exact posterior-mean denoiser for a Gaussian prior
//! of smooth route-aligned deviations around a nominal route-following plan.
//!
//! Because the clean estimate is inferred from the noisy input, corrections
//! injected into the sampling loop persist into later steps, smoothed onto
//! the prior's modes. With a zero perturbation scale the prior collapses and
//! every clean estimate is the nominal plan.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{DenoiseSchedule, Denoiser, DiffusionError, Normalizer, Sample, SceneContext};
use crate::dynamics::{Trajectory, Waypoint};
use crate::path::Polyline;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    /// Prior standard deviation of the first longitudinal mode, in
    /// standardized position units.
    pub perturbation_scale: f64,
    /// Lateral prior spread relative to the longitudinal one.
    pub lateral_ratio: f64,
    /// Smooth modes per direction; mode `m` has spread `scale / m`.
    pub modes: usize,
    /// Prior standard deviation of a constant speed offset over the plan
    /// (m/s). This is the only mode that changes the speed at the start.
    pub speed_offset_std: f64,
    /// Longitudinal acceleration used to reach the target speed (m/s^2).
    pub accel: f64,
    /// Deceleration used to slow for curves or a lower target (m/s^2).
    pub decel: f64,
    /// Lateral acceleration bound that caps speed in curves (m/s^2).
    pub lateral_accel: f64,
    /// Distance scanned ahead for upcoming curves (m).
    pub lookahead: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            perturbation_scale: 0.05,
            lateral_ratio: 0.05,
            modes: 3,
            speed_offset_std: 0.4,
            accel: 1.5,
            decel: 2.0,
            lateral_accel: 2.0,
            lookahead: 60.0,
        }
    }
}

/// Arc lengths along the route of the nominal plan's waypoints.
///
/// Speed rises toward the target at `accel` (or falls at `decel`), capped so
/// that curves ahead can be taken within `lateral_accel` after braking at
/// `decel`.
fn nominal_arc(context: &SceneContext, config: &SyntheticConfig) -> Vec<f64> {
    let route = &context.route;
    let dt = context.dt;
    let curve_cap = |s: f64| {
        let k = route.curvature_at(s);
        if k > 1e-9 {
            (config.lateral_accel / k).sqrt()
        } else {
            f64::INFINITY
        }
    };
    let allowed = |s: f64| {
        let mut cap = context.target_speed;
        let mut ahead = 0.0;
        while ahead <= config.lookahead {
            let c = curve_cap(s + ahead);
            cap = cap.min((c * c + 2.0 * config.decel * ahead).sqrt());
            ahead += 1.0;
        }
        cap
    };

    let mut s = route.project(context.ego0.position()).s;
    let mut v = context.ego0.v;
    let mut arc = Vec::with_capacity(context.horizon);
    arc.push(s);
    for _ in 1..context.horizon {
        let target = allowed(s);
        v = if v < target { (v + config.accel * dt).min(target) } else { (v - config.decel * dt).max(target) };
        s += v * dt;
        arc.push(s);
    }
    arc
}

fn route_waypoint(route: &Polyline, s: f64, lateral: f64) -> Waypoint {
    let p = route.point_at(s);
    let heading = route.heading_at(s);
    let (sin, cos) = heading.sin_cos();
    Waypoint::new(p.x - lateral * sin, p.y + lateral * cos, cos, sin)
}

/// Route-following plan from the ego's projection onto the route.
pub fn nominal_plan(context: &SceneContext, config: &SyntheticConfig) -> Trajectory {
    let waypoints = nominal_arc(context, config).into_iter().map(|s| route_waypoint(&context.route, s, 0.0)).collect();
    Trajectory { waypoints, dt: context.dt }
}

/// Mode shape `m` (1-based) at horizon fraction `u`. Value and slope vanish
/// at the start, so a deviation never changes the ego's current speed or
/// heading; the end is free.
fn mode_shape(m: usize, u: f64) -> f64 {
    1.0 - ((m as f64 - 0.5) * std::f64::consts::PI * u).cos()
}

#[derive(Debug, Clone)]
pub struct SyntheticDenoiser {
    route: Polyline,
    norm: Normalizer,
    nominal: Trajectory,
    nominal_arc: Vec<f64>,
    nominal_std: Sample,
    modes: usize,
    /// Columns map longitudinal mode, lateral mode, then speed-offset
    /// coefficients to standardized positions, linearized at the nominal plan.
    basis: DMatrix<f64>,
    basis_gram: DMatrix<f64>,
    /// Prior variance of each coefficient; empty when the prior is degenerate.
    prior_var: Vec<f64>,
}

impl SyntheticDenoiser {
    pub fn new(context: &SceneContext, config: &SyntheticConfig) -> Result<Self, DiffusionError> {
        if context.route.points().len() < 2 {
            return Err(DiffusionError::DegenerateRoute);
        }
        context.validate()?;
        let nominal_arc = nominal_arc(context, config);
        let nominal = nominal_plan(context, config);
        let norm = Normalizer::around(&context.ego0);
        let nominal_std = norm.standardize(&nominal);

        let k_len = context.horizon;
        let modes = config.modes;
        let denom = (k_len.max(2) - 1) as f64;
        let mut basis = DMatrix::zeros(2 * k_len, 2 * modes + 1);
        for (k, w) in nominal.waypoints.iter().enumerate() {
            let phase = k as f64 / denom;
            let (c, s) = (w.cos_theta, w.sin_theta);
            for m in 0..modes {
                let phi = mode_shape(m + 1, phase);
                basis[(2 * k, m)] = phi * c;
                basis[(2 * k + 1, m)] = phi * s;
                basis[(2 * k, modes + m)] = -phi * s;
                basis[(2 * k + 1, modes + m)] = phi * c;
            }
            basis[(2 * k, 2 * modes)] = phase * c;
            basis[(2 * k + 1, 2 * modes)] = phase * s;
        }
        let basis_gram = basis.transpose() * &basis;
        let scale = config.perturbation_scale;
        let prior_var = if scale > 0.0 && modes > 0 && config.speed_offset_std > 0.0 {
            let long = (1..=modes).map(|m| (scale / m as f64).powi(2));
            let lat = (1..=modes).map(|m| (scale * config.lateral_ratio / m as f64).powi(2));
            // A speed offset dv moves the last waypoint by dv * (K - 1) * dt.
            let offset = config.speed_offset_std * denom * context.dt / norm.position_scale;
            long.chain(lat).chain(std::iter::once(offset * offset)).collect()
        } else {
            Vec::new()
        };
        Ok(Self {
            route: context.route.clone(),
            norm,
            nominal,
            nominal_arc,
            nominal_std,
            modes,
            basis,
            basis_gram,
            prior_var,
        })
    }

    pub fn nominal(&self) -> &Trajectory {
        &self.nominal
    }

    /// Posterior mean of the mode coefficients given `tau_t`, or `None` when
    /// the prior is degenerate.
    fn coefficients(&self, tau_t: &[[f64; 4]], t: usize, schedule: &DenoiseSchedule) -> Option<DVector<f64>> {
        if self.prior_var.is_empty() || self.prior_var.iter().any(|&v| v <= 0.0) {
            return None;
        }
        let abar = schedule.alpha_bar(t);
        let root = abar.sqrt();
        // Observation y = tau_t / sqrt(abar) - mu has noise variance (1 - abar) / abar.
        let y = DVector::from_iterator(
            2 * tau_t.len(),
            tau_t.iter().zip(&self.nominal_std).flat_map(|(r, n)| [r[0] / root - n[0], r[1] / root - n[1]]),
        );
        let ratio = (1.0 - abar) / abar;
        let mut system = self.basis_gram.clone();
        for (i, var) in self.prior_var.iter().enumerate() {
            system[(i, i)] += ratio / var;
        }
        let rhs = self.basis.transpose() * y;
        Some(system.cholesky().map_or_else(|| DVector::zeros(rhs.len()), |c| c.solve(&rhs)))
    }

    /// Clean trajectory this denoiser infers from `tau_t` (standardized).
    pub fn target(&self, tau_t: &[[f64; 4]], t: usize, schedule: &DenoiseSchedule) -> Sample {
        let Some(alpha) = self.coefficients(tau_t, t, schedule) else {
            return self.nominal_std.clone();
        };
        let scale = self.norm.position_scale;
        let k_len = self.nominal_arc.len();
        let denom = (k_len.max(2) - 1) as f64;
        let mut previous = f64::NEG_INFINITY;
        let waypoints: Vec<Waypoint> = self
            .nominal_arc
            .iter()
            .enumerate()
            .map(|(k, &s_nominal)| {
                let phase = k as f64 / denom;
                let (mut along, mut lateral) = (alpha[2 * self.modes] * phase, 0.0);
                for m in 0..self.modes {
                    let phi = mode_shape(m + 1, phase);
                    along += alpha[m] * phi;
                    lateral += alpha[self.modes + m] * phi;
                }
                // Progress never runs backward along the route.
                let s = (s_nominal + scale * along).max(previous);
                previous = s;
                route_waypoint(&self.route, s, scale * lateral)
            })
            .collect();
        self.norm.standardize(&Trajectory { waypoints, dt: self.nominal.dt })
    }
}

impl Denoiser for SyntheticDenoiser {
    fn predict_noise(
        &self,
        tau_t: &[[f64; 4]],
        t: usize,
        schedule: &DenoiseSchedule,
    ) -> Result<Sample, DiffusionError> {
        if tau_t.len() != self.nominal_std.len() {
            return Err(DiffusionError::Shape { expected: self.nominal_std.len(), got: tau_t.len() });
        }
        schedule.check_step(t)?;
        super::reestimate_noise(tau_t, &self.target(tau_t, t, schedule), t, schedule)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::ddpm_sample;
    use crate::dynamics::EgoState;
    use crate::geometry::Point;
    use crate::path::Polyline;

    fn context(seed: u64) -> SceneContext {
        SceneContext {
            ego0: EgoState::new(0.0, 0.0, 0.0, 0.0, 10.0),
            route: Polyline::new(vec![Point::new(-10.0, 0.0), Point::new(300.0, 0.0)]).unwrap(),
            neighbors: vec![],
            rng_seed: seed,
            horizon: 80,
            dt: 0.1,
            target_speed: 10.0,
        }
    }

    fn rms(a: &Trajectory, b: &Trajectory) -> f64 {
        let sum: f64 =
            a.waypoints.iter().zip(&b.waypoints).map(|(p, q)| (p.position() - q.position()).norm_squared()).sum();
        (sum / a.len() as f64).sqrt()
    }

    #[test]
    fn nominal_plan_cruises_along_route() {
        let plan = nominal_plan(&context(0), &SyntheticConfig::default());
        assert_eq!(plan.len(), 80);
        for (k, w) in plan.waypoints.iter().enumerate() {
            assert!((w.x - k as f64).abs() < 1e-9 && w.y == 0.0);
        }
    }

    #[test]
    fn nominal_plan_slows_for_curves() {
        let mut pts = vec![Point::new(-10.0, 0.0), Point::new(20.0, 0.0)];
        pts.extend(crate::path::arc_points(Point::new(20.0, 10.0), 10.0, -std::f64::consts::FRAC_PI_2, 1.5, 40));
        let ctx = SceneContext { route: Polyline::new(pts).unwrap(), ..context(0) };
        let plan = nominal_plan(&ctx, &SyntheticConfig::default());
        let speeds = plan.to_states(10.0);
        let cap = (2.0f64 * 10.0).sqrt();
        let in_curve = plan.waypoints.iter().zip(&speeds).filter(|(w, _)| w.x > 21.0 && w.y > 0.5);
        for (_, s) in in_curve {
            assert!(s.v <= cap + 0.2, "speed {} in curve", s.v);
        }
    }

    #[test]
    fn zero_perturbation_recovers_nominal() {
        let ctx = context(3);
        let config = SyntheticConfig { perturbation_scale: 0.0, ..Default::default() };
        let denoiser = SyntheticDenoiser::new(&ctx, &config).unwrap();
        let sched = DenoiseSchedule::default();
        let out = ddpm_sample(&denoiser, ctx.horizon, ctx.rng_seed, &sched, None).unwrap();
        let traj = Normalizer::around(&ctx.ego0).destandardize(&out, ctx.dt);
        for (a, b) in traj.waypoints.iter().zip(&denoiser.nominal().waypoints) {
            assert!((a.position() - b.position()).norm() <= 1e-6);
        }
    }

    #[test]
    fn seeds_change_the_sample() {
        let sched = DenoiseSchedule::default();
        let config = SyntheticConfig::default();
        let sample = |seed| {
            let ctx = context(seed);
            let d = SyntheticDenoiser::new(&ctx, &config).unwrap();
            Normalizer::around(&ctx.ego0).destandardize(&ddpm_sample(&d, 80, seed, &sched, None).unwrap(), 0.1)
        };
        let (a, b) = (sample(1), sample(2));
        assert!(rms(&a, &b) > 0.0);
        assert_eq!(sample(1), a);
    }

    /// RMS distance to the route at matched arc length, i.e. lateral offset.
    fn lateral_rms(traj: &Trajectory, route: &Polyline) -> f64 {
        let sum: f64 = traj.waypoints.iter().map(|w| route.project(w.position()).lateral.powi(2)).sum();
        (sum / traj.len() as f64).sqrt()
    }

    #[test]
    fn straight_route_sample_stays_close() {
        let sched = DenoiseSchedule::default();
        let config = SyntheticConfig::default();
        let wide = SyntheticConfig { perturbation_scale: 0.2, ..config };
        for seed in 0..20 {
            let ctx = context(seed);
            let norm = Normalizer::around(&ctx.ego0);
            let d = SyntheticDenoiser::new(&ctx, &config).unwrap();
            let traj = norm.destandardize(&ddpm_sample(&d, 80, seed, &sched, None).unwrap(), 0.1);
            assert!(lateral_rms(&traj, &ctx.route) < 0.5);
            let d = SyntheticDenoiser::new(&ctx, &wide).unwrap();
            let traj = norm.destandardize(&ddpm_sample(&d, 80, seed, &sched, None).unwrap(), 0.1);
            assert!(traj.waypoints.iter().all(|w| w.y.abs() < 1.0), "seed {seed}");
        }
    }

    #[test]
    fn sample_starts_at_the_ego_and_moves_forward() {
        let sched = DenoiseSchedule::default();
        let ctx = context(5);
        let d =
            SyntheticDenoiser::new(&ctx, &SyntheticConfig { perturbation_scale: 0.2, ..Default::default() }).unwrap();
        let traj = Normalizer::around(&ctx.ego0).destandardize(&ddpm_sample(&d, 80, 5, &sched, None).unwrap(), 0.1);
        assert!(traj.waypoints[0].position().norm() < 1e-9);
        assert!(traj.waypoints.windows(2).all(|w| w[1].x >= w[0].x - 1e-9));
    }

    #[test]
    fn injected_corrections_persist() {
        // A plan that lags the nominal is fed back at a low-noise step: the
        // inferred clean plan lags as well, including early in the horizon.
        let sched = DenoiseSchedule::default();
        let ctx = context(0);
        let d = SyntheticDenoiser::new(&ctx, &SyntheticConfig::default()).unwrap();
        let norm = Normalizer::around(&ctx.ego0);
        let slowed: Vec<Waypoint> = d
            .nominal()
            .waypoints
            .iter()
            .enumerate()
            .map(|(k, w)| Waypoint::new(w.x - 10.0 * (k as f64 / 79.0).powi(2), w.y, 1.0, 0.0))
            .collect();
        let clean = norm.standardize(&Trajectory { waypoints: slowed, dt: 0.1 });
        let t = 2;
        let a = sched.alpha_bar(t);
        let tau: Sample = clean.iter().map(|r| std::array::from_fn(|c| a.sqrt() * r[c])).collect();
        let inferred = norm.destandardize(&d.target(&tau, t, &sched), 0.1);
        let lag = |k: usize| d.nominal().waypoints[k].x - inferred.waypoints[k].x;
        assert!(lag(79) > 5.0, "end lag {}", lag(79));
        assert!(lag(20) > 0.2, "early lag {}", lag(20));
    }
}
