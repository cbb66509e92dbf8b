//! Waypoint tracker: discrete LQR on lateral error plus proportional speed control.

use nalgebra::{Matrix2, RowVector2, Vector2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{wrap_angle, BicycleModel, Control, EgoState, Waypoint};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrackError {
    #[error("no reference waypoints remain")]
    EmptyReference,
    #[error("Riccati iteration did not converge at speed {speed} m/s (residual {residual:e})")]
    RiccatiDiverged { speed: f64, residual: f64 },
    #[error("invalid tracker configuration: {0}")]
    InvalidConfig(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrackerConfig {
    /// State weight on cross-track error.
    pub q_lateral: f64,
    /// State weight on heading error.
    pub q_heading: f64,
    /// Input weight on steering.
    pub r_steer: f64,
    /// Proportional speed gain (1/s).
    pub speed_gain: f64,
    pub riccati_tol: f64,
    pub riccati_max_iter: usize,
    /// Gains below this speed are frozen at their value here.
    pub min_gain_speed: f64,
    pub max_gain_speed: f64,
    /// Width of the speed buckets of the gain table (m/s).
    pub speed_bucket: f64,
    /// Number of reference segments searched for the nearest point.
    pub search_window: usize,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            q_lateral: 1.0,
            q_heading: 2.0,
            r_steer: 8.0,
            speed_gain: 1.5,
            riccati_tol: 1e-9,
            riccati_max_iter: 200_000,
            min_gain_speed: 0.5,
            max_gain_speed: 25.0,
            speed_bucket: 0.1,
            search_window: 40,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RiccatiSolution {
    pub p: Matrix2<f64>,
    pub gain: RowVector2<f64>,
    pub iterations: usize,
    pub residual: f64,
}

/// Solves the discrete algebraic Riccati equation for a single-input system by
/// fixed-point iteration, stopping once the largest entry change, relative to
/// `max(1, |P|)`, is at most `tol`.
pub fn solve_riccati(
    a: &Matrix2<f64>,
    b: &Vector2<f64>,
    q: &Matrix2<f64>,
    r: f64,
    tol: f64,
    max_iter: usize,
) -> Option<RiccatiSolution> {
    let mut p = *q;
    for iteration in 1..=max_iter {
        let pb = p * b;
        let denom = r + b.dot(&pb);
        let bt_pa = pb.transpose() * a;
        let next = q + a.transpose() * p * a - bt_pa.transpose() * bt_pa / denom;
        let scale = next.amax().max(1.0);
        let residual = (next - p).amax() / scale;
        p = next;
        if residual <= tol {
            let pb = p * b;
            let gain = (pb.transpose() * a) / (r + b.dot(&pb));
            return Some(RiccatiSolution { p, gain, iterations: iteration, residual });
        }
    }
    None
}

/// Nominal control plus diagnostics from one tracking query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackOutput {
    pub control: Control,
    /// Index, within the supplied slice, of the reference segment used.
    pub segment: usize,
    pub cross_track: f64,
    pub heading_error: f64,
    pub reference_speed: f64,
}

/// Tracks a waypoint sequence by projecting onto its nearest segment.
///
/// Steering is feedforward from the segment curvature plus LQR feedback on
/// `(cross-track, heading)` error, with gains linearized at the current speed
/// and read from a table precomputed at construction. Acceleration follows the
/// speed implied by the matched segment's waypoint spacing.
#[derive(Debug, Clone)]
pub struct LqrTracker {
    config: TrackerConfig,
    model: BicycleModel,
    dt: f64,
    gains: Vec<RowVector2<f64>>,
}

impl LqrTracker {
    pub fn new(config: TrackerConfig, model: BicycleModel, dt: f64) -> Result<Self, TrackError> {
        if dt.is_nan() || dt <= 0.0 {
            return Err(TrackError::InvalidConfig("dt must be positive"));
        }
        if !(config.min_gain_speed > 0.0 && config.max_gain_speed >= config.min_gain_speed) {
            return Err(TrackError::InvalidConfig("gain speed range"));
        }
        if !(config.speed_bucket > 0.0 && config.r_steer > 0.0) {
            return Err(TrackError::InvalidConfig("speed bucket and steering weight must be positive"));
        }
        let buckets = ((config.max_gain_speed - config.min_gain_speed) / config.speed_bucket).round() as usize + 1;
        let q = Matrix2::new(config.q_lateral, 0.0, 0.0, config.q_heading);
        let mut gains = Vec::with_capacity(buckets);
        for i in 0..buckets {
            let speed = config.min_gain_speed + i as f64 * config.speed_bucket;
            let (a, b) = lateral_model(speed, model.wheelbase, dt);
            let sol = solve_riccati(&a, &b, &q, config.r_steer, config.riccati_tol, config.riccati_max_iter)
                .ok_or(TrackError::RiccatiDiverged { speed, residual: f64::NAN })?;
            gains.push(sol.gain);
        }
        Ok(Self { config, model, dt, gains })
    }

    pub fn config(&self) -> &TrackerConfig {
        &self.config
    }

    pub fn model(&self) -> &BicycleModel {
        &self.model
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Feedback gain `[k_lateral, k_heading]` used at `speed`.
    pub fn gain(&self, speed: f64) -> RowVector2<f64> {
        let c = &self.config;
        let idx = ((speed.max(c.min_gain_speed) - c.min_gain_speed) / c.speed_bucket).round() as usize;
        self.gains[idx.min(self.gains.len() - 1)]
    }

    pub fn track(&self, state: &EgoState, reference: &[Waypoint], dt: f64) -> Result<TrackOutput, TrackError> {
        let first = reference.first().ok_or(TrackError::EmptyReference)?;
        let pos = state.position();

        let (segment, foot, theta_ref, curvature, reference_speed) = if reference.len() == 1 {
            (0, first.position(), first.heading(), 0.0, state.v)
        } else {
            let last_seg = reference.len() - 2;
            let window = last_seg.min(self.config.search_window.saturating_sub(1));
            let mut best = (f64::INFINITY, 0usize, 0.0f64);
            for i in 0..=window {
                let a = reference[i].position();
                let d = reference[i + 1].position() - a;
                let len2 = d.norm_squared();
                let mut u = if len2 > 1e-18 { (pos - a).dot(&d) / len2 } else { 0.0 };
                if i > 0 {
                    u = u.max(0.0);
                }
                if i < last_seg {
                    u = u.min(1.0);
                }
                let dist = (pos - (a + d * u)).norm();
                if dist < best.0 {
                    best = (dist, i, u);
                }
            }
            let (_, i, u) = best;
            let (wa, wb) = (reference[i], reference[i + 1]);
            let d = wb.position() - wa.position();
            let w = u.clamp(0.0, 1.0);
            let cos = (1.0 - w) * wa.cos_theta + w * wb.cos_theta;
            let sin = (1.0 - w) * wa.sin_theta + w * wb.sin_theta;
            let theta_ref = if cos == 0.0 && sin == 0.0 { d.y.atan2(d.x) } else { sin.atan2(cos) };
            let len = d.norm();
            let curvature = if len > 1e-6 { wrap_angle(wb.heading() - wa.heading()) / len } else { 0.0 };
            (i, wa.position() + d * u, theta_ref, curvature, len / dt)
        };

        let normal = nalgebra::Vector2::new(-theta_ref.sin(), theta_ref.cos());
        let cross_track = (pos - foot).dot(&normal);
        let heading_error = wrap_angle(state.theta - theta_ref);
        let gain = self.gain(state.v);
        let feedforward = (self.model.wheelbase * curvature).atan();
        let limits = &self.model.limits;
        let mut delta = limits.clamp_steer(feedforward - gain[0] * cross_track - gain[1] * heading_error);
        if let Some(rate) = limits.steer_rate_max {
            let step = rate * dt;
            delta = limits.clamp_steer(delta.clamp(state.delta - step, state.delta + step));
        }
        let accel = limits.clamp_accel(self.config.speed_gain * (reference_speed - state.v));
        Ok(TrackOutput { control: Control::new(accel, delta), segment, cross_track, heading_error, reference_speed })
    }
}

/// Euler-discretized lateral error dynamics at `speed`.
fn lateral_model(speed: f64, wheelbase: f64, dt: f64) -> (Matrix2<f64>, Vector2<f64>) {
    (Matrix2::new(1.0, speed * dt, 0.0, 1.0), Vector2::new(0.0, speed * dt / wheelbase))
}
