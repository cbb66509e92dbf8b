//! Kinematic bicycle model, trajectories, and the waypoint tracker.

mod tracker;

pub use tracker::{solve_riccati, LqrTracker, RiccatiSolution, TrackError, TrackOutput, TrackerConfig};

use std::f64::consts::{PI, TAU};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Capsule, Point, Segment};

/// Full vehicle state; `(x, y)` is the rear-axle center.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct EgoState {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
    pub delta: f64,
    pub v: f64,
}

impl EgoState {
    pub fn new(x: f64, y: f64, theta: f64, delta: f64, v: f64) -> Self {
        Self { x, y, theta, delta, v }
    }

    pub fn position(&self) -> Point {
        Point::new(self.x, self.y)
    }

    pub fn is_finite(&self) -> bool {
        [self.x, self.y, self.theta, self.delta, self.v].iter().all(|c| c.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Control {
    pub accel: f64,
    pub delta_cmd: f64,
}

impl Control {
    pub fn new(accel: f64, delta_cmd: f64) -> Self {
        Self { accel, delta_cmd }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ShapeError {
    #[error("vehicle dimension `{0}` must be positive and finite")]
    NonPositive(&'static str),
    #[error("wheelbase {wheelbase} exceeds axis length {axis_length}")]
    WheelbaseTooLong { wheelbase: f64, axis_length: f64 },
}

/// Capsule footprint of a vehicle relative to its rear axle.
///
/// The axis runs from the rear-end center to the front-end center and is
/// centered on the wheelbase midpoint, so it extends `rear_overhang()` behind
/// the rear axle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VehicleShape {
    pub axis_length: f64,
    pub half_width: f64,
    pub wheelbase: f64,
}

impl Default for VehicleShape {
    fn default() -> Self {
        Self { axis_length: 4.6, half_width: 1.0, wheelbase: 2.9 }
    }
}

impl VehicleShape {
    pub fn validate(&self) -> Result<(), ShapeError> {
        for (name, value) in
            [("axis_length", self.axis_length), ("half_width", self.half_width), ("wheelbase", self.wheelbase)]
        {
            if !(value > 0.0 && value.is_finite()) {
                return Err(ShapeError::NonPositive(name));
            }
        }
        if self.wheelbase > self.axis_length {
            return Err(ShapeError::WheelbaseTooLong { wheelbase: self.wheelbase, axis_length: self.axis_length });
        }
        Ok(())
    }

    pub fn rear_overhang(&self) -> f64 {
        0.5 * (self.axis_length - self.wheelbase)
    }

    /// Signed distance along the heading from the rear axle to the axis point
    /// at parameter `s`.
    pub fn axis_offset(&self, s: f64) -> f64 {
        -self.rear_overhang() + s * self.axis_length
    }

    /// Distance from the rear axle to the front end of the axis.
    pub fn front_extent(&self) -> f64 {
        self.axis_length - self.rear_overhang()
    }

    pub fn axis(&self, x: f64, y: f64, theta: f64) -> Segment {
        let heading = Point::new(theta.cos(), theta.sin());
        let origin = Point::new(x, y);
        Segment::new(origin + heading * self.axis_offset(0.0), origin + heading * self.axis_offset(1.0))
    }

    pub fn capsule(&self, x: f64, y: f64, theta: f64) -> Capsule {
        Capsule { axis: self.axis(x, y, theta), half_width: self.half_width }
    }

    pub fn capsule_at(&self, state: &EgoState) -> Capsule {
        self.capsule(state.x, state.y, state.theta)
    }
}

/// Actuation limits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VehicleLimits {
    pub delta_max: f64,
    pub accel_min: f64,
    pub accel_max: f64,
    /// Maximum steering rate (rad/s) enforced by the tracker; `None` disables it.
    pub steer_rate_max: Option<f64>,
}

impl Default for VehicleLimits {
    fn default() -> Self {
        Self { delta_max: 0.6, accel_min: -6.0, accel_max: 3.0, steer_rate_max: Some(0.7) }
    }
}

impl VehicleLimits {
    pub fn clamp_accel(&self, accel: f64) -> f64 {
        accel.clamp(self.accel_min, self.accel_max)
    }

    pub fn clamp_steer(&self, delta: f64) -> f64 {
        delta.clamp(-self.delta_max, self.delta_max)
    }
}

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(theta: f64) -> f64 {
    let wrapped = (theta + PI).rem_euclid(TAU) - PI;
    if wrapped <= -PI {
        wrapped + TAU
    } else {
        wrapped
    }
}

/// Kinematic bicycle model integrated with explicit Euler.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BicycleModel {
    pub wheelbase: f64,
    pub limits: VehicleLimits,
}

impl Default for BicycleModel {
    fn default() -> Self {
        Self { wheelbase: VehicleShape::default().wheelbase, limits: VehicleLimits::default() }
    }
}

impl BicycleModel {
    pub fn new(wheelbase: f64, limits: VehicleLimits) -> Self {
        Self { wheelbase, limits }
    }

    /// One Euler step. The steering angle is set directly to the (clamped)
    /// command, which also drives the heading update of this step.
    pub fn step(&self, state: &EgoState, control: &Control, dt: f64) -> EgoState {
        let delta = self.limits.clamp_steer(control.delta_cmd);
        let accel = self.limits.clamp_accel(control.accel);
        let (sin, cos) = state.theta.sin_cos();
        EgoState {
            x: state.x + state.v * cos * dt,
            y: state.y + state.v * sin * dt,
            theta: wrap_angle(state.theta + state.v * delta.tan() / self.wheelbase * dt),
            delta,
            v: (state.v + accel * dt).max(0.0),
        }
    }

    /// States visited by applying `controls` in order; one longer than `controls`.
    pub fn rollout(&self, initial: &EgoState, controls: &[Control], dt: f64) -> Vec<EgoState> {
        let mut states = Vec::with_capacity(controls.len() + 1);
        states.push(*initial);
        let mut current = *initial;
        for control in controls {
            current = self.step(&current, control, dt);
            states.push(current);
        }
        states
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Waypoint {
    pub x: f64,
    pub y: f64,
    pub cos_theta: f64,
    pub sin_theta: f64,
}

impl Waypoint {
    pub fn new(x: f64, y: f64, cos_theta: f64, sin_theta: f64) -> Self {
        Self { x, y, cos_theta, sin_theta }
    }

    pub fn from_pose(x: f64, y: f64, theta: f64) -> Self {
        let (sin, cos) = theta.sin_cos();
        Self::new(x, y, cos, sin)
    }

    pub fn position(&self) -> Point {
        Point::new(self.x, self.y)
    }

    /// Heading from the (possibly unnormalized) direction channels.
    pub fn heading(&self) -> f64 {
        self.sin_theta.atan2(self.cos_theta)
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x, self.y, self.cos_theta, self.sin_theta]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrajectoryError {
    #[error("trajectory needs at least 2 waypoints, got {0}")]
    TooShort(usize),
    #[error("timestep must be positive and finite, got {0}")]
    InvalidDt(f64),
    #[error("waypoint {0} is not finite")]
    NonFinite(usize),
}

/// K waypoints `(x, y, cos theta, sin theta)` spaced `dt` apart in time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub waypoints: Vec<Waypoint>,
    pub dt: f64,
}

impl Trajectory {
    pub fn new(waypoints: Vec<Waypoint>, dt: f64) -> Result<Self, TrajectoryError> {
        let traj = Self { waypoints, dt };
        traj.validate()?;
        Ok(traj)
    }

    pub fn validate(&self) -> Result<(), TrajectoryError> {
        if self.waypoints.len() < 2 {
            return Err(TrajectoryError::TooShort(self.waypoints.len()));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(TrajectoryError::InvalidDt(self.dt));
        }
        if let Some(i) = self.waypoints.iter().position(|w| !w.to_array().iter().all(|c| c.is_finite())) {
            return Err(TrajectoryError::NonFinite(i));
        }
        Ok(())
    }

    pub fn from_states(states: &[EgoState], dt: f64) -> Self {
        Self { waypoints: states.iter().map(|s| Waypoint::from_pose(s.x, s.y, s.theta)).collect(), dt }
    }

    pub fn len(&self) -> usize {
        self.waypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.waypoints.is_empty()
    }

    /// Pose-only states with finite-difference speeds; the first speed is `v0`
    /// and the steering angle is zero.
    pub fn to_states(&self, v0: f64) -> Vec<EgoState> {
        self.waypoints
            .iter()
            .enumerate()
            .map(|(i, w)| {
                let v = if i == 0 { v0 } else { (w.position() - self.waypoints[i - 1].position()).norm() / self.dt };
                EgoState::new(w.x, w.y, w.heading(), 0.0, v)
            })
            .collect()
    }
}

/// Converts waypoints to states; see [`Trajectory::to_states`].
pub fn waypoints_to_states(traj: &Trajectory, v0: f64) -> Vec<EgoState> {
    traj.to_states(v0)
}
