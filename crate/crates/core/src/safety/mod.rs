//! Capsule barrier, its velocity-linear derivative, the velocity-level safety
//! QP, and the sequential safety filters built on them.

mod filter;

pub use filter::{FilterError, FilterResult, Neighbor, SafetyFilter};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{EgoState, VehicleShape};
use crate::geometry::{capsule_distance, distance_gradient, Capsule, GradientError, StateGradient};

pub type AgentId = u32;

/// Slack above this (m/s) counts as an activated constraint relaxation.
pub const SLACK_ACTIVE_THRESHOLD: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ParamsError {
    #[error("barrier parameter `{0}` must be positive and finite")]
    NonPositive(&'static str),
    #[error("slack penalty must be at least 1e4, got {0}")]
    PenaltyTooSmall(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BarrierParams {
    /// Safety margin subtracted from the capsule distance (m).
    pub d_safe: f64,
    /// Slope of the linear class-K function (1/s).
    pub gamma: f64,
    /// Quadratic penalty on constraint slack.
    pub slack_penalty: f64,
    /// Upper speed bound inside the QP (m/s).
    pub v_max: f64,
}

impl Default for BarrierParams {
    fn default() -> Self {
        Self { d_safe: 0.3, gamma: 1.0, slack_penalty: 1e12, v_max: 20.0 }
    }
}

impl BarrierParams {
    pub fn validate(&self) -> Result<(), ParamsError> {
        for (name, value) in [("d_safe", self.d_safe), ("gamma", self.gamma), ("v_max", self.v_max)] {
            if !(value > 0.0 && value.is_finite()) {
                return Err(ParamsError::NonPositive(name));
            }
        }
        if !(self.slack_penalty >= 1e4 && self.slack_penalty.is_finite()) {
            return Err(ParamsError::PenaltyTooSmall(self.slack_penalty));
        }
        Ok(())
    }
}

/// How a velocity coefficient was obtained when the exact gradient is unavailable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fallback {
    /// Parallel overlapping axes: subgradient at the tie-broken closest pair.
    Subgradient,
    /// Axes in contact: the coefficient is set to -1 so any forward motion
    /// tightens the constraint.
    Contact,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BarrierEval {
    pub agent: AgentId,
    pub h: f64,
    pub dh_dv: f64,
    pub fallback: Option<Fallback>,
}

/// Capsule distance minus the safety margin.
pub fn barrier(ego: &EgoState, ego_shape: &VehicleShape, other: &Capsule, params: &BarrierParams) -> f64 {
    capsule_distance(&ego_shape.capsule_at(ego), other) - params.d_safe
}

/// Failure modes of [`dh_dv`].
#[derive(Debug, Error, Clone, Copy, PartialEq)]
pub enum CoefficientError {
    /// Closest pair not unique; `fallback` is the coefficient of the subgradient
    /// at the tie-broken pair.
    #[error("closest pair is not unique; subgradient coefficient {fallback}")]
    NonUnique { fallback: f64 },
    #[error("axes are in contact; coefficient undefined")]
    ZeroDistance,
}

/// Coefficient of `v` in the time derivative of the barrier along the bicycle
/// model with steering `delta_nom`:
/// `dh/dx cos(theta) + dh/dy sin(theta) + dh/dtheta tan(delta_nom) / L`.
pub fn dh_dv(
    ego: &EgoState,
    ego_shape: &VehicleShape,
    other: &Capsule,
    delta_nom: f64,
    wheelbase: f64,
) -> Result<f64, CoefficientError> {
    let (sin, cos) = ego.theta.sin_cos();
    let project = |g: StateGradient| g.x * cos + g.y * sin + g.theta * delta_nom.tan() / wheelbase;
    match distance_gradient(ego, ego_shape, other) {
        Ok(g) => Ok(project(g)),
        Err(GradientError::NonUnique { subgradient }) => {
            Err(CoefficientError::NonUnique { fallback: project(subgradient) })
        }
        Err(GradientError::ZeroDistance) => Err(CoefficientError::ZeroDistance),
    }
}

/// Barrier value and velocity coefficient with the documented fallbacks applied.
pub fn evaluate(
    agent: AgentId,
    ego: &EgoState,
    ego_shape: &VehicleShape,
    other: &Capsule,
    delta_nom: f64,
    wheelbase: f64,
    params: &BarrierParams,
) -> BarrierEval {
    let h = barrier(ego, ego_shape, other, params);
    let (dh_dv, fallback) = match dh_dv(ego, ego_shape, other, delta_nom, wheelbase) {
        Ok(c) => (c, None),
        Err(CoefficientError::NonUnique { fallback }) => (fallback, Some(Fallback::Subgradient)),
        Err(CoefficientError::ZeroDistance) => (-1.0, Some(Fallback::Contact)),
    };
    BarrierEval { agent, h, dh_dv, fallback }
}

/// Solution of the velocity-level QP.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeedSolution {
    pub v: f64,
    /// Per-constraint slack, aligned with the input evaluations.
    pub slack: Vec<f64>,
    /// True when the hard constraints admitted a speed in `[0, v_max]`.
    pub feasible: bool,
}

impl SpeedSolution {
    pub fn slack_active(&self) -> bool {
        self.slack.iter().any(|&s| s > SLACK_ACTIVE_THRESHOLD)
    }
}

/// Penalized objective of the velocity QP at speed `v` with optimal slack.
pub fn speed_objective(v: f64, v_nom: f64, evals: &[BarrierEval], params: &BarrierParams) -> f64 {
    let violation: f64 = evals.iter().map(|e| (-params.gamma * e.h - e.dh_dv * v).max(0.0).powi(2)).sum();
    (v - v_nom).powi(2) + params.slack_penalty * violation
}

/// Minimally modified safe speed.
///
/// Solves `min (v - v_nom)^2 + rho |xi|^2` subject to
/// `dh_dv_j v >= -gamma h_j - xi_j`, `xi >= 0`, `0 <= v <= v_max`.
/// When the hard constraints admit a speed, the answer is `v_nom` clamped into
/// that interval with zero slack. Otherwise the penalized objective is a convex
/// piecewise quadratic in `v`; it is minimized exactly piece by piece.
pub fn safe_speed(v_nom: f64, evals: &[BarrierEval], params: &BarrierParams) -> SpeedSolution {
    let gamma = params.gamma;
    let mut lo: f64 = 0.0;
    let mut hi = params.v_max;
    let mut consistent = true;
    for e in evals {
        let rhs = -gamma * e.h;
        if e.dh_dv > 0.0 {
            lo = lo.max(rhs / e.dh_dv);
        } else if e.dh_dv < 0.0 {
            hi = hi.min(rhs / e.dh_dv);
        } else if rhs > 0.0 {
            consistent = false;
        }
    }
    if consistent && lo <= hi {
        return SpeedSolution { v: v_nom.clamp(lo, hi), slack: vec![0.0; evals.len()], feasible: true };
    }

    let v = minimize_penalized(v_nom, evals, params);
    let slack = evals.iter().map(|e| (-gamma * e.h - e.dh_dv * v).max(0.0)).collect();
    SpeedSolution { v, slack, feasible: false }
}

fn minimize_penalized(v_nom: f64, evals: &[BarrierEval], params: &BarrierParams) -> f64 {
    let rho = params.slack_penalty;
    let gamma = params.gamma;
    let mut knots = vec![0.0, params.v_max];
    for e in evals {
        if e.dh_dv != 0.0 {
            let b = -gamma * e.h / e.dh_dv;
            if b > 0.0 && b < params.v_max {
                knots.push(b);
            }
        }
    }
    knots.sort_by(f64::total_cmp);

    let mut best = (f64::INFINITY, 0.0);
    for w in knots.windows(2) {
        let (l, u) = (w[0], w[1]);
        let mid = 0.5 * (l + u);
        let (mut num, mut den) = (v_nom, 1.0);
        for e in evals {
            let rhs = -gamma * e.h;
            if rhs - e.dh_dv * mid > 0.0 {
                num += rho * e.dh_dv * rhs;
                den += rho * e.dh_dv * e.dh_dv;
            }
        }
        for v in [(num / den).clamp(l, u), l, u] {
            let f = speed_objective(v, v_nom, evals, params);
            if f < best.0 || (f == best.0 && v < best.1) {
                best = (f, v);
            }
        }
    }
    best.1
}
