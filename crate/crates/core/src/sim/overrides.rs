//! `key=value` overrides applied on top of a scenario and planner config.

use thiserror::Error;

use super::scenario::Scenario;
use crate::diffusion::DenoiseSchedule;
use crate::planner::{PlannerConfig, PlannerMode};

/// Every key accepted by [`apply_override`].
pub const OVERRIDE_KEYS: &[&str] = &[
    "mode",
    "eta",
    "horizon",
    "dt",
    "barrier.d_safe",
    "barrier.gamma",
    "barrier.slack_penalty",
    "barrier.v_max",
    "schedule.steps",
    "schedule.stochastic",
    "denoiser.perturbation_scale",
    "denoiser.speed_offset_std",
    "denoiser.accel",
    "denoiser.decel",
    "denoiser.lateral_accel",
    "limits.delta_max",
    "limits.accel_min",
    "limits.accel_max",
    "limits.steer_rate_max",
    "tracker.q_lateral",
    "tracker.q_heading",
    "tracker.r_steer",
    "tracker.speed_gain",
    "scenario.seed",
    "scenario.duration",
    "scenario.target_speed",
    "scenario.speed_limit",
    "scenario.corridor_half_width",
];

#[derive(Debug, Error, PartialEq)]
pub enum OverrideError {
    #[error("override `{0}` is not of the form key=value")]
    Syntax(String),
    #[error("unknown override key `{0}`")]
    UnknownKey(String),
    #[error("bad value `{value}` for `{key}`: {reason}")]
    BadValue { key: String, value: String, reason: String },
}

/// Applies one `key=value` override. Values are validated later, when the
/// planner and scenario are constructed.
pub fn apply_override(
    scenario: &mut Scenario,
    config: &mut PlannerConfig,
    assignment: &str,
) -> Result<(), OverrideError> {
    let (key, value) = assignment.split_once('=').ok_or_else(|| OverrideError::Syntax(assignment.to_string()))?;
    let (key, value) = (key.trim(), value.trim());
    if !OVERRIDE_KEYS.contains(&key) {
        return Err(OverrideError::UnknownKey(key.to_string()));
    }
    let bad = |reason: String| OverrideError::BadValue { key: key.to_string(), value: value.to_string(), reason };
    let num = || value.parse::<f64>().map_err(|e| bad(e.to_string()));
    let int = || value.parse::<u64>().map_err(|e| bad(e.to_string()));
    let flag = || value.parse::<bool>().map_err(|e| bad(e.to_string()));

    match key {
        "mode" => config.mode = value.parse::<PlannerMode>().map_err(bad)?,
        "eta" => config.eta = num()?,
        "horizon" => config.horizon = int()? as usize,
        "dt" => config.dt = num()?,
        "barrier.d_safe" => config.barrier.d_safe = num()?,
        "barrier.gamma" => config.barrier.gamma = num()?,
        "barrier.slack_penalty" => config.barrier.slack_penalty = num()?,
        "barrier.v_max" => config.barrier.v_max = num()?,
        "schedule.steps" => {
            let steps = int()? as usize;
            if steps == 0 {
                return Err(bad("need at least one step".into()));
            }
            config.schedule = DenoiseSchedule::cosine(steps, !config.schedule.is_deterministic());
        }
        "schedule.stochastic" => config.schedule = DenoiseSchedule::cosine(config.schedule.steps(), flag()?),
        "denoiser.perturbation_scale" => config.denoiser.perturbation_scale = num()?,
        "denoiser.speed_offset_std" => config.denoiser.speed_offset_std = num()?,
        "denoiser.accel" => config.denoiser.accel = num()?,
        "denoiser.decel" => config.denoiser.decel = num()?,
        "denoiser.lateral_accel" => config.denoiser.lateral_accel = num()?,
        "limits.delta_max" => config.limits.delta_max = num()?,
        "limits.accel_min" => config.limits.accel_min = num()?,
        "limits.accel_max" => config.limits.accel_max = num()?,
        "limits.steer_rate_max" => {
            config.limits.steer_rate_max = if value == "none" { None } else { Some(num()?) };
        }
        "tracker.q_lateral" => config.tracker.q_lateral = num()?,
        "tracker.q_heading" => config.tracker.q_heading = num()?,
        "tracker.r_steer" => config.tracker.r_steer = num()?,
        "tracker.speed_gain" => config.tracker.speed_gain = num()?,
        "scenario.seed" => scenario.seed = int()?,
        "scenario.duration" => scenario.duration = num()?,
        "scenario.target_speed" => scenario.target_speed = num()?,
        "scenario.speed_limit" => scenario.speed_limit = num()?,
        "scenario.corridor_half_width" => scenario.corridor_half_width = num()?,
        _ => unreachable!("key list and match arms agree"),
    }
    Ok(())
}
