//! Denoising loop with per-step safety correction of the clean estimate.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffusion::{
    ddpm_sample, DenoiseSchedule, Denoiser, DiffusionError, HookError, Normalizer, Sample, SceneContext,
    SyntheticConfig, SyntheticDenoiser,
};
use crate::dynamics::{
    BicycleModel, Control, EgoState, LqrTracker, TrackError, TrackerConfig, Trajectory, VehicleLimits, VehicleShape,
};
use crate::safety::{barrier, AgentId, BarrierParams, FilterError, FilterResult, Neighbor, SafetyFilter};

pub type CriticalSet = BTreeSet<AgentId>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlannerMode {
    /// Correct the clean estimate at every denoising step.
    Full,
    /// Plain sampling, one correction of the final sample.
    PostHocOnly,
    /// Like `Full`, but every agent is critical from the first step.
    NoSelectiveFilter,
    /// Like `Full`, with arc-length re-timing instead of tracking.
    ArcReparam,
    /// Plain sampling followed by tracking; no safety correction.
    Unfiltered,
}

impl PlannerMode {
    pub const ALL: [PlannerMode; 5] = [
        PlannerMode::Full,
        PlannerMode::PostHocOnly,
        PlannerMode::NoSelectiveFilter,
        PlannerMode::ArcReparam,
        PlannerMode::Unfiltered,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PlannerMode::Full => "full",
            PlannerMode::PostHocOnly => "post_hoc_only",
            PlannerMode::NoSelectiveFilter => "no_selective_filter",
            PlannerMode::ArcReparam => "arc_reparam",
            PlannerMode::Unfiltered => "unfiltered",
        }
    }

    fn corrects_each_step(self) -> bool {
        matches!(self, PlannerMode::Full | PlannerMode::NoSelectiveFilter | PlannerMode::ArcReparam)
    }
}

impl fmt::Display for PlannerMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PlannerMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        PlannerMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown planner mode `{s}` (expected one of: full, post_hoc_only, no_selective_filter, arc_reparam, unfiltered)"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlannerConfig {
    pub mode: PlannerMode,
    /// Proximity threshold on the minimum barrier value (m).
    pub eta: f64,
    pub barrier: BarrierParams,
    pub schedule: DenoiseSchedule,
    pub tracker: TrackerConfig,
    pub limits: VehicleLimits,
    pub ego_shape: VehicleShape,
    pub denoiser: SyntheticConfig,
    /// Waypoints per plan.
    pub horizon: usize,
    pub dt: f64,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            mode: PlannerMode::Full,
            eta: 2.0,
            barrier: BarrierParams::default(),
            schedule: DenoiseSchedule::default(),
            tracker: TrackerConfig::default(),
            limits: VehicleLimits::default(),
            ego_shape: VehicleShape::default(),
            denoiser: SyntheticConfig::default(),
            horizon: 80,
            dt: 0.1,
        }
    }
}

#[derive(Debug, Error)]
pub enum PlannerError {
    #[error("invalid planner configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Track(#[from] TrackError),
    #[error(transparent)]
    Filter(#[from] FilterError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
}

/// Outcome of one planning call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanRecord {
    pub mode: PlannerMode,
    /// Emitted trajectory; reproducible from `ego0` and `controls` except in
    /// arc re-timing mode.
    pub final_plan: Trajectory,
    pub controls: Vec<Control>,
    /// Sampler output before the final filter pass.
    pub sample: Trajectory,
    /// Slack activation rate per denoising step; entry `i` is step `T - i`.
    pub per_step_slack_rate: Vec<f64>,
    /// Critical set after each denoising step, same indexing.
    pub critical_history: Vec<CriticalSet>,
    pub final_critical: CriticalSet,
    /// Filter pass that produced the emitted plan.
    pub emitted: FilterResult,
    /// Some critical agent already violated the barrier at the start.
    pub infeasible_start: bool,
}

impl PlanRecord {
    /// Slack activation rate of the emitted plan.
    pub fn final_slack_rate(&self) -> f64 {
        self.emitted.slack_rate()
    }
}

/// Agents whose minimum barrier value against the plan over the horizon is
/// at most `eta`.
pub fn proximity_filter(
    plan: &Trajectory,
    neighbors: &[Neighbor],
    ego_shape: &VehicleShape,
    params: &BarrierParams,
    eta: f64,
) -> CriticalSet {
    let states = plan.to_states(0.0);
    neighbors
        .iter()
        .filter(|n| {
            let steps = states.len().min(n.track.len());
            (0..steps).any(|k| barrier(&states[k], ego_shape, &n.capsule_at(k), params) <= eta)
        })
        .map(|n| n.id)
        .collect()
}

#[derive(Debug, Clone)]
pub struct Planner {
    config: PlannerConfig,
    filter: SafetyFilter,
}

impl Planner {
    pub fn new(config: PlannerConfig) -> Result<Self, PlannerError> {
        if !(config.eta >= 0.0 && config.eta.is_finite()) {
            return Err(PlannerError::Config(format!("eta must be non-negative, got {}", config.eta)));
        }
        if config.horizon < 2 {
            return Err(PlannerError::Config(format!("horizon must be at least 2, got {}", config.horizon)));
        }
        if !(config.dt > 0.0 && config.dt.is_finite()) {
            return Err(PlannerError::Config(format!("dt must be positive, got {}", config.dt)));
        }
        config.barrier.validate().map_err(|e| PlannerError::Config(e.to_string()))?;
        config.ego_shape.validate().map_err(|e| PlannerError::Config(e.to_string()))?;
        let model = BicycleModel::new(config.ego_shape.wheelbase, config.limits);
        let tracker = LqrTracker::new(config.tracker, model, config.dt)?;
        let filter = SafetyFilter::new(config.ego_shape, config.barrier, tracker);
        Ok(Self { config, filter })
    }

    pub fn config(&self) -> &PlannerConfig {
        &self.config
    }

    pub fn filter(&self) -> &SafetyFilter {
        &self.filter
    }

    pub fn model(&self) -> &BicycleModel {
        self.filter.tracker.model()
    }

    pub fn proximity_filter(&self, plan: &Trajectory, neighbors: &[Neighbor]) -> CriticalSet {
        proximity_filter(plan, neighbors, &self.config.ego_shape, &self.config.barrier, self.config.eta)
    }

    fn correct(&self, plan: &Trajectory, ego0: &EgoState, neighbors: &[Neighbor]) -> Result<FilterResult, FilterError> {
        match self.config.mode {
            PlannerMode::ArcReparam => self.filter.arc_reparam(plan, ego0, neighbors),
            _ => self.filter.pc_cbf(plan, ego0, neighbors),
        }
    }

    fn select(neighbors: &[Neighbor], critical: &CriticalSet) -> Vec<Neighbor> {
        neighbors.iter().filter(|n| critical.contains(&n.id)).cloned().collect()
    }

    /// Samples a plan with `denoiser`, applying the configured correction.
    pub fn plan(&self, context: &SceneContext, denoiser: &dyn Denoiser) -> Result<PlanRecord, PlannerError> {
        context.validate()?;
        let k_len = context.horizon;
        for n in &context.neighbors {
            if n.track.len() < k_len {
                return Err(FilterError::MismatchedHorizon { agent: n.id, len: n.track.len(), needed: k_len }.into());
            }
        }
        let mode = self.config.mode;
        let steps = self.config.schedule.steps();
        let dt = context.dt;
        let ego0 = &context.ego0;
        let norm = Normalizer::around(ego0);

        let mut critical = CriticalSet::new();
        let mut history: Vec<CriticalSet> = Vec::with_capacity(steps);
        let mut rates = vec![0.0; steps];
        let mut last: Option<FilterResult> = None;

        let sample = {
            let mut hook = |t: usize, estimate: &[[f64; 4]]| -> Result<Option<Sample>, HookError> {
                if !mode.corrects_each_step() {
                    history.push(critical.clone());
                    return Ok(None);
                }
                let plan = norm.destandardize(estimate, dt);
                if mode == PlannerMode::NoSelectiveFilter {
                    critical.extend(context.neighbors.iter().map(|n| n.id));
                } else {
                    critical.extend(self.proximity_filter(&plan, &context.neighbors));
                }
                history.push(critical.clone());
                if critical.is_empty() {
                    last = None;
                    return Ok(None);
                }
                let result = self.correct(&plan, ego0, &Self::select(&context.neighbors, &critical))?;
                rates[steps - t] = result.slack_rate();
                let corrected = norm.standardize(&result.corrected);
                last = Some(result);
                Ok(Some(corrected))
            };
            ddpm_sample(denoiser, k_len, context.rng_seed, &self.config.schedule, Some(&mut hook))?
        };
        let sample = norm.destandardize(&sample, dt);

        let (emitted, final_critical) = match (mode, last) {
            (_, Some(result)) => (result, critical),
            (PlannerMode::PostHocOnly, None) => {
                let r = self.proximity_filter(&sample, &context.neighbors);
                let result = self.filter.pc_cbf(&sample, ego0, &Self::select(&context.neighbors, &r))?;
                rates[steps - 1] = result.slack_rate();
                if let Some(h) = history.last_mut() {
                    *h = r.clone();
                }
                (result, r)
            }
            (_, None) => (self.correct(&sample, ego0, &[])?, critical),
        };

        let infeasible_start = emitted.h.first().is_some_and(|row| row.iter().any(|&h| h < 0.0));
        Ok(PlanRecord {
            mode,
            final_plan: emitted.corrected.clone(),
            controls: emitted.controls.clone(),
            sample,
            per_step_slack_rate: rates,
            critical_history: history,
            final_critical,
            emitted,
            infeasible_start,
        })
    }

    /// One receding-horizon cycle with the synthetic denoiser: plans from the
    /// current context and returns the first control with the full record.
    pub fn replan_cycle(&self, context: &SceneContext) -> Result<(Control, PlanRecord), PlannerError> {
        let denoiser = SyntheticDenoiser::new(context, &self.config.denoiser)?;
        let record = self.plan(context, &denoiser)?;
        let control = record.controls[0];
        Ok((control, record))
    }
}
