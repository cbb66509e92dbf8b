//! Closed-loop micro-simulator: scenarios, reactive neighbors, collision
//! checks, scoring, and per-step traces.

mod battery;
mod metrics;
mod overrides;
mod scenario;
mod world;

pub use battery::{generate_battery, run_battery, summarize, BatteryError, ModeRow, SlackProfile, BATTERY_NAMES};
pub use metrics::{composite_score, time_to_collision, Mover, ScoreBreakdown, SOFT_WEIGHTS};
pub use overrides::{apply_override, OverrideError, OVERRIDE_KEYS};
pub use scenario::{AgentSpec, Behavior, IdmParams, Scenario, ScenarioError, ScenarioFile, SCHEMA_VERSION};
pub use world::{
    detect_collision, idm_accel, idm_equilibrium_gap, step_world, AgentPose, AgentState, World, GAP_HORIZON,
    IDM_MAX_BRAKE, LANE_HALF_WIDTH,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffusion::SceneContext;
use crate::dynamics::{BicycleModel, Control, EgoState};
use crate::planner::{Planner, PlannerConfig, PlannerError, PlannerMode};
use crate::safety::{barrier, AgentId};

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Planner(#[from] PlannerError),
}

/// Seed of the planner call at `cycle`, derived from the scenario seed.
pub fn cycle_seed(seed: u64, cycle: usize) -> u64 {
    // splitmix64 finalizer over the combined value.
    let mut z = seed ^ (cycle as u64).wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgentBarrier {
    pub id: AgentId,
    pub h: f64,
}

/// One simulation step: the state before the control is applied, the plan
/// statistics of the cycle, and the control itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: usize,
    pub time: f64,
    pub ego: EgoState,
    pub control: Control,
    pub agents: Vec<AgentPose>,
    /// Critical agents of this cycle's emitted plan.
    pub critical: Vec<AgentId>,
    /// Barrier value of each critical agent at the current state.
    pub h: Vec<AgentBarrier>,
    /// Slack activation rate of the emitted plan.
    pub slack_rate: f64,
    /// Largest slack value in the emitted plan.
    pub max_slack: f64,
    /// Slack activation rate per denoising step, first step first.
    pub slack_profile: Vec<f64>,
    /// Rollout steps where the velocity constraint changed the speed.
    pub qp_active_steps: usize,
    pub infeasible_start: bool,
    /// Smallest time to collision over all agents (s).
    pub ttc: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CollisionInfo {
    pub agent: AgentId,
    pub penetration: f64,
    pub time: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComfortPeaks {
    pub max_abs_accel: f64,
    pub max_abs_jerk: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimSummary {
    pub scenario: String,
    pub mode: PlannerMode,
    pub seed: u64,
    pub steps: usize,
    pub collided: bool,
    pub collision: Option<CollisionInfo>,
    /// Smallest barrier value over time and all agents; `None` without agents.
    pub min_h: Option<f64>,
    /// Smallest barrier value over time and each cycle's critical agents.
    pub min_h_critical: Option<f64>,
    pub composite: f64,
    pub score: ScoreBreakdown,
    /// Distance gained along the route (m).
    pub progress: f64,
    /// Progress expected at the target speed, bounded by the route end (m).
    pub expected_progress: f64,
    pub comfort_peaks: ComfortPeaks,
    /// Per-denoising-step slack activation rate averaged over cycles, first step first.
    pub slack_profile: Vec<f64>,
    /// Emitted-plan slack activation rate averaged over cycles.
    pub mean_final_slack_rate: f64,
    /// Some cycle emitted a plan with active slack.
    pub final_step_slack: bool,
    pub infeasible_starts: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimResult {
    pub summary: SimSummary,
    pub traces: Vec<TraceRecord>,
}

/// Runs `scenario` closed loop: replan, apply the first control, advance the
/// world, check for collisions. Stops at the first collision.
pub fn run_scenario(scenario: &Scenario, config: &PlannerConfig) -> Result<SimResult, SimError> {
    scenario.validate()?;
    let planner = Planner::new(config.clone())?;
    let dt = config.dt;
    let shape = config.ego_shape;
    let params = config.barrier;
    let model = BicycleModel::new(shape.wheelbase, config.limits);
    let mut world = World::from_scenario(scenario, shape, model);
    let route = &scenario.route;
    let start_s = route.project(world.ego.position()).s;
    let steps = (scenario.duration / dt).round() as usize;
    let t_steps = config.schedule.steps();

    let mut traces = Vec::with_capacity(steps);
    let mut collision =
        detect_collision(&world).map(|(agent, penetration)| CollisionInfo { agent, penetration, time: 0.0 });
    let mut min_h: Option<f64> = None;
    let mut min_h_critical: Option<f64> = None;
    let mut in_corridor = true;
    let mut critical: Vec<AgentId> = Vec::new();
    let mut profile_sum = vec![0.0; t_steps];
    let mut final_rate_sum = 0.0;
    let mut final_step_slack = false;
    let mut infeasible_starts = 0;
    let (mut ttc_ok, mut speed_ok, mut comfort_ok) = (0usize, 0usize, 0usize);
    let mut peaks = ComfortPeaks { max_abs_accel: 0.0, max_abs_jerk: 0.0 };
    let mut prev_accel: Option<f64> = None;

    let lower = |slot: &mut Option<f64>, h: f64| *slot = Some(slot.map_or(h, |m| m.min(h)));
    let observe = |world: &World, critical: &[AgentId], min_h: &mut Option<f64>, min_h_critical: &mut Option<f64>| {
        let mut values = Vec::new();
        for agent in &world.agents {
            let h = barrier(&world.ego, &shape, &agent.capsule(), &params);
            lower(min_h, h);
            if critical.contains(&agent.id) {
                lower(min_h_critical, h);
                values.push(AgentBarrier { id: agent.id, h });
            }
        }
        values
    };

    for step in 0..steps {
        if collision.is_some() {
            break;
        }
        let context = SceneContext {
            ego0: world.ego,
            route: route.clone(),
            neighbors: world.predictions(config.horizon, dt),
            rng_seed: cycle_seed(scenario.seed, step),
            horizon: config.horizon,
            dt,
            target_speed: scenario.target_speed,
        };
        let (control, record) = planner.replan_cycle(&context)?;
        critical = record.final_critical.iter().copied().collect();
        let h = observe(&world, &critical, &mut min_h, &mut min_h_critical);

        let ego_mover = Mover::new(&shape, world.ego.x, world.ego.y, world.ego.theta, world.ego.v);
        let ttc = world
            .agents
            .iter()
            .map(|a| {
                let p = a.pose();
                time_to_collision(&ego_mover, &Mover::new(&a.shape, p.x, p.y, p.theta, p.v))
            })
            .fold(metrics::TTC_HORIZON, f64::min);
        ttc_ok += usize::from(ttc >= metrics::TTC_THRESHOLD);
        speed_ok += usize::from(world.ego.v <= scenario.speed_limit);
        in_corridor &= route.project(world.ego.position()).lateral.abs() <= scenario.corridor_half_width;

        for (sum, rate) in profile_sum.iter_mut().zip(&record.per_step_slack_rate) {
            *sum += rate;
        }
        let final_rate = record.final_slack_rate();
        final_rate_sum += final_rate;
        final_step_slack |= record.emitted.slack_active();
        infeasible_starts += usize::from(record.infeasible_start);
        let max_slack = record.emitted.slack.iter().flatten().copied().fold(0.0, f64::max);

        traces.push(TraceRecord {
            step,
            time: world.time,
            ego: world.ego,
            control,
            agents: world.poses(),
            critical: critical.clone(),
            h,
            slack_rate: final_rate,
            max_slack,
            slack_profile: record.per_step_slack_rate.clone(),
            qp_active_steps: record.emitted.qp_active.iter().filter(|&&a| a).count(),
            infeasible_start: record.infeasible_start,
            ttc,
        });

        let v_before = world.ego.v;
        world.step(&control, dt);
        let accel = (world.ego.v - v_before) / dt;
        let jerk = prev_accel.map_or(0.0, |a| (accel - a) / dt);
        prev_accel = Some(accel);
        peaks.max_abs_accel = peaks.max_abs_accel.max(accel.abs());
        peaks.max_abs_jerk = peaks.max_abs_jerk.max(jerk.abs());
        comfort_ok += usize::from(accel.abs() <= metrics::COMFORT_ACCEL && jerk.abs() <= metrics::COMFORT_JERK);

        collision =
            detect_collision(&world).map(|(agent, penetration)| CollisionInfo { agent, penetration, time: world.time });
    }
    observe(&world, &critical, &mut min_h, &mut min_h_critical);
    in_corridor &= route.project(world.ego.position()).lateral.abs() <= scenario.corridor_half_width;

    let executed = traces.len();
    let cycles = executed.max(1) as f64;
    let progress = (route.project(world.ego.position()).s - start_s).max(0.0);
    let expected_progress = (route.length() - start_s).min(scenario.target_speed * scenario.duration).max(f64::EPSILON);
    let fraction = |count: usize| {
        if executed == 0 {
            1.0
        } else {
            count as f64 / executed as f64
        }
    };
    let collided = collision.is_some();
    let score = ScoreBreakdown::new(
        [
            if collided { 0.0 } else { 1.0 },
            if in_corridor { 1.0 } else { 0.0 },
            if progress < metrics::MIN_PROGRESS_FRACTION * expected_progress { 0.5 } else { 1.0 },
        ],
        [fraction(ttc_ok), (progress / expected_progress).min(1.0), fraction(speed_ok), fraction(comfort_ok)],
    );

    let summary = SimSummary {
        scenario: scenario.name.clone(),
        mode: config.mode,
        seed: scenario.seed,
        steps: executed,
        collided,
        collision,
        min_h,
        min_h_critical,
        composite: score.composite,
        score,
        progress,
        expected_progress,
        comfort_peaks: peaks,
        slack_profile: profile_sum.iter().map(|s| s / cycles).collect(),
        mean_final_slack_rate: final_rate_sum / cycles,
        final_step_slack,
        infeasible_starts,
    };
    Ok(SimResult { summary, traces })
}

/// One line of a trace file, tagged by `record`.
#[derive(Serialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum TraceLine<'a> {
    Step(&'a TraceRecord),
    Summary(&'a SimSummary),
}

impl SimResult {
    /// Trace as newline-delimited JSON: one `"record":"step"` line per step,
    /// then a `"record":"summary"` line.
    pub fn to_ndjson(&self) -> String {
        let mut out = String::new();
        let lines = self.traces.iter().map(TraceLine::Step).chain(std::iter::once(TraceLine::Summary(&self.summary)));
        for line in lines {
            out.push_str(&serde_json::to_string(&line).expect("trace line serializes"));
            out.push('\n');
        }
        out
    }
}
