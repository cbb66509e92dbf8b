//! Sequential safety filters over a planned trajectory.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{evaluate, safe_speed, AgentId, BarrierEval, BarrierParams, SLACK_ACTIVE_THRESHOLD};
use crate::dynamics::{
    wrap_angle, Control, EgoState, LqrTracker, TrackError, Trajectory, TrajectoryError, VehicleShape, Waypoint,
};
use crate::geometry::{capsule_distance, Capsule};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FilterError {
    #[error("plan must contain at least 2 waypoints")]
    EmptyPlan,
    #[error("invalid plan: {0}")]
    InvalidPlan(#[from] TrajectoryError),
    #[error("agent {agent} predicts {len} poses but the plan needs {needed}")]
    MismatchedHorizon { agent: AgentId, len: usize, needed: usize },
    #[error(transparent)]
    Track(#[from] TrackError),
}

/// A surrounding agent as seen by the filter: its footprint and a predicted
/// track time-aligned with the plan (index 0 is the current time).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub id: AgentId,
    pub shape: VehicleShape,
    pub track: Trajectory,
}

impl Neighbor {
    pub fn capsule_at(&self, k: usize) -> Capsule {
        let w = &self.track.waypoints[k];
        self.shape.capsule(w.x, w.y, w.heading())
    }
}

/// Output of a filter pass. Per-step vectors are indexed by rollout step;
/// per-agent columns follow the order of the neighbors passed in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterResult {
    pub corrected: Trajectory,
    /// States of the corrected rollout, `K` long.
    pub states: Vec<EgoState>,
    /// Executed controls, `K - 1` long.
    pub controls: Vec<Control>,
    /// Tracker output before the speed correction, `K - 1` long.
    pub nominal: Vec<Control>,
    /// Plan index where the tracker's reference slice started at each step.
    pub reference_start: Vec<usize>,
    pub agents: Vec<AgentId>,
    /// Slack per step and agent (m/s).
    pub slack: Vec<Vec<f64>>,
    /// Barrier value per state and agent (m), `K` rows.
    pub h: Vec<Vec<f64>>,
    /// Whether the speed constraint changed the nominal speed.
    pub qp_active: Vec<bool>,
    /// Whether the recovered acceleration hit an actuation limit.
    pub saturated: Vec<bool>,
    /// Number of barrier evaluations that used a gradient fallback.
    pub fallbacks: usize,
}

impl FilterResult {
    fn with_capacity(k: usize, agents: Vec<AgentId>, dt: f64) -> Self {
        Self {
            corrected: Trajectory { waypoints: Vec::with_capacity(k), dt },
            states: Vec::with_capacity(k),
            controls: Vec::with_capacity(k),
            nominal: Vec::with_capacity(k),
            reference_start: Vec::with_capacity(k),
            agents,
            slack: Vec::with_capacity(k),
            h: Vec::with_capacity(k),
            qp_active: Vec::with_capacity(k),
            saturated: Vec::with_capacity(k),
            fallbacks: 0,
        }
    }

    /// Fraction of rollout steps where any constraint needed slack.
    pub fn slack_rate(&self) -> f64 {
        if self.slack.is_empty() {
            return 0.0;
        }
        let active = self.slack.iter().filter(|row| row.iter().any(|&s| s > SLACK_ACTIVE_THRESHOLD)).count();
        active as f64 / self.slack.len() as f64
    }

    pub fn slack_active(&self) -> bool {
        self.slack.iter().flatten().any(|&s| s > SLACK_ACTIVE_THRESHOLD)
    }

    /// Smallest barrier value over all states and agents, if any agent was filtered.
    pub fn min_h(&self) -> Option<f64> {
        self.h.iter().flatten().copied().reduce(f64::min)
    }
}

/// Barrier-based speed filter for the ego vehicle.
#[derive(Debug, Clone)]
pub struct SafetyFilter {
    pub ego_shape: VehicleShape,
    pub params: BarrierParams,
    pub tracker: LqrTracker,
}

impl SafetyFilter {
    pub fn new(ego_shape: VehicleShape, params: BarrierParams, tracker: LqrTracker) -> Self {
        Self { ego_shape, params, tracker }
    }

    fn check(&self, plan: &Trajectory, neighbors: &[Neighbor]) -> Result<usize, FilterError> {
        if plan.len() < 2 {
            return Err(FilterError::EmptyPlan);
        }
        plan.validate()?;
        let k = plan.len();
        for n in neighbors {
            if n.track.len() < k {
                return Err(FilterError::MismatchedHorizon { agent: n.id, len: n.track.len(), needed: k });
            }
        }
        Ok(k)
    }

    fn evaluate_all(&self, state: &EgoState, neighbors: &[Neighbor], k: usize, delta_nom: f64) -> Vec<BarrierEval> {
        let wheelbase = self.tracker.model().wheelbase;
        neighbors
            .iter()
            .map(|n| evaluate(n.id, state, &self.ego_shape, &n.capsule_at(k), delta_nom, wheelbase, &self.params))
            .collect()
    }

    fn barrier_row(&self, state: &EgoState, neighbors: &[Neighbor], k: usize) -> Vec<f64> {
        let ego = self.ego_shape.capsule_at(state);
        neighbors.iter().map(|n| capsule_distance(&ego, &n.capsule_at(k)) - self.params.d_safe).collect()
    }

    /// Path-consistent filter: tracks the plan with the LQR tracker and only
    /// ever lowers (or, against receding overlaps, raises) the speed.
    ///
    /// At each step the tracker yields `(a_nom, delta_nom)`; the nominal next
    /// speed is filtered by [`safe_speed`] against every neighbor's pose at
    /// that step; the acceleration reaching the safe speed is clamped to the
    /// actuation limits and applied together with the unmodified steering.
    pub fn pc_cbf(
        &self,
        plan: &Trajectory,
        ego0: &EgoState,
        neighbors: &[Neighbor],
    ) -> Result<FilterResult, FilterError> {
        let k_len = self.check(plan, neighbors)?;
        let dt = plan.dt;
        let model = self.tracker.model();
        let limits = model.limits;
        let mut out = FilterResult::with_capacity(k_len, neighbors.iter().map(|n| n.id).collect(), dt);

        let mut state = *ego0;
        let mut cursor = 0usize;
        for k in 0..k_len - 1 {
            out.states.push(state);
            out.h.push(self.barrier_row(&state, neighbors, k));

            let track = self.tracker.track(&state, &plan.waypoints[cursor..], dt)?;
            out.reference_start.push(cursor);
            cursor = (cursor + track.segment).min(k_len - 2);
            let nominal = track.control;
            let v_nom = (state.v + nominal.accel * dt).max(0.0);

            let evals = self.evaluate_all(&state, neighbors, k, nominal.delta_cmd);
            out.fallbacks += evals.iter().filter(|e| e.fallback.is_some()).count();
            let sol = safe_speed(v_nom, &evals, &self.params);

            // An untouched speed keeps the tracker's command as is, free of the
            // round-off of recovering it from the speed.
            let raw = if sol.v == v_nom { nominal.accel } else { (sol.v - state.v) / dt };
            let accel = limits.clamp_accel(raw);
            let control = Control::new(accel, nominal.delta_cmd);

            out.qp_active.push(sol.v != v_nom.min(self.params.v_max));
            out.saturated.push(accel != raw);
            out.slack.push(sol.slack);
            out.nominal.push(nominal);
            out.controls.push(control);
            state = model.step(&state, &control, dt);
        }
        out.states.push(state);
        out.h.push(self.barrier_row(&state, neighbors, k_len - 1));
        out.corrected = Trajectory::from_states(&out.states, dt);
        Ok(out)
    }

    /// Arc re-timing filter: keeps the plan's polyline and slides along it at
    /// the per-step safe speed. No dynamics are propagated, so the result need
    /// not be reproducible by the bicycle model.
    pub fn arc_reparam(
        &self,
        plan: &Trajectory,
        ego0: &EgoState,
        neighbors: &[Neighbor],
    ) -> Result<FilterResult, FilterError> {
        let k_len = self.check(plan, neighbors)?;
        let dt = plan.dt;
        let model = self.tracker.model();
        let wheelbase = model.wheelbase;
        let limits = model.limits;
        let mut out = FilterResult::with_capacity(k_len, neighbors.iter().map(|n| n.id).collect(), dt);

        let path = ArcPath::new(&plan.waypoints);
        let mut s = 0.0;
        let mut v = ego0.v;
        let mut on_schedule = true;
        for k in 0..k_len {
            let (waypoint, curvature, seg) = if on_schedule {
                (plan.waypoints[k], path.curvature(k.min(k_len - 2)), k.min(k_len - 2))
            } else {
                path.sample(s)
            };
            let delta = limits.clamp_steer((wheelbase * curvature).atan());
            let state = EgoState::new(waypoint.x, waypoint.y, waypoint.heading(), delta, v);
            out.corrected.waypoints.push(waypoint);
            out.states.push(state);
            out.h.push(self.barrier_row(&state, neighbors, k));
            if k == k_len - 1 {
                break;
            }

            let v_nom = if on_schedule { path.spacing(k) / dt } else { path.spacing(seg) / dt };
            let evals = self.evaluate_all(&state, neighbors, k, delta);
            out.fallbacks += evals.iter().filter(|e| e.fallback.is_some()).count();
            let sol = safe_speed(v_nom, &evals, &self.params);

            let steer = if k == 0 { self.tracker.track(ego0, &plan.waypoints, dt)?.control.delta_cmd } else { delta };
            let raw = (sol.v - v) / dt;
            let accel = limits.clamp_accel(raw);
            let unchanged = sol.v == v_nom;
            out.qp_active.push(!unchanged);
            out.saturated.push(accel != raw);
            out.slack.push(sol.slack);
            out.nominal.push(Control::new(limits.clamp_accel((v_nom - v) / dt), steer));
            out.controls.push(Control::new(accel, steer));
            out.reference_start.push(seg);

            if on_schedule && unchanged {
                s = path.cumulative[k + 1];
            } else {
                on_schedule = false;
                s += sol.v * dt;
            }
            v = sol.v;
        }
        Ok(out)
    }
}

/// Waypoint polyline with cumulative arc length; zero-length segments allowed.
struct ArcPath<'a> {
    waypoints: &'a [Waypoint],
    cumulative: Vec<f64>,
}

impl<'a> ArcPath<'a> {
    fn new(waypoints: &'a [Waypoint]) -> Self {
        let mut cumulative = Vec::with_capacity(waypoints.len());
        let mut acc = 0.0;
        cumulative.push(acc);
        for w in waypoints.windows(2) {
            acc += (w[1].position() - w[0].position()).norm();
            cumulative.push(acc);
        }
        Self { waypoints, cumulative }
    }

    fn spacing(&self, seg: usize) -> f64 {
        self.cumulative[seg + 1] - self.cumulative[seg]
    }

    fn curvature(&self, seg: usize) -> f64 {
        let len = self.spacing(seg);
        if len > 1e-6 {
            wrap_angle(self.waypoints[seg + 1].heading() - self.waypoints[seg].heading()) / len
        } else {
            0.0
        }
    }

    /// Waypoint, curvature and segment at arc length `s`; past the end the last
    /// segment is extended.
    fn sample(&self, s: f64) -> (Waypoint, f64, usize) {
        let last = self.waypoints.len() - 2;
        let seg = self.cumulative.partition_point(|&c| c <= s).saturating_sub(1).min(last);
        let (a, b) = (self.waypoints[seg], self.waypoints[seg + 1]);
        let len = self.spacing(seg);
        let u = if len > 0.0 { (s - self.cumulative[seg]) / len } else { 0.0 };
        let pos = a.position() + (b.position() - a.position()) * u;
        let w = u.clamp(0.0, 1.0);
        let heading = ((1.0 - w) * a.sin_theta + w * b.sin_theta).atan2((1.0 - w) * a.cos_theta + w * b.cos_theta);
        (Waypoint::from_pose(pos.x, pos.y, heading), self.curvature(seg), seg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{BicycleModel, TrackerConfig};

    fn filter() -> SafetyFilter {
        let tracker = LqrTracker::new(TrackerConfig::default(), BicycleModel::default(), 0.1).unwrap();
        SafetyFilter::new(VehicleShape::default(), BarrierParams::default(), tracker)
    }

    fn straight_plan(speed: f64, k: usize) -> Trajectory {
        Trajectory::new((0..k).map(|i| Waypoint::new(i as f64 * speed * 0.1, 0.0, 1.0, 0.0)).collect(), 0.1).unwrap()
    }

    fn stopped_at(id: AgentId, x: f64, k: usize) -> Neighbor {
        let shape = VehicleShape::default();
        // Place the rear axle so the capsule axis is centered on `x`.
        let rear_axle = x - 0.5 * shape.axis_length + shape.rear_overhang();
        Neighbor { id, shape, track: Trajectory::new(vec![Waypoint::new(rear_axle, 0.0, 1.0, 0.0); k], 0.1).unwrap() }
    }

    #[test]
    fn rejects_short_inputs() {
        let f = filter();
        let short = Trajectory { waypoints: vec![Waypoint::default()], dt: 0.1 };
        assert_eq!(f.pc_cbf(&short, &EgoState::default(), &[]), Err(FilterError::EmptyPlan));
        let plan = straight_plan(10.0, 10);
        let n = stopped_at(7, 30.0, 5);
        assert_eq!(
            f.pc_cbf(&plan, &EgoState::default(), &[n]),
            Err(FilterError::MismatchedHorizon { agent: 7, len: 5, needed: 10 })
        );
    }

    #[test]
    fn inactive_without_neighbors() {
        let f = filter();
        let plan = straight_plan(10.0, 80);
        let ego = EgoState::new(0.0, 0.0, 0.0, 0.0, 10.0);
        let out = f.pc_cbf(&plan, &ego, &[]).unwrap();
        assert_eq!(out.controls, out.nominal);
        assert!(out.qp_active.iter().all(|a| !a));
        let states = f.tracker.model().rollout(&ego, &out.controls, 0.1);
        assert_eq!(states, out.states);
    }

    #[test]
    fn head_on_stop() {
        let f = filter();
        let plan = straight_plan(10.0, 80);
        let ego = EgoState::new(0.0, 0.0, 0.0, 0.0, 10.0);
        let out = f.pc_cbf(&plan, &ego, &[stopped_at(1, 30.0, 80)]).unwrap();
        let min_h = out.min_h().unwrap();
        assert!(min_h >= -0.05, "min h {min_h}");
        assert!(out.states.last().unwrap().v < 0.05);
        assert!(!out.slack_active());
        assert!(out.controls.iter().zip(&out.nominal).all(|(c, n)| c.delta_cmd == n.delta_cmd));
    }

    #[test]
    fn arc_reparam_identity_and_speed_cap() {
        let f = filter();
        let plan = straight_plan(10.0, 20);
        let ego = EgoState::new(0.0, 0.0, 0.0, 0.0, 10.0);
        let out = f.arc_reparam(&plan, &ego, &[]).unwrap();
        assert_eq!(out.corrected.waypoints, plan.waypoints);

        let mut capped = filter();
        capped.params.v_max = 4.0;
        let out = capped.arc_reparam(&plan, &ego, &[]).unwrap();
        for (k, w) in out.corrected.waypoints.iter().enumerate() {
            assert!((w.x - 0.4 * k as f64).abs() < 1e-9, "step {k}: {}", w.x);
            assert_eq!(w.y, 0.0);
        }
    }

    #[test]
    fn arc_reparam_head_on() {
        let f = filter();
        let plan = straight_plan(10.0, 80);
        let ego = EgoState::new(0.0, 0.0, 0.0, 0.0, 10.0);
        let out = f.arc_reparam(&plan, &ego, &[stopped_at(1, 30.0, 80)]).unwrap();
        assert!(out.min_h().unwrap() >= -0.05);
    }
}
