use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::scenario::{Behavior, IdmParams, Scenario};
use crate::dynamics::{BicycleModel, Control, EgoState, Trajectory, VehicleShape, Waypoint};
use crate::geometry::{capsule_distance, Capsule, Point};
use crate::path::Polyline;
use crate::safety::{AgentId, Neighbor};

/// Strongest deceleration an IDM agent can apply (m/s^2).
pub const IDM_MAX_BRAKE: f64 = 9.0;
/// Lateral offset from an agent's lane within which another vehicle counts
/// as being in that lane (m).
pub const LANE_HALF_WIDTH: f64 = 2.0;
/// Farthest distance ahead at which a leader is considered (m).
pub const GAP_HORIZON: f64 = 100.0;
/// Smallest gap fed to the IDM interaction term (m).
const MIN_IDM_GAP: f64 = 0.01;

/// Standard IDM acceleration. `leader` is `(gap, leader_speed)` with the gap
/// measured between the vehicle bodies.
pub fn idm_accel(params: &IdmParams, v: f64, leader: Option<(f64, f64)>) -> f64 {
    let free = 1.0 - (v / params.desired_speed).powf(params.exponent);
    let interaction = match leader {
        Some((gap, v_lead)) => {
            let dynamic = v * params.time_headway
                + v * (v - v_lead) / (2.0 * (params.max_accel * params.comfortable_decel).sqrt());
            let desired = params.min_gap + dynamic.max(0.0);
            (desired / gap.max(MIN_IDM_GAP)).powi(2)
        }
        None => 0.0,
    };
    (params.max_accel * (free - interaction)).max(-IDM_MAX_BRAKE)
}

/// Gap at which an IDM follower travels steadily behind a leader at speed `v`.
pub fn idm_equilibrium_gap(params: &IdmParams, v: f64) -> f64 {
    let free = 1.0 - (v / params.desired_speed).powf(params.exponent);
    (params.min_gap + v * params.time_headway) / free.sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentState {
    pub id: AgentId,
    pub path: Arc<Polyline>,
    pub s: f64,
    pub v: f64,
    /// Acceleration applied in the last step.
    pub accel: f64,
    pub shape: VehicleShape,
    pub behavior: Behavior,
}

/// Snapshot of an agent for traces.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgentPose {
    pub id: AgentId,
    pub x: f64,
    pub y: f64,
    pub theta: f64,
    pub v: f64,
}

impl AgentState {
    pub fn position(&self) -> Point {
        self.path.point_at(self.s)
    }

    pub fn heading(&self) -> f64 {
        self.path.heading_at(self.s)
    }

    pub fn pose(&self) -> AgentPose {
        let p = self.position();
        AgentPose { id: self.id, x: p.x, y: p.y, theta: self.heading(), v: self.v }
    }

    pub fn capsule(&self) -> Capsule {
        let p = self.position();
        self.shape.capsule(p.x, p.y, self.heading())
    }

    /// Constant-velocity extrapolation of the current pose over `len` steps.
    pub fn prediction(&self, len: usize, dt: f64) -> Neighbor {
        let p = self.position();
        let theta = self.heading();
        let (sin, cos) = theta.sin_cos();
        let waypoints = (0..len)
            .map(|k| {
                let d = self.v * k as f64 * dt;
                Waypoint::new(p.x + d * cos, p.y + d * sin, cos, sin)
            })
            .collect();
        Neighbor { id: self.id, shape: self.shape, track: Trajectory { waypoints, dt } }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub time: f64,
    pub ego: EgoState,
    pub ego_shape: VehicleShape,
    pub agents: Vec<AgentState>,
    pub model: BicycleModel,
}

impl World {
    pub fn from_scenario(scenario: &Scenario, ego_shape: VehicleShape, model: BicycleModel) -> Self {
        let agents = scenario
            .agents
            .iter()
            .map(|a| AgentState {
                id: a.id,
                path: Arc::new(a.path.clone()),
                s: a.s,
                v: if matches!(a.behavior, Behavior::Stopped) { 0.0 } else { a.v },
                accel: 0.0,
                shape: a.shape,
                behavior: a.behavior,
            })
            .collect();
        Self { time: 0.0, ego: scenario.ego_start, ego_shape, agents, model }
    }

    pub fn ego_capsule(&self) -> Capsule {
        self.ego_shape.capsule_at(&self.ego)
    }

    /// Nearest vehicle ahead of agent `index` in its lane, as `(gap, speed)`.
    ///
    /// A vehicle is in the lane when its rear axle projects within
    /// `LANE_HALF_WIDTH` of the agent's path, and ahead when that projection
    /// lies further along the path, up to `GAP_HORIZON`. The gap is the body
    /// distance and the speed is the component along the lane, floored at zero.
    fn leader_of(&self, index: usize) -> Option<(f64, f64)> {
        let me = &self.agents[index];
        let my_capsule = me.capsule();
        let ego = (self.ego.position(), self.ego.theta, self.ego.v, self.ego_capsule());
        let others = self
            .agents
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != index)
            .map(|(_, a)| (a.position(), a.heading(), a.v, a.capsule()))
            .chain(std::iter::once(ego));
        let mut best: Option<(f64, f64, f64)> = None;
        for (position, heading, speed, capsule) in others {
            let proj = me.path.project(position);
            let ahead = proj.s - me.s;
            if proj.lateral.abs() > LANE_HALF_WIDTH || ahead <= 0.0 || ahead > GAP_HORIZON {
                continue;
            }
            if best.is_some_and(|(d, _, _)| d <= ahead) {
                continue;
            }
            let along = (heading - me.path.heading_at(proj.s)).cos() * speed;
            let gap = capsule_distance(&my_capsule, &capsule);
            best = Some((ahead, gap, along.max(0.0)));
        }
        best.map(|(_, gap, speed)| (gap, speed))
    }

    fn agent_accel(&self, index: usize) -> f64 {
        let agent = &self.agents[index];
        match agent.behavior {
            Behavior::Stopped | Behavior::ConstantVelocity => 0.0,
            Behavior::Brake { at, decel } => {
                if self.time >= at {
                    -decel
                } else {
                    0.0
                }
            }
            Behavior::IdmLaneFollow { idm } => idm_accel(&idm, agent.v, self.leader_of(index)),
        }
    }

    /// Advances the ego by the bicycle model and every agent along its path.
    /// All accelerations are computed from the current state before anyone
    /// moves; positions use the speed at the start of the step.
    pub fn step(&mut self, control: &Control, dt: f64) {
        let accels: Vec<f64> = (0..self.agents.len()).map(|i| self.agent_accel(i)).collect();
        for (agent, accel) in self.agents.iter_mut().zip(accels) {
            if matches!(agent.behavior, Behavior::Stopped) {
                agent.v = 0.0;
                agent.accel = 0.0;
                continue;
            }
            agent.s += agent.v * dt;
            let v = (agent.v + accel * dt).max(0.0);
            agent.accel = (v - agent.v) / dt;
            agent.v = v;
        }
        self.ego = self.model.step(&self.ego, control, dt);
        self.time += dt;
    }

    pub fn predictions(&self, len: usize, dt: f64) -> Vec<Neighbor> {
        self.agents.iter().map(|a| a.prediction(len, dt)).collect()
    }

    pub fn poses(&self) -> Vec<AgentPose> {
        self.agents.iter().map(AgentState::pose).collect()
    }
}

/// Functional form of [`World::step`].
pub fn step_world(world: &World, control: &Control, dt: f64) -> World {
    let mut next = world.clone();
    next.step(control, dt);
    next
}

/// First agent (in scenario order) whose body overlaps the ego's, with the
/// penetration depth. No safety margin is applied.
pub fn detect_collision(world: &World) -> Option<(AgentId, f64)> {
    let ego = world.ego_capsule();
    world.agents.iter().find_map(|a| {
        let d = capsule_distance(&ego, &a.capsule());
        (d < 0.0).then_some((a.id, -d))
    })
}
