//! Seeded scenario generators and the parallel battery runner.

use std::f64::consts::{FRAC_PI_2, PI};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::scenario::{AgentSpec, Behavior, IdmParams, Scenario, SCHEMA_VERSION};
use super::{run_scenario, SimError, SimSummary};
use crate::diffusion::{nominal_plan, SceneContext, SyntheticConfig};
use crate::dynamics::{EgoState, VehicleShape};
use crate::geometry::Point;
use crate::path::{arc_points, Polyline};
use crate::planner::{PlannerConfig, PlannerMode};

/// Names accepted by [`generate_battery`]; `all` concatenates the others.
pub const BATTERY_NAMES: [&str; 6] = ["headon", "crossing", "merge", "hardbrake", "empty", "all"];

/// Lane width used by the generators (m).
const LANE: f64 = 3.5;

#[derive(Debug, Error)]
pub enum BatteryError {
    #[error("unknown battery `{0}` (expected one of: headon, crossing, merge, hardbrake, empty, all)")]
    UnknownBattery(String),
    #[error("cannot build worker pool: {0}")]
    Pool(String),
    #[error(transparent)]
    Sim(#[from] SimError),
}

fn line(points: &[(f64, f64)]) -> Polyline {
    Polyline::new(points.iter().map(|&(x, y)| Point::new(x, y)).collect()).expect("generator paths are valid")
}

fn straight(x: f64, y: f64, heading: f64, length: f64) -> Polyline {
    Polyline::straight(Point::new(x, y), heading, length).expect("generator paths are valid")
}

fn base(name: &str, index: usize, ego: EgoState, route: Polyline, target_speed: f64) -> Scenario {
    Scenario {
        schema_version: SCHEMA_VERSION,
        name: format!("{name}-{index:03}"),
        seed: index as u64,
        duration: 15.0,
        ego_start: ego,
        route,
        target_speed,
        speed_limit: 15.0,
        corridor_half_width: 3.0,
        agents: Vec::new(),
    }
}

fn rng_for(name: &str, index: usize) -> ChaCha8Rng {
    let salt = name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3));
    ChaCha8Rng::seed_from_u64(salt ^ index as u64)
}

/// Stopped vehicle in the ego lane, sometimes with oncoming traffic in the
/// next lane.
fn headon(index: usize) -> Scenario {
    let mut rng = rng_for("headon", index);
    let v0 = rng.random_range(8.0..11.0);
    let ego = EgoState::new(0.0, 0.0, 0.0, 0.0, v0);
    let mut s = base("headon", index, ego, line(&[(-20.0, 0.0), (400.0, 0.0)]), v0);
    let x = rng.random_range(35.0..55.0);
    let y = rng.random_range(-0.4..0.4);
    let heading = if rng.random_bool(0.5) { PI } else { 0.0 };
    s.agents.push(AgentSpec {
        id: 1,
        path: straight(x, y, heading, 50.0),
        s: 0.0,
        v: 0.0,
        shape: VehicleShape::default(),
        behavior: Behavior::Stopped,
    });
    if rng.random_bool(0.5) {
        let start = rng.random_range(60.0..140.0);
        s.agents.push(AgentSpec {
            id: 2,
            path: straight(start, LANE, PI, 400.0),
            s: 0.0,
            v: rng.random_range(7.0..10.0),
            shape: VehicleShape::default(),
            behavior: Behavior::ConstantVelocity,
        });
    }
    s
}

/// Unprotected left turn: the ego drives north in the right lane and turns
/// west across a southbound car timed to reach the conflict zone together
/// with the ego's nominal plan.
fn crossing(index: usize) -> Scenario {
    let mut rng = rng_for("crossing", index);
    let radius = 9.0;
    let corner_y = -2.0;
    let ego_x = LANE / 2.0;
    let y0 = -rng.random_range(25.0..35.0);
    let v0 = rng.random_range(6.0..8.0);
    let mut points = vec![Point::new(ego_x, y0 - 20.0), Point::new(ego_x, corner_y)];
    points.extend(arc_points(Point::new(ego_x - radius, corner_y), radius, 0.0, FRAC_PI_2, 24).into_iter().skip(1));
    points.push(Point::new(-200.0, corner_y + radius));
    let route = Polyline::new(points).expect("generator paths are valid");
    let ego = EgoState::new(ego_x, y0, FRAC_PI_2, 0.0, v0);

    // Time for the nominal plan to reach the middle of the southbound lane.
    let dt = 0.1;
    let probe = SceneContext {
        ego0: ego,
        route: route.clone(),
        neighbors: Vec::new(),
        rng_seed: 0,
        horizon: 400,
        dt,
        target_speed: v0,
    };
    let plan = nominal_plan(&probe, &SyntheticConfig::default());
    let lane_x = -LANE / 2.0;
    let (k, conflict) = plan
        .waypoints
        .iter()
        .enumerate()
        .find(|(_, w)| w.x <= lane_x)
        .map(|(k, w)| (k, w.y))
        .expect("route crosses the oncoming lane");
    let arrival = k as f64 * dt;

    let v_other = rng.random_range(8.0..11.0);
    let shape = VehicleShape::default();
    // Place the oncoming car's rear axle slightly south of the conflict point
    // when the ego arrives, so its body sweeps the ego's path at that moment.
    let center_offset = 0.5 * shape.wheelbase;
    let y_at_arrival = conflict + center_offset - 3.0 + rng.random_range(-1.0..1.0);
    let y_start = y_at_arrival + v_other * arrival;

    let mut s = base("crossing", index, ego, route, v0);
    s.agents.push(AgentSpec {
        id: 1,
        path: straight(lane_x, y_start, -FRAC_PI_2, 400.0),
        s: 0.0,
        v: v_other,
        shape,
        behavior: Behavior::ConstantVelocity,
    });
    s
}

/// On-ramp joining a lane with reactive traffic.
fn merge(index: usize) -> Scenario {
    let mut rng = rng_for("merge", index);
    let v0 = rng.random_range(8.0..10.0);
    let mut points = vec![(-20.0, -LANE)];
    for i in 0..=20 {
        let u = i as f64 / 20.0;
        points.push((20.0 + 40.0 * u, -LANE + LANE * 0.5 * (1.0 - (PI * u).cos())));
    }
    points.push((400.0, 0.0));
    let ego = EgoState::new(0.0, -LANE, 0.0, 0.0, v0);
    let mut s = base("merge", index, ego, line(&points), v0);
    let lane = line(&[(-100.0, 0.0), (500.0, 0.0)]);
    let first = rng.random_range(-15.0..25.0);
    let spacing = rng.random_range(20.0..32.0);
    for (i, offset) in [0.0, spacing].into_iter().enumerate() {
        let idm = IdmParams { desired_speed: rng.random_range(8.0..11.0), ..Default::default() };
        s.agents.push(AgentSpec {
            id: i as u32 + 1,
            path: lane.clone(),
            s: 100.0 + first + offset,
            v: rng.random_range(7.0..10.0),
            shape: VehicleShape::default(),
            behavior: Behavior::IdmLaneFollow { idm },
        });
    }
    s
}

/// Lead vehicle that brakes hard without warning.
fn hardbrake(index: usize) -> Scenario {
    let mut rng = rng_for("hardbrake", index);
    let v0 = rng.random_range(8.0..11.0);
    let ego = EgoState::new(0.0, 0.0, 0.0, 0.0, v0);
    let mut s = base("hardbrake", index, ego, line(&[(-20.0, 0.0), (400.0, 0.0)]), v0);
    s.agents.push(AgentSpec {
        id: 1,
        path: straight(rng.random_range(18.0..28.0), 0.0, 0.0, 400.0),
        s: 0.0,
        v: v0,
        shape: VehicleShape::default(),
        behavior: Behavior::Brake { at: rng.random_range(1.0..3.0), decel: rng.random_range(4.0..6.0) },
    });
    s
}

/// No other traffic; straight or gently curving road.
fn empty(index: usize) -> Scenario {
    let mut rng = rng_for("empty", index);
    let v0 = rng.random_range(6.0..10.0);
    let target = rng.random_range(8.0..12.0);
    let ego = EgoState::new(0.0, 0.0, 0.0, 0.0, v0);
    let route = if rng.random_bool(0.5) {
        line(&[(-20.0, 0.0), (400.0, 0.0)])
    } else {
        let radius = rng.random_range(80.0..150.0);
        let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let mut points = vec![Point::new(-20.0, 0.0), Point::new(30.0, 0.0)];
        let center = Point::new(30.0, sign * radius);
        let start = -sign * FRAC_PI_2;
        points.extend(arc_points(center, radius, start, sign * 1.2, 60).into_iter().skip(1));
        Polyline::new(points).expect("generator paths are valid")
    };
    base("empty", index, ego, route, target)
}

/// `count` seeded variants of the named battery; `all` yields `count` of each.
pub fn generate_battery(name: &str, count: usize) -> Result<Vec<Scenario>, BatteryError> {
    let generator: fn(usize) -> Scenario = match name {
        "headon" => headon,
        "crossing" => crossing,
        "merge" => merge,
        "hardbrake" => hardbrake,
        "empty" => empty,
        "all" => {
            let mut all = Vec::with_capacity(5 * count);
            for part in &BATTERY_NAMES[..5] {
                all.extend(generate_battery(part, count)?);
            }
            return Ok(all);
        }
        other => return Err(BatteryError::UnknownBattery(other.to_string())),
    };
    Ok((0..count).map(generator).collect())
}

/// Runs every scenario under every mode on a pool of `jobs` workers.
/// Results are ordered by mode, then scenario, whatever the pool size.
pub fn run_battery(
    scenarios: &[Scenario],
    modes: &[PlannerMode],
    config: &PlannerConfig,
    jobs: usize,
) -> Result<Vec<SimSummary>, BatteryError> {
    let grid: Vec<(PlannerMode, &Scenario)> =
        modes.iter().flat_map(|&m| scenarios.iter().map(move |s| (m, s))).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| BatteryError::Pool(e.to_string()))?;
    let results: Result<Vec<SimSummary>, SimError> = pool.install(|| {
        grid.par_iter()
            .map(|&(mode, scenario)| {
                let config = PlannerConfig { mode, ..config.clone() };
                run_scenario(scenario, &config).map(|r| r.summary)
            })
            .collect()
    });
    Ok(results?)
}

/// One row of a battery comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeRow {
    pub mode: PlannerMode,
    pub runs: usize,
    pub collisions: usize,
    /// Percentage of runs that ended in a collision.
    pub collision_rate: f64,
    pub mean_composite: f64,
    pub mean_final_slack_rate: f64,
}

/// Per-mode aggregates, in the order of `modes`.
pub fn summarize(summaries: &[SimSummary], modes: &[PlannerMode]) -> Vec<ModeRow> {
    modes
        .iter()
        .map(|&mode| {
            let runs: Vec<&SimSummary> = summaries.iter().filter(|s| s.mode == mode).collect();
            let n = runs.len().max(1) as f64;
            let collisions = runs.iter().filter(|s| s.collided).count();
            ModeRow {
                mode,
                runs: runs.len(),
                collisions,
                collision_rate: 100.0 * collisions as f64 / n,
                mean_composite: runs.iter().map(|s| s.composite).sum::<f64>() / n,
                mean_final_slack_rate: runs.iter().map(|s| s.mean_final_slack_rate).sum::<f64>() / n,
            }
        })
        .collect()
}

/// Battery-averaged slack activation rate per denoising step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlackProfile {
    pub mode: PlannerMode,
    /// Entry `i` is denoising step `t = T - i`, so the last entry is `t = 1`.
    pub rates: Vec<f64>,
    /// Single-correction rate of plain sampling on the same battery.
    pub post_hoc_rate: Option<f64>,
}

impl SlackProfile {
    pub fn from_runs(mode: PlannerMode, runs: &[SimSummary], post_hoc: Option<&[SimSummary]>) -> Self {
        let steps = runs.first().map_or(0, |s| s.slack_profile.len());
        let n = runs.len().max(1) as f64;
        let rates = (0..steps).map(|i| runs.iter().map(|s| s.slack_profile[i]).sum::<f64>() / n).collect();
        let post_hoc_rate =
            post_hoc.map(|runs| runs.iter().map(|s| s.mean_final_slack_rate).sum::<f64>() / runs.len().max(1) as f64);
        Self { mode, rates, post_hoc_rate }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generators_are_seeded_and_valid() {
        for name in &BATTERY_NAMES[..5] {
            let a = generate_battery(name, 30).unwrap();
            assert_eq!(a.len(), 30);
            assert_eq!(a, generate_battery(name, 30).unwrap());
            for s in &a {
                s.validate().unwrap();
            }
            assert_ne!(a[0], a[1]);
        }
        assert_eq!(generate_battery("all", 30).unwrap().len(), 150);
        assert!(matches!(generate_battery("nope", 1), Err(BatteryError::UnknownBattery(_))));
    }

    #[test]
    fn scenarios_round_trip_through_toml() {
        for name in &BATTERY_NAMES[..5] {
            let s = generate_battery(name, 1).unwrap().remove(0);
            assert_eq!(Scenario::from_toml(&s.to_toml()).unwrap(), s);
        }
    }
}
