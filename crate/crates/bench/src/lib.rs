//! Shared fixtures for the benchmarks.

use safeplan_core::sim::{cycle_seed, generate_battery, World};
use safeplan_core::{PlannerConfig, SceneContext};

/// Planning context of the first cycle of a generated head-on scenario.
pub fn head_on_context(config: &PlannerConfig) -> SceneContext {
    let scenario = generate_battery("headon", 1).expect("built-in battery").remove(0);
    let model = safeplan_core::BicycleModel::new(config.ego_shape.wheelbase, config.limits);
    let world = World::from_scenario(&scenario, config.ego_shape, model);
    SceneContext {
        ego0: world.ego,
        route: scenario.route.clone(),
        neighbors: world.predictions(config.horizon, config.dt),
        rng_seed: cycle_seed(scenario.seed, 0),
        horizon: config.horizon,
        dt: config.dt,
        target_speed: scenario.target_speed,
    }
}
