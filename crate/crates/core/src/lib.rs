//! Capsule-barrier safety filtering for diffusion-style trajectory planners,
//! plus a closed-loop driving micro-simulator to exercise it.

pub mod diffusion;
pub mod dynamics;
pub mod geometry;
pub mod path;
pub mod planner;
pub mod safety;
pub mod sim;

pub use diffusion::{DenoiseSchedule, Denoiser, SceneContext, SyntheticConfig, SyntheticDenoiser};
pub use dynamics::{BicycleModel, Control, EgoState, LqrTracker, Trajectory, VehicleLimits, VehicleShape, Waypoint};
pub use geometry::{capsule_distance, segment_distance, Capsule, Point, Segment};
pub use path::Polyline;
pub use planner::{PlanRecord, Planner, PlannerConfig, PlannerError, PlannerMode};
pub use safety::{AgentId, BarrierParams, FilterResult, Neighbor, SafetyFilter};
pub use sim::{run_scenario, Scenario, SimResult, SimSummary};
