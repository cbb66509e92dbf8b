use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{EgoState, VehicleShape};
use crate::path::Polyline;
use crate::planner::PlannerConfig;
use crate::safety::AgentId;

/// Scenario file format version understood by this build.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read scenario file {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("cannot parse scenario: {0}")]
    Parse(String),
    #[error("unsupported schema_version {found} (expected {SCHEMA_VERSION})")]
    Schema { found: u32 },
    #[error("invalid scenario: {0}")]
    Invalid(String),
}

/// Intelligent Driver Model parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IdmParams {
    pub desired_speed: f64,
    pub time_headway: f64,
    pub min_gap: f64,
    pub max_accel: f64,
    pub comfortable_decel: f64,
    pub exponent: f64,
}

impl Default for IdmParams {
    fn default() -> Self {
        Self {
            desired_speed: 10.0,
            time_headway: 1.5,
            min_gap: 2.0,
            max_accel: 1.5,
            comfortable_decel: 2.0,
            exponent: 4.0,
        }
    }
}

impl IdmParams {
    pub fn validate(&self) -> Result<(), ScenarioError> {
        for (name, value) in [
            ("desired_speed", self.desired_speed),
            ("time_headway", self.time_headway),
            ("min_gap", self.min_gap),
            ("max_accel", self.max_accel),
            ("comfortable_decel", self.comfortable_decel),
            ("exponent", self.exponent),
        ] {
            if !(value > 0.0 && value.is_finite()) {
                return Err(ScenarioError::Invalid(format!("idm.{name} must be positive, got {value}")));
            }
        }
        Ok(())
    }
}

/// How a neighbor moves along its path.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Behavior {
    Stopped,
    ConstantVelocity,
    IdmLaneFollow {
        #[serde(default)]
        idm: IdmParams,
    },
    /// Holds its speed, then brakes at `decel` (m/s^2) from time `at` (s).
    Brake {
        at: f64,
        decel: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentSpec {
    pub id: AgentId,
    /// Lane the agent drives along; its rear axle stays on this polyline.
    pub path: Polyline,
    /// Initial arc length along `path` (m).
    #[serde(default)]
    pub s: f64,
    /// Initial speed (m/s).
    #[serde(default)]
    pub v: f64,
    #[serde(default)]
    pub shape: VehicleShape,
    pub behavior: Behavior,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub schema_version: u32,
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    /// Simulated time (s).
    #[serde(default = "defaults::duration")]
    pub duration: f64,
    pub ego_start: EgoState,
    pub route: Polyline,
    /// Cruise speed requested from the planner (m/s).
    #[serde(default = "defaults::target_speed")]
    pub target_speed: f64,
    #[serde(default = "defaults::speed_limit")]
    pub speed_limit: f64,
    /// Allowed lateral deviation from the route (m).
    #[serde(default = "defaults::corridor_half_width")]
    pub corridor_half_width: f64,
    #[serde(default)]
    pub agents: Vec<AgentSpec>,
}

mod defaults {
    pub fn duration() -> f64 {
        15.0
    }
    pub fn target_speed() -> f64 {
        10.0
    }
    pub fn speed_limit() -> f64 {
        15.0
    }
    pub fn corridor_half_width() -> f64 {
        3.0
    }
}

impl Scenario {
    pub fn validate(&self) -> Result<(), ScenarioError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(ScenarioError::Schema { found: self.schema_version });
        }
        let positive = |name: &str, value: f64| {
            if value > 0.0 && value.is_finite() {
                Ok(())
            } else {
                Err(ScenarioError::Invalid(format!("{name} must be positive, got {value}")))
            }
        };
        positive("duration", self.duration)?;
        positive("target_speed", self.target_speed)?;
        positive("speed_limit", self.speed_limit)?;
        positive("corridor_half_width", self.corridor_half_width)?;
        if !self.ego_start.is_finite() || self.ego_start.v < 0.0 {
            return Err(ScenarioError::Invalid("ego_start must be finite with v >= 0".into()));
        }
        if self.route.length() <= 0.0 {
            return Err(ScenarioError::Invalid("route must have positive length".into()));
        }
        let mut ids = std::collections::BTreeSet::new();
        for agent in &self.agents {
            if !ids.insert(agent.id) {
                return Err(ScenarioError::Invalid(format!("duplicate agent id {}", agent.id)));
            }
            agent.shape.validate().map_err(|e| ScenarioError::Invalid(format!("agent {}: {e}", agent.id)))?;
            if !(agent.s.is_finite() && agent.v.is_finite() && agent.v >= 0.0) {
                return Err(ScenarioError::Invalid(format!("agent {}: s and v must be finite, v >= 0", agent.id)));
            }
            match agent.behavior {
                Behavior::IdmLaneFollow { idm } => idm.validate()?,
                Behavior::Brake { at, decel } if !(at >= 0.0 && decel > 0.0 && at.is_finite() && decel.is_finite()) => {
                    return Err(ScenarioError::Invalid(format!(
                        "agent {}: brake needs at >= 0 and decel > 0",
                        agent.id
                    )));
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self, ScenarioError> {
        let scenario: Scenario = toml::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))?;
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serializes to TOML")
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ScenarioError::Io { path: path.display().to_string(), source })?;
        Self::from_toml(&text)
    }
}

/// Contents of a scenario file: the scenario plus an optional `[planner]`
/// table. Fields missing from that table keep their built-in defaults.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioFile {
    pub scenario: Scenario,
    pub planner: Option<PlannerConfig>,
}

impl ScenarioFile {
    pub fn from_toml(text: &str) -> Result<Self, ScenarioError> {
        let parse = |e: toml::de::Error| ScenarioError::Parse(e.to_string());
        let mut table: toml::Table = text.parse().map_err(parse)?;
        let planner = table.remove("planner").map(|v| v.try_into::<PlannerConfig>()).transpose().map_err(parse)?;
        let scenario: Scenario = toml::Value::Table(table).try_into().map_err(parse)?;
        scenario.validate()?;
        Ok(Self { scenario, planner })
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ScenarioError::Io { path: path.display().to_string(), source })?;
        Self::from_toml(&text)
    }
}
