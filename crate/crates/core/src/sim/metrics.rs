//! Simplified closed-loop driving score: hard multipliers times a weighted
//! average of soft metrics.

use serde::{Deserialize, Serialize};

use crate::dynamics::VehicleShape;
use crate::geometry::{capsule_distance, Capsule};

/// Weights of the soft metrics: TTC, progress, speed-limit, comfort.
pub const SOFT_WEIGHTS: [f64; 4] = [5.0, 5.0, 4.0, 2.0];
pub const TTC_THRESHOLD: f64 = 3.0;
pub const TTC_HORIZON: f64 = 10.0;
pub const TTC_STEP: f64 = 0.1;
pub const COMFORT_ACCEL: f64 = 3.0;
pub const COMFORT_JERK: f64 = 5.0;
/// Progress below this fraction of the expected progress halves the score.
pub const MIN_PROGRESS_FRACTION: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreBreakdown {
    pub no_collision: f64,
    pub corridor: f64,
    pub making_progress: f64,
    pub ttc: f64,
    pub progress_ratio: f64,
    pub speed_compliance: f64,
    pub comfort: f64,
    pub composite: f64,
}

impl ScoreBreakdown {
    /// Builds the breakdown and fills in `composite`.
    pub fn new(multipliers: [f64; 3], soft: [f64; 4]) -> Self {
        let [no_collision, corridor, making_progress] = multipliers;
        let [ttc, progress_ratio, speed_compliance, comfort] = soft;
        Self {
            no_collision,
            corridor,
            making_progress,
            ttc,
            progress_ratio,
            speed_compliance,
            comfort,
            composite: composite_score(multipliers, soft),
        }
    }
}

/// Product of the multipliers times the weighted mean of the soft metrics.
pub fn composite_score(multipliers: [f64; 3], soft: [f64; 4]) -> f64 {
    let product: f64 = multipliers.iter().product();
    let weighted: f64 = soft.iter().zip(SOFT_WEIGHTS).map(|(a, w)| a * w).sum();
    (product * weighted / SOFT_WEIGHTS.iter().sum::<f64>()).clamp(0.0, 1.0)
}

/// A vehicle's body and straight-line velocity for TTC projection.
#[derive(Debug, Clone, Copy)]
pub struct Mover {
    pub capsule: Capsule,
    pub vx: f64,
    pub vy: f64,
}

impl Mover {
    pub fn new(shape: &VehicleShape, x: f64, y: f64, theta: f64, v: f64) -> Self {
        let (sin, cos) = theta.sin_cos();
        Self { capsule: shape.capsule(x, y, theta), vx: v * cos, vy: v * sin }
    }

    fn at(&self, t: f64) -> Capsule {
        Capsule {
            axis: self.capsule.axis.translated(crate::geometry::Point::new(self.vx * t, self.vy * t)),
            ..self.capsule
        }
    }
}

/// Time until the two bodies touch when both keep their velocity, sampled
/// every `TTC_STEP` and capped at `TTC_HORIZON`. Already overlapping bodies
/// give zero.
pub fn time_to_collision(ego: &Mover, other: &Mover) -> f64 {
    let steps = (TTC_HORIZON / TTC_STEP).round() as usize;
    (0..=steps)
        .map(|i| i as f64 * TTC_STEP)
        .find(|&t| capsule_distance(&ego.at(t), &other.at(t)) <= 0.0)
        .unwrap_or(TTC_HORIZON)
}
