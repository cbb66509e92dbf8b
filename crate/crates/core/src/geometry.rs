//! Segment-segment distance, capsule distance, and the gradient of the ego
//! capsule distance with respect to the ego state.
//!
//! A vehicle footprint is a capsule: its longitudinal axis (rear-end center to
//! front-end center) swept by a disc of radius `half_width`. Distances between
//! two capsules reduce to the distance between their axes.

use nalgebra::Vector2;
use thiserror::Error;

use crate::dynamics::{EgoState, VehicleShape};

pub type Point = Vector2<f64>;

/// Axes closer than this angle (rad) are treated as parallel.
pub const PARALLEL_TOLERANCE: f64 = 1e-9;

/// Distances below this, relative to the coordinate magnitude, count as contact.
pub const CONTACT_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Error, Clone, Copy, PartialEq)]
pub enum GeometryError {
    #[error("capsule half-width must be positive and finite, got {0}")]
    InvalidHalfWidth(f64),
    #[error("segment endpoints must be finite")]
    NonFinite,
}

/// Failure modes of [`distance_gradient`].
#[derive(Debug, Error, Clone, Copy, PartialEq)]
pub enum GradientError {
    /// The closest pair is not unique (parallel, overlapping axes). The
    /// subgradient evaluated at the tie-broken pair is still usable.
    #[error("closest pair is not unique; subgradient returned")]
    NonUnique { subgradient: StateGradient },
    /// The axes touch; the distance is not differentiable here.
    #[error("axes are in contact; gradient undefined")]
    ZeroDistance,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Segment {
    /// Rear-end center.
    pub p: Point,
    /// Front-end center.
    pub q: Point,
}

impl Segment {
    pub fn new(p: Point, q: Point) -> Self {
        Self { p, q }
    }

    pub fn from_coords(px: f64, py: f64, qx: f64, qy: f64) -> Self {
        Self::new(Point::new(px, py), Point::new(qx, qy))
    }

    /// Point at parameter `s` in `[0, 1]`.
    pub fn at(&self, s: f64) -> Point {
        self.p + (self.q - self.p) * s
    }

    pub fn length(&self) -> f64 {
        (self.q - self.p).norm()
    }

    pub fn is_finite(&self) -> bool {
        self.p.iter().chain(self.q.iter()).all(|c| c.is_finite())
    }

    pub fn translated(&self, offset: Point) -> Self {
        Self::new(self.p + offset, self.q + offset)
    }

    /// Rotation by `angle` about `pivot`.
    pub fn rotated(&self, pivot: Point, angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        let rot = |v: Point| {
            let d = v - pivot;
            pivot + Point::new(c * d.x - s * d.y, s * d.x + c * d.y)
        };
        Self::new(rot(self.p), rot(self.q))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Capsule {
    pub axis: Segment,
    pub half_width: f64,
}

impl Capsule {
    pub fn new(axis: Segment, half_width: f64) -> Result<Self, GeometryError> {
        if !(half_width > 0.0 && half_width.is_finite()) {
            return Err(GeometryError::InvalidHalfWidth(half_width));
        }
        if !axis.is_finite() {
            return Err(GeometryError::NonFinite);
        }
        Ok(Self { axis, half_width })
    }
}

/// Minimizing parameters of `|S1(s) - S2(r)|` over `[0, 1]^2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClosestPair {
    pub s_star: f64,
    pub r_star: f64,
    pub distance: f64,
    /// Unit vector from the closest point on the second segment toward the
    /// closest point on the first. `None` when the segments touch.
    pub direction: Option<Point>,
    /// False when more than one pair of closest points attains the minimum.
    pub unique: bool,
}

/// Gradient of a pose-only quantity with respect to `(x, y, theta, delta, v)`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StateGradient {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
    pub delta: f64,
    pub v: f64,
}

impl StateGradient {
    pub fn to_array(self) -> [f64; 5] {
        [self.x, self.y, self.theta, self.delta, self.v]
    }
}

fn clamp01(x: f64) -> f64 {
    x.clamp(0.0, 1.0)
}

fn ratio_or_zero(num: f64, den: f64) -> f64 {
    if den > 0.0 {
        num / den
    } else {
        0.0
    }
}

/// Exact closest points between two segments.
///
/// The squared distance is a convex quadratic in `(s, r)`. Its minimum over
/// the unit square is either the interior stationary point or lies on one of
/// the four edges, where the problem reduces to a clamped point-to-segment
/// projection. All candidates are evaluated; ties (parallel overlapping axes)
/// resolve to the smallest `s`, then the smallest `r`.
pub fn segment_distance(a: &Segment, b: &Segment) -> ClosestPair {
    let d1 = a.q - a.p;
    let d2 = b.q - b.p;
    let w = a.p - b.p;
    let aa = d1.dot(&d1);
    let ee = d2.dot(&d2);
    let bb = d1.dot(&d2);
    let c = d1.dot(&w);
    let f = d2.dot(&w);

    let eval = |s: f64, r: f64| (a.at(s) - b.at(r)).norm();
    let scale = 1.0 + a.p.norm().max(a.q.norm()).max(b.p.norm()).max(b.q.norm());

    let denom = aa * ee - bb * bb;
    let parallel = denom <= PARALLEL_TOLERANCE * PARALLEL_TOLERANCE * aa * ee;
    if !parallel && aa > 0.0 && ee > 0.0 {
        let s = (bb * f - c * ee) / denom;
        let r = (aa * f - bb * c) / denom;
        if (0.0..=1.0).contains(&s) && (0.0..=1.0).contains(&r) {
            return finish(a, b, s, r, eval(s, r), true, scale);
        }
    }

    let candidates = [
        (0.0, clamp01(ratio_or_zero(f, ee))),
        (1.0, clamp01(ratio_or_zero(f + bb, ee))),
        (clamp01(ratio_or_zero(-c, aa)), 0.0),
        (clamp01(ratio_or_zero(bb - c, aa)), 1.0),
    ];

    let dist_tol = 1e-12 * scale;
    let point_tol = 1e-9 * scale;

    let scored: Vec<(f64, f64, f64)> = candidates.iter().map(|&(s, r)| (s, r, eval(s, r))).collect();
    let best_distance = scored.iter().map(|c| c.2).fold(f64::INFINITY, f64::min);
    let mut tied: Vec<(f64, f64, f64)> = scored.into_iter().filter(|c| c.2 <= best_distance + dist_tol).collect();
    tied.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.total_cmp(&y.1)));
    let (s, r, distance) = tied[0];

    let (p1, p2) = (a.at(s), b.at(r));
    let unique =
        tied.iter().all(|&(s2, r2, _)| (a.at(s2) - p1).norm() <= point_tol && (b.at(r2) - p2).norm() <= point_tol);
    finish(a, b, s, r, distance, unique, scale)
}

fn finish(a: &Segment, b: &Segment, s: f64, r: f64, distance: f64, unique: bool, scale: f64) -> ClosestPair {
    // Round-off leaves crossing segments a hair apart; call that contact.
    if distance > CONTACT_TOLERANCE * scale {
        let direction = Some((a.at(s) - b.at(r)) / distance);
        ClosestPair { s_star: s, r_star: r, distance, direction, unique }
    } else {
        ClosestPair { s_star: s, r_star: r, distance: 0.0, direction: None, unique }
    }
}

/// Axis distance minus both half-widths. Negative values are penetration depth.
pub fn capsule_distance(a: &Capsule, b: &Capsule) -> f64 {
    segment_distance(&a.axis, &b.axis).distance - a.half_width - b.half_width
}

/// Danskin gradient of the ego-to-`other` axis distance with respect to the
/// ego state.
///
/// With the closest pair fixed at its minimizer, only the ego endpoint moves:
/// `grad = n^T dS1/dx` where `S1(s) = (x, y) + l(s) (cos theta, sin theta)` and
/// `l(s)` is the signed offset of the axis point from the reference point.
/// Steering and speed never enter the distance.
pub fn distance_gradient(
    ego: &EgoState,
    shape: &VehicleShape,
    other: &Capsule,
) -> Result<StateGradient, GradientError> {
    let axis = shape.axis(ego.x, ego.y, ego.theta);
    let pair = segment_distance(&axis, &other.axis);
    let n = pair.direction.ok_or(GradientError::ZeroDistance)?;
    let lever = shape.axis_offset(pair.s_star);
    let (sin, cos) = ego.theta.sin_cos();
    let grad = StateGradient { x: n.x, y: n.y, theta: lever * (-n.x * sin + n.y * cos), delta: 0.0, v: 0.0 };
    if pair.unique {
        Ok(grad)
    } else {
        Err(GradientError::NonUnique { subgradient: grad })
    }
}
