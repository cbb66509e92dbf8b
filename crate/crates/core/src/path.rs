//! Arc-length parameterised polylines used for routes and lanes.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Point;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PathError {
    #[error("polyline needs at least 2 points, got {0}")]
    TooShort(usize),
    #[error("polyline has zero length")]
    ZeroLength,
    #[error("polyline point {0} is not finite")]
    NonFinite(usize),
}

/// Projection of a point onto a polyline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    /// Arc length of the foot point; may fall outside `[0, length]` when the
    /// point lies beyond either end (the end segments are extended).
    pub s: f64,
    /// Signed lateral offset, positive to the left of the direction of travel.
    pub lateral: f64,
    pub segment: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<[f64; 2]>", into = "Vec<[f64; 2]>")]
pub struct Polyline {
    points: Vec<Point>,
    cumulative: Vec<f64>,
}

impl TryFrom<Vec<[f64; 2]>> for Polyline {
    type Error = PathError;

    fn try_from(raw: Vec<[f64; 2]>) -> Result<Self, Self::Error> {
        Polyline::new(raw.into_iter().map(|[x, y]| Point::new(x, y)).collect())
    }
}

impl From<Polyline> for Vec<[f64; 2]> {
    fn from(line: Polyline) -> Self {
        line.points.iter().map(|p| [p.x, p.y]).collect()
    }
}

impl Polyline {
    /// Builds a polyline, dropping consecutive duplicate points.
    pub fn new(raw: Vec<Point>) -> Result<Self, PathError> {
        if let Some(i) = raw.iter().position(|p| !(p.x.is_finite() && p.y.is_finite())) {
            return Err(PathError::NonFinite(i));
        }
        if raw.len() < 2 {
            return Err(PathError::TooShort(raw.len()));
        }
        let mut points: Vec<Point> = Vec::with_capacity(raw.len());
        for p in raw {
            if points.last().is_none_or(|last| (p - last).norm() > 1e-9) {
                points.push(p);
            }
        }
        if points.len() < 2 {
            return Err(PathError::ZeroLength);
        }
        let mut cumulative = Vec::with_capacity(points.len());
        let mut acc = 0.0;
        cumulative.push(0.0);
        for w in points.windows(2) {
            acc += (w[1] - w[0]).norm();
            cumulative.push(acc);
        }
        Ok(Self { points, cumulative })
    }

    /// Straight line from `start` heading `heading` of length `length`.
    pub fn straight(start: Point, heading: f64, length: f64) -> Result<Self, PathError> {
        let dir = Point::new(heading.cos(), heading.sin());
        Self::new(vec![start, start + dir * length])
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn length(&self) -> f64 {
        *self.cumulative.last().expect("polyline has points")
    }

    fn segment_at(&self, s: f64) -> usize {
        let n = self.points.len() - 1;
        match self.cumulative.binary_search_by(|c| c.total_cmp(&s)) {
            Ok(i) => i.min(n - 1),
            Err(i) => i.saturating_sub(1).min(n - 1),
        }
    }

    fn direction(&self, seg: usize) -> Point {
        (self.points[seg + 1] - self.points[seg]) / (self.cumulative[seg + 1] - self.cumulative[seg])
    }

    /// Point at arc length `s`, extrapolating linearly past either end.
    pub fn point_at(&self, s: f64) -> Point {
        let seg = self.segment_at(s);
        self.points[seg] + self.direction(seg) * (s - self.cumulative[seg])
    }

    /// Tangent heading at arc length `s`.
    pub fn heading_at(&self, s: f64) -> f64 {
        let d = self.direction(self.segment_at(s));
        d.y.atan2(d.x)
    }

    /// Unsigned curvature estimate at `s`: heading change across the
    /// neighbouring vertices divided by the arc length between segment midpoints.
    pub fn curvature_at(&self, s: f64) -> f64 {
        let n = self.points.len() - 1;
        if n < 2 {
            return 0.0;
        }
        let seg = self.segment_at(s);
        let mid = |i: usize| 0.5 * (self.cumulative[i] + self.cumulative[i + 1]);
        let pair = if seg + 1 < n && s >= mid(seg) {
            (seg, seg + 1)
        } else if seg > 0 {
            (seg - 1, seg)
        } else {
            (0, 1)
        };
        let (da, db) = (self.direction(pair.0), self.direction(pair.1));
        let turn = (da.x * db.y - da.y * db.x).atan2(da.dot(&db));
        let span = mid(pair.1) - mid(pair.0);
        if span > 1e-9 {
            (turn / span).abs()
        } else {
            0.0
        }
    }

    /// Closest point on the polyline, with the end segments extended so that
    /// points before the start or past the end get a meaningful arc length.
    pub fn project(&self, p: Point) -> Projection {
        let n = self.points.len() - 1;
        let mut best: Option<(f64, Projection)> = None;
        for seg in 0..n {
            let a = self.points[seg];
            let dir = self.direction(seg);
            let len = self.cumulative[seg + 1] - self.cumulative[seg];
            let mut u = (p - a).dot(&dir);
            if seg > 0 {
                u = u.max(0.0);
            }
            if seg + 1 < n {
                u = u.min(len);
            }
            let foot = a + dir * u;
            let dist = (p - foot).norm();
            let rel = p - foot;
            let lateral = dir.x * rel.y - dir.y * rel.x;
            let proj = Projection { s: self.cumulative[seg] + u, lateral, segment: seg };
            if best.as_ref().is_none_or(|(d, _)| dist < *d - 1e-12) {
                best = Some((dist, proj));
            }
        }
        best.expect("polyline has at least one segment").1
    }
}

/// Polyline approximating a circular arc.
pub fn arc_points(center: Point, radius: f64, start_angle: f64, sweep: f64, pieces: usize) -> Vec<Point> {
    (0..=pieces)
        .map(|i| {
            let a = start_angle + sweep * i as f64 / pieces as f64;
            center + Point::new(a.cos(), a.sin()) * radius
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_degenerate_input() {
        assert_eq!(Polyline::new(vec![Point::new(0.0, 0.0)]), Err(PathError::TooShort(1)));
        assert_eq!(Polyline::new(vec![Point::new(1.0, 1.0), Point::new(1.0, 1.0)]), Err(PathError::ZeroLength));
    }

    #[test]
    fn projection_and_extrapolation() {
        let line = Polyline::new(vec![Point::new(0.0, 0.0), Point::new(10.0, 0.0), Point::new(10.0, 10.0)]).unwrap();
        assert_eq!(line.length(), 20.0);
        let p = line.project(Point::new(4.0, 1.5));
        assert!((p.s - 4.0).abs() < 1e-12 && (p.lateral - 1.5).abs() < 1e-12);
        let before = line.project(Point::new(-3.0, -0.5));
        assert!((before.s + 3.0).abs() < 1e-12 && (before.lateral + 0.5).abs() < 1e-12);
        assert!((line.point_at(25.0) - Point::new(10.0, 15.0)).norm() < 1e-12);
        assert!((line.heading_at(15.0) - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
    }

    #[test]
    fn arc_curvature() {
        let line = Polyline::new(arc_points(Point::new(0.0, 0.0), 10.0, 0.0, 1.5, 60)).unwrap();
        let k = line.curvature_at(line.length() * 0.5);
        assert!((k - 0.1).abs() < 1e-3, "curvature {k}");
    }

    #[test]
    fn serde_round_trip() {
        let line = Polyline::new(vec![Point::new(0.0, 0.0), Point::new(3.0, 4.0)]).unwrap();
        let json = serde_json::to_string(&line).unwrap();
        assert_eq!(json, "[[0.0,0.0],[3.0,4.0]]");
        let back: Polyline = serde_json::from_str(&json).unwrap();
        assert_eq!(back, line);
    }
}
