//! Waypoint tracks and path-relative geometry.
//!
//! A [`Track`] is an ordered, implicitly closed polyline of centre-line
//! waypoints. Everything the controller and the learner need to know about
//! "where the car is relative to the path" lives here: the nearest waypoint,
//! cross-track error, heading error, lap progress and the local curvature
//! score used for the curvature/xte analysis.

mod grid;
pub mod io;
pub mod synth;

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use grid::GridIndex;

pub use io::{load_track, load_track_file, write_track, write_track_file};

/// Number of waypoints in the curvature window.
pub const CURVATURE_WINDOW: usize = 10;

#[derive(Debug, Error)]
pub enum TrackError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("track needs at least 3 distinct waypoints, got {0}")]
    TooFewWaypoints(usize),
    #[error("waypoint {index}: half widths must be positive (left {left}, right {right})")]
    InvalidWidth { index: usize, left: f64, right: f64 },
    #[error("waypoint {0} has non-finite coordinates")]
    NonFinite(usize),
    #[error("waypoints {0} and {1} coincide")]
    DuplicatePoint(usize, usize),
    #[error("scale must be positive and finite, got {0}")]
    InvalidScale(f64),
    #[error("curvature window needs {needed} waypoints ahead, track has {available}")]
    WindowTooShort { needed: usize, available: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Waypoint {
    pub x: f64,
    pub y: f64,
    pub half_width_left: f64,
    pub half_width_right: f64,
}

impl Waypoint {
    pub fn new(x: f64, y: f64, half_width: f64) -> Self {
        Waypoint { x, y, half_width_left: half_width, half_width_right: half_width }
    }

    /// The narrower of the two half widths.
    pub fn min_half_width(&self) -> f64 {
        self.half_width_left.min(self.half_width_right)
    }
}

/// How cross-track error is measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum XteMode {
    /// Euclidean distance to the closest waypoint.
    #[default]
    NearestWaypoint,
    /// Distance to the closer of the two path segments incident to the
    /// closest waypoint.
    Segment,
}

/// Where a point sits relative to the path.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathProjection {
    pub nearest_index: usize,
    /// Distance to the nearest waypoint, meters.
    pub distance: f64,
    /// Heading of the segment leaving the nearest waypoint, in (-pi, pi].
    pub path_heading: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LapProgress {
    pub index: usize,
    pub lap_completed: bool,
}

/// Curvature score with a count of degenerate (zero-length chord) triples
/// that were left out of the sum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvatureScore {
    pub value: f64,
    pub skipped: usize,
}

/// An immutable closed racetrack.
#[derive(Debug, Clone)]
pub struct Track {
    waypoints: Vec<Waypoint>,
    closed: bool,
    scale_applied: f64,
    mean_spacing: f64,
    headings: Vec<f64>,
    index: GridIndex,
}

impl Track {
    /// Builds a closed track, validating every waypoint.
    pub fn new(waypoints: Vec<Waypoint>, scale_applied: f64) -> Result<Self, TrackError> {
        if waypoints.len() < 3 {
            return Err(TrackError::TooFewWaypoints(waypoints.len()));
        }
        for (i, w) in waypoints.iter().enumerate() {
            if !(w.x.is_finite() && w.y.is_finite()) {
                return Err(TrackError::NonFinite(i));
            }
            let widths_ok = w.half_width_left.is_finite()
                && w.half_width_right.is_finite()
                && w.half_width_left > 0.0
                && w.half_width_right > 0.0;
            if !widths_ok {
                return Err(TrackError::InvalidWidth { index: i, left: w.half_width_left, right: w.half_width_right });
            }
        }
        let n = waypoints.len();
        for i in 0..n {
            let j = (i + 1) % n;
            if waypoints[i].x == waypoints[j].x && waypoints[i].y == waypoints[j].y {
                return Err(TrackError::DuplicatePoint(i, j));
            }
        }

        let mut total = 0.0;
        let mut headings = Vec::with_capacity(n);
        for i in 0..n {
            let a = &waypoints[i];
            let b = &waypoints[(i + 1) % n];
            total += (b.x - a.x).hypot(b.y - a.y);
            headings.push(wrap_angle((b.y - a.y).atan2(b.x - a.x)));
        }
        let mean_spacing = total / n as f64;
        let index = GridIndex::build(&waypoints, mean_spacing);
        Ok(Track { waypoints, closed: true, scale_applied, mean_spacing, headings, index })
    }

    pub fn waypoints(&self) -> &[Waypoint] {
        &self.waypoints
    }

    pub fn len(&self) -> usize {
        self.waypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.waypoints.is_empty()
    }

    pub fn is_closed(&self) -> bool {
        self.closed
    }

    pub fn scale_applied(&self) -> f64 {
        self.scale_applied
    }

    /// Mean distance between consecutive waypoints, including the closing segment.
    pub fn mean_spacing(&self) -> f64 {
        self.mean_spacing
    }

    /// Total centre-line length including the closing segment.
    pub fn length(&self) -> f64 {
        self.mean_spacing * self.len() as f64
    }

    pub fn next_index(&self, i: usize) -> usize {
        (i + 1) % self.len()
    }

    /// Index `steps` waypoints ahead of `i`, wrapping around the loop.
    pub fn index_ahead(&self, i: usize, steps: usize) -> usize {
        (i + steps) % self.len()
    }

    /// Heading of the segment from waypoint `i` to its successor.
    pub fn segment_heading(&self, i: usize) -> f64 {
        self.headings[i]
    }

    /// Index of the waypoint closest to `(x, y)`; ties go to the lowest index.
    pub fn nearest_waypoint_index(&self, x: f64, y: f64) -> usize {
        self.index.nearest(&self.waypoints, x, y).0
    }

    pub fn project(&self, x: f64, y: f64) -> PathProjection {
        let (i, d2) = self.index.nearest(&self.waypoints, x, y);
        PathProjection { nearest_index: i, distance: d2.sqrt(), path_heading: self.headings[i] }
    }

    /// Unsigned distance from `(x, y)` to the path.
    pub fn cross_track_error(&self, x: f64, y: f64, mode: XteMode) -> f64 {
        let p = self.project(x, y);
        match mode {
            XteMode::NearestWaypoint => p.distance,
            XteMode::Segment => self.segment_distance(p.nearest_index, x, y),
        }
    }

    /// Distance to the closer of the two segments touching waypoint `i`.
    pub fn segment_distance(&self, i: usize, x: f64, y: f64) -> f64 {
        let n = self.len();
        let prev = (i + n - 1) % n;
        let next = (i + 1) % n;
        let a = point_segment_distance(&self.waypoints[prev], &self.waypoints[i], x, y);
        let b = point_segment_distance(&self.waypoints[i], &self.waypoints[next], x, y);
        a.min(b)
    }

    /// Absolute wrapped difference between `yaw` and the local path direction, in [0, pi].
    pub fn heading_error(&self, x: f64, y: f64, yaw: f64) -> f64 {
        let p = self.project(x, y);
        wrap_angle(yaw - p.path_heading).abs()
    }

    /// Curvature score of the ten waypoints starting at the one nearest `(x, y)`.
    pub fn local_curvature(&self, x: f64, y: f64) -> Result<f64, TrackError> {
        self.curvature_at(self.nearest_waypoint_index(x, y)).map(|c| c.value)
    }

    /// Curvature score of the window starting at waypoint `start`.
    pub fn curvature_at(&self, start: usize) -> Result<CurvatureScore, TrackError> {
        if self.len() < CURVATURE_WINDOW {
            return Err(TrackError::WindowTooShort { needed: CURVATURE_WINDOW, available: self.len() });
        }
        let mut window = [(0.0, 0.0); CURVATURE_WINDOW];
        for (k, slot) in window.iter_mut().enumerate() {
            let w = &self.waypoints[self.index_ahead(start, k)];
            *slot = (w.x, w.y);
        }
        let score = window_curvature(&window);
        if score.skipped > 0 {
            log::warn!("curvature window at waypoint {start}: skipped {} degenerate triple(s)", score.skipped);
        }
        Ok(score)
    }

    /// Advances lap progress monotonically.
    ///
    /// The index only moves forward (by at most a quarter lap per call), and
    /// `lap_completed` is reported when the index wraps past the start after
    /// at least 90% of the waypoints were covered.
    pub fn lap_progress(&self, x: f64, y: f64, prev_index: usize) -> LapProgress {
        let n = self.len();
        let nearest = self.nearest_waypoint_index(x, y);
        let forward = (nearest + n - prev_index % n) % n;
        let max_advance = (n / 4).max(1);
        if forward == 0 || forward > max_advance {
            return LapProgress { index: prev_index, lap_completed: false };
        }
        if nearest < prev_index {
            let covered = (prev_index + 1) as f64;
            if covered >= 0.9 * n as f64 {
                return LapProgress { index: nearest, lap_completed: true };
            }
            return LapProgress { index: prev_index, lap_completed: false };
        }
        LapProgress { index: nearest, lap_completed: false }
    }
}

/// Sum of `1 - cos(theta)` over the interior points of a waypoint window,
/// where `theta` is the turn between consecutive chords.
pub fn window_curvature(points: &[(f64, f64)]) -> CurvatureScore {
    let mut value = 0.0;
    let mut skipped = 0;
    for w in points.windows(3) {
        let v1 = (w[1].0 - w[0].0, w[1].1 - w[0].1);
        let v2 = (w[2].0 - w[1].0, w[2].1 - w[1].1);
        let n1 = v1.0.hypot(v1.1);
        let n2 = v2.0.hypot(v2.1);
        if n1 == 0.0 || n2 == 0.0 {
            skipped += 1;
            continue;
        }
        let cos = ((v1.0 * v2.0 + v1.1 * v2.1) / (n1 * n2)).clamp(-1.0, 1.0);
        value += 1.0 - cos;
    }
    CurvatureScore { value, skipped }
}

/// Wraps an angle into (-pi, pi].
pub fn wrap_angle(a: f64) -> f64 {
    let mut r = a % (2.0 * PI);
    if r > PI {
        r -= 2.0 * PI;
    } else if r <= -PI {
        r += 2.0 * PI;
    }
    r
}

fn point_segment_distance(a: &Waypoint, b: &Waypoint, x: f64, y: f64) -> f64 {
    let (dx, dy) = (b.x - a.x, b.y - a.y);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 { (((x - a.x) * dx + (y - a.y) * dy) / len2).clamp(0.0, 1.0) } else { 0.0 };
    let (px, py) = (a.x + t * dx, a.y + t * dy);
    (x - px).hypot(y - py)
}
