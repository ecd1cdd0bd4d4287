//! Synthetic desk-scale tracks built from straight and circular-arc pieces.

use std::f64::consts::PI;

use super::{Track, TrackError, Waypoint};

/// Default half width, matching a 2.2 m wide downscaled track.
pub const DEFAULT_HALF_WIDTH: f64 = 1.1;
/// Default centre-line sampling interval, meters.
pub const DEFAULT_SPACING: f64 = 0.005;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Piece {
    Straight(f64),
    /// Circular arc; positive angle turns left.
    Arc {
        radius: f64,
        angle: f64,
    },
}

impl Piece {
    fn length(&self) -> f64 {
        match *self {
            Piece::Straight(l) => l,
            Piece::Arc { radius, angle } => radius * angle.abs(),
        }
    }

    /// Pose after travelling `u` meters along the piece from `(x, y, h)`.
    fn advance(&self, (x, y, h): (f64, f64, f64), u: f64) -> (f64, f64, f64) {
        match *self {
            Piece::Straight(_) => (x + u * h.cos(), y + u * h.sin(), h),
            Piece::Arc { radius, angle } => {
                let s = angle.signum();
                let cx = x - s * radius * h.sin();
                let cy = y + s * radius * h.cos();
                let h2 = h + s * u / radius;
                (cx + s * radius * h2.sin(), cy - s * radius * h2.cos(), h2)
            }
        }
    }
}

/// Samples a closed piecewise path at (nearly) uniform arc length.
///
/// The spacing is adjusted slightly so the lap length is a whole number of
/// intervals; the start point is not repeated at the end.
pub fn build(pieces: &[Piece], spacing: f64, half_width: f64) -> Result<Track, TrackError> {
    let total: f64 = pieces.iter().map(Piece::length).sum();
    let n = (total / spacing).round().max(3.0) as usize;
    let ds = total / n as f64;

    let mut starts = Vec::with_capacity(pieces.len());
    let mut pose = (0.0, 0.0, 0.0);
    let mut offset = 0.0;
    for p in pieces {
        starts.push((offset, pose));
        pose = p.advance(pose, p.length());
        offset += p.length();
    }

    let mut waypoints = Vec::with_capacity(n);
    let mut piece = 0;
    for k in 0..n {
        let s = k as f64 * ds;
        while piece + 1 < pieces.len() && s >= starts[piece + 1].0 {
            piece += 1;
        }
        let (s0, pose0) = starts[piece];
        let (x, y, _) = pieces[piece].advance(pose0, s - s0);
        waypoints.push(Waypoint::new(x, y, half_width));
    }
    Track::new(waypoints, 1.0)
}

/// A 60 m straight (the loop closes with one long return segment).
pub fn straight(spacing: f64) -> Result<Track, TrackError> {
    build(&[Piece::Straight(60.0)], spacing, DEFAULT_HALF_WIDTH)
}

/// Counter-clockwise circle of radius 12 m.
pub fn circle(spacing: f64) -> Result<Track, TrackError> {
    circle_with_radius(12.0, spacing)
}

pub fn circle_with_radius(radius: f64, spacing: f64) -> Result<Track, TrackError> {
    build(&[Piece::Arc { radius, angle: 2.0 * PI }], spacing, DEFAULT_HALF_WIDTH)
}

/// Oval whose long sides each carry a right-left-right chicane.
pub fn s_curve(spacing: f64) -> Result<Track, TrackError> {
    let (a, rw, re) = (5.0, 8.0, 10.0);
    let d30 = PI / 6.0;
    let wiggle = [
        Piece::Arc { radius: rw, angle: -d30 },
        Piece::Arc { radius: rw, angle: 2.0 * d30 },
        Piece::Arc { radius: rw, angle: -d30 },
    ];
    let mut pieces = vec![Piece::Straight(a)];
    pieces.extend(wiggle);
    pieces.push(Piece::Straight(a));
    pieces.push(Piece::Arc { radius: re, angle: PI });
    pieces.push(Piece::Straight(a));
    pieces.extend(wiggle);
    pieces.push(Piece::Straight(a));
    pieces.push(Piece::Arc { radius: re, angle: PI });
    build(&pieces, spacing, DEFAULT_HALF_WIDTH)
}

/// Oval whose long sides each carry one left-right lane change
/// (15 m arcs of 45 degrees) between 8 m straights, closed by 10 m half circles.
pub fn sweeper(spacing: f64) -> Result<Track, TrackError> {
    let (a, rs, re) = (8.0, 15.0, 10.0);
    let q = PI / 4.0;
    let side = [
        Piece::Straight(a),
        Piece::Arc { radius: rs, angle: q },
        Piece::Arc { radius: rs, angle: -q },
        Piece::Straight(a),
    ];
    let mut pieces = side.to_vec();
    pieces.push(Piece::Arc { radius: re, angle: PI });
    pieces.extend(side);
    pieces.push(Piece::Arc { radius: re, angle: PI });
    build(&pieces, spacing, DEFAULT_HALF_WIDTH)
}

/// Switchback loop: three 7 m hairpins, the middle one a right-hander, and a
/// wide 21 m return bend.
/// Waypoint 0 sits at the entry of the first hairpin.
pub fn hairpin(spacing: f64) -> Result<Track, TrackError> {
    let (r, l1, l2) = (7.0, 20.0, 12.0);
    let pieces = [
        Piece::Arc { radius: r, angle: PI },
        Piece::Straight(l2),
        Piece::Arc { radius: r, angle: -PI },
        Piece::Straight(l2),
        Piece::Arc { radius: r, angle: PI },
        Piece::Straight(l1),
        Piece::Arc { radius: 3.0 * r, angle: PI },
        Piece::Straight(l1),
    ];
    build(&pieces, spacing, DEFAULT_HALF_WIDTH)
}

/// The named synthetic tracks, in a fixed order.
pub const NAMES: [&str; 4] = ["straight", "circle", "s_curve", "hairpin"];

pub fn by_name(name: &str, spacing: f64) -> Option<Result<Track, TrackError>> {
    match name {
        "straight" => Some(straight(spacing)),
        "circle" => Some(circle(spacing)),
        "s_curve" | "s-curve" => Some(s_curve(spacing)),
        "hairpin" => Some(hairpin(spacing)),
        "sweeper" => Some(sweeper(spacing)),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn closure_gap(t: &Track) -> f64 {
        let w = t.waypoints();
        let (a, b) = (w[w.len() - 1], w[0]);
        (a.x - b.x).hypot(a.y - b.y)
    }

    #[test]
    fn loops_close_at_the_sampling_interval() {
        for t in [circle(0.05).unwrap(), s_curve(0.05).unwrap(), hairpin(0.05).unwrap()] {
            let gap = closure_gap(&t);
            assert!((gap - t.mean_spacing()).abs() < 1e-3, "gap {gap}");
        }
    }

    #[test]
    fn circle_waypoints_sit_on_the_radius() {
        let t = circle(0.1).unwrap();
        for w in t.waypoints() {
            let r = w.x.hypot(w.y - 12.0);
            assert!((r - 12.0).abs() < 1e-9);
        }
    }

    #[test]
    fn hairpin_lanes_are_separated() {
        let t = hairpin(0.1).unwrap();
        let w = t.waypoints();
        let n = w.len();
        // any two waypoints far apart along the path are far apart in space
        for i in (0..n).step_by(7) {
            for j in (0..n).step_by(11) {
                let along = (i as isize - j as isize).unsigned_abs().min(n - (i as isize - j as isize).unsigned_abs());
                if along as f64 * t.mean_spacing() > 12.0 {
                    let d = (w[i].x - w[j].x).hypot(w[i].y - w[j].y);
                    assert!(d > 4.0, "{i} {j} {d}");
                }
            }
        }
    }
}
