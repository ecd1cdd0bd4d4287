//! Uniform-grid spatial index over waypoints.
//!
//! Answers exact nearest-waypoint queries (ties resolved to the lowest index)
//! by scanning square rings of cells outward from the query cell until no
//! unvisited cell can hold a closer point.

use super::Waypoint;

const MAX_CELLS: f64 = 250_000.0;

#[derive(Debug, Clone)]
pub(crate) struct GridIndex {
    min_x: f64,
    min_y: f64,
    cell: f64,
    nx: i64,
    ny: i64,
    /// CSR layout: waypoints of cell `c` are `items[starts[c]..starts[c + 1]]`.
    starts: Vec<u32>,
    items: Vec<u32>,
}

impl GridIndex {
    pub(crate) fn build(points: &[Waypoint], mean_spacing: f64) -> Self {
        let (mut min_x, mut min_y) = (f64::INFINITY, f64::INFINITY);
        let (mut max_x, mut max_y) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
        for p in points {
            min_x = min_x.min(p.x);
            min_y = min_y.min(p.y);
            max_x = max_x.max(p.x);
            max_y = max_y.max(p.y);
        }
        let width = (max_x - min_x).max(1e-9);
        let height = (max_y - min_y).max(1e-9);
        let by_area = (width * height / MAX_CELLS).sqrt();
        let cell = (8.0 * mean_spacing).max(by_area).max(1e-9);
        let nx = ((width / cell).floor() as i64 + 1).max(1);
        let ny = ((height / cell).floor() as i64 + 1).max(1);

        let ncells = (nx * ny) as usize;
        let mut counts = vec![0u32; ncells + 1];
        let cell_of = |p: &Waypoint| -> usize {
            let cx = (((p.x - min_x) / cell).floor() as i64).clamp(0, nx - 1);
            let cy = (((p.y - min_y) / cell).floor() as i64).clamp(0, ny - 1);
            (cy * nx + cx) as usize
        };
        for p in points {
            counts[cell_of(p) + 1] += 1;
        }
        for c in 0..ncells {
            counts[c + 1] += counts[c];
        }
        let starts = counts.clone();
        let mut fill = counts;
        let mut items = vec![0u32; points.len()];
        for (i, p) in points.iter().enumerate() {
            let c = cell_of(p);
            items[fill[c] as usize] = i as u32;
            fill[c] += 1;
        }
        GridIndex { min_x, min_y, cell, nx, ny, starts, items }
    }

    /// Returns `(index, squared distance)` of the nearest waypoint.
    pub(crate) fn nearest(&self, points: &[Waypoint], x: f64, y: f64) -> (usize, f64) {
        let cx = ((x - self.min_x) / self.cell).floor();
        let cy = ((y - self.min_y) / self.cell).floor();
        if !cx.is_finite() || !cy.is_finite() {
            return brute_force(points, x, y);
        }
        let cx = cx as i64;
        let cy = cy as i64;

        // Rings closer than this cannot intersect the grid.
        let gap_x = if cx < 0 {
            -cx
        } else if cx >= self.nx {
            cx - self.nx + 1
        } else {
            0
        };
        let gap_y = if cy < 0 {
            -cy
        } else if cy >= self.ny {
            cy - self.ny + 1
        } else {
            0
        };
        let r0 = gap_x.max(gap_y);
        let r_max = r0 + self.nx.max(self.ny);

        let mut best = (usize::MAX, f64::INFINITY);
        let consider = |c: i64, best: &mut (usize, f64)| {
            let lo = self.starts[c as usize] as usize;
            let hi = self.starts[c as usize + 1] as usize;
            for &i in &self.items[lo..hi] {
                let i = i as usize;
                let p = &points[i];
                let d2 = (p.x - x) * (p.x - x) + (p.y - y) * (p.y - y);
                if d2 < best.1 || (d2 == best.1 && i < best.0) {
                    *best = (i, d2);
                }
            }
        };

        let mut r = r0;
        loop {
            let y_lo = (cy - r).max(0);
            let y_hi = (cy + r).min(self.ny - 1);
            for gy in y_lo..=y_hi {
                if (gy - cy).abs() == r {
                    let x_lo = (cx - r).max(0);
                    let x_hi = (cx + r).min(self.nx - 1);
                    for gx in x_lo..=x_hi {
                        consider(gy * self.nx + gx, &mut best);
                    }
                } else {
                    for gx in [cx - r, cx + r] {
                        if gx >= 0 && gx < self.nx {
                            consider(gy * self.nx + gx, &mut best);
                        }
                    }
                }
            }
            if best.0 != usize::MAX {
                let reach = r as f64 * self.cell;
                if best.1.sqrt() < reach {
                    return best;
                }
            }
            if r >= r_max {
                break;
            }
            r += 1;
        }
        if best.0 == usize::MAX {
            brute_force(points, x, y)
        } else {
            best
        }
    }
}

pub(crate) fn brute_force(points: &[Waypoint], x: f64, y: f64) -> (usize, f64) {
    let mut best = (0usize, f64::INFINITY);
    for (i, p) in points.iter().enumerate() {
        let d2 = (p.x - x) * (p.x - x) + (p.y - y) * (p.y - y);
        if d2 < best.1 {
            best = (i, d2);
        }
    }
    best
}
