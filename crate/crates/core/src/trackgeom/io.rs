//! Track files: comma-separated `x_m, y_m, w_tr_right_m, w_tr_left_m` rows.
//!
//! This is the layout of the public F1TENTH racetrack centre-line files. The
//! header may itself be a `#` comment (as in those files) or a plain row.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Track, TrackError, Waypoint};

const COLUMNS: [&str; 4] = ["x_m", "y_m", "w_tr_right_m", "w_tr_left_m"];

/// Parses a track and multiplies every coordinate and width by `scale`.
///
/// A final row that repeats the first point is dropped (closure is implicit),
/// as are rows that repeat the previous point exactly.
pub fn load_track<R: Read>(source: R, scale: f64) -> Result<Track, TrackError> {
    if !(scale.is_finite() && scale > 0.0) {
        return Err(TrackError::InvalidScale(scale));
    }
    let reader = BufReader::new(source);
    let mut columns: Option<[usize; 4]> = None;
    let mut rows: Vec<(usize, Waypoint)> = Vec::new();

    for (lineno, line) in reader.lines().enumerate() {
        let lineno = lineno + 1;
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        if let Some(comment) = trimmed.strip_prefix('#') {
            if columns.is_none() {
                columns = parse_header(comment);
            }
            continue;
        }
        if columns.is_none() {
            columns = parse_header(trimmed);
            if columns.is_some() {
                continue;
            }
            return Err(TrackError::Parse {
                line: lineno,
                msg: format!("expected a header naming {}", COLUMNS.join(", ")),
            });
        }
        let cols = columns.expect("header parsed above");
        let fields: Vec<&str> = trimmed.split(',').map(str::trim).collect();
        let get = |c: usize| -> Result<f64, TrackError> {
            let raw = fields
                .get(cols[c])
                .ok_or_else(|| TrackError::Parse { line: lineno, msg: format!("missing column {}", COLUMNS[c]) })?;
            raw.parse::<f64>()
                .map_err(|e| TrackError::Parse { line: lineno, msg: format!("column {}: {e} ({raw:?})", COLUMNS[c]) })
        };
        let (x, y, right, left) = (get(0)?, get(1)?, get(2)?, get(3)?);
        if !(right > 0.0 && left > 0.0) {
            return Err(TrackError::InvalidWidth { index: rows.len(), left, right });
        }
        rows.push((
            lineno,
            Waypoint { x: x * scale, y: y * scale, half_width_left: left * scale, half_width_right: right * scale },
        ));
    }

    let mut waypoints: Vec<Waypoint> = Vec::with_capacity(rows.len());
    for (lineno, w) in rows {
        if let Some(last) = waypoints.last() {
            if last.x == w.x && last.y == w.y {
                log::warn!("line {lineno}: dropping repeated waypoint");
                continue;
            }
        }
        waypoints.push(w);
    }
    if waypoints.len() > 1 {
        let (first, last) = (waypoints[0], waypoints[waypoints.len() - 1]);
        if first.x == last.x && first.y == last.y {
            waypoints.pop();
        }
    }
    Track::new(waypoints, scale)
}

pub fn load_track_file(path: impl AsRef<Path>, scale: f64) -> Result<Track, TrackError> {
    load_track(File::open(path)?, scale)
}

/// Writes a track in the loader's format, in the track's own (scaled) units.
pub fn write_track<W: Write>(track: &Track, sink: W) -> Result<(), TrackError> {
    let mut out = BufWriter::new(sink);
    writeln!(out, "# {}", COLUMNS.join(","))?;
    for w in track.waypoints() {
        writeln!(out, "{:?},{:?},{:?},{:?}", w.x, w.y, w.half_width_right, w.half_width_left)?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_track_file(track: &Track, path: impl AsRef<Path>) -> Result<(), TrackError> {
    write_track(track, File::create(path)?)
}

fn parse_header(line: &str) -> Option<[usize; 4]> {
    let names: Vec<&str> = line.split(',').map(str::trim).collect();
    let mut cols = [0usize; 4];
    for (slot, want) in cols.iter_mut().zip(COLUMNS) {
        *slot = names.iter().position(|n| *n == want)?;
    }
    Some(cols)
}
