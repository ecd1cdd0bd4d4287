//! Warm-start policy: path-relative observations, an MLP mapping them to a
//! normalized control sequence, and the value network used during
//! fine-tuning.

pub mod mlp;

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use thiserror::Error;

use crate::trackgeom::{wrap_angle, Track};
use crate::vehicle::{ControlInput, ControlSequence, VehicleSpec, VehicleState};

pub use mlp::{
    adam_update, gaussian_entropy, gaussian_log_prob, gaussian_sample, gradients, policy_loss_gradients,
    value_loss_gradients, Adam, ForwardCache, LossKind, MlpParams, OutputActivation, PolicyLossWeights, PolicyLosses,
    PolicySample, FORMAT_VERSION,
};

/// Lookahead waypoints in an observation.
pub const LOOKAHEAD: usize = 10;
/// Arc-length spacing between lookahead points, meters.
pub const LOOKAHEAD_SPACING: f64 = 0.5;
pub const HIDDEN: [usize; 2] = [64, 64];
pub const LOG_STD_INIT: f64 = -1.0;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("input dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("inconsistent network shape: {0}")]
    Shape(String),
    #[error("non-finite parameter or input")]
    NonFinite,
    #[error("empty batch")]
    EmptyBatch,
    #[error("unsupported checkpoint format version {0}")]
    UnsupportedVersion(u64),
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Path-relative view of the vehicle state.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub v: f64,
    /// Vehicle yaw minus path heading, wrapped; positive when turned left of the path.
    pub yaw_error: f64,
    /// Distance to the nearest waypoint, positive when the vehicle is left of the path.
    pub xte: f64,
    /// `(x, y)` of upcoming waypoints in the vehicle frame (x forward, y left).
    pub lookahead: Vec<(f64, f64)>,
}

impl Observation {
    pub fn dim(k: usize) -> usize {
        3 + 2 * k
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(Self::dim(self.lookahead.len()));
        out.extend([self.v, self.yaw_error, self.xte]);
        for &(x, y) in &self.lookahead {
            out.push(x);
            out.push(y);
        }
        out
    }
}

/// Observation with `k` lookahead points spaced [`LOOKAHEAD_SPACING`] apart
/// in arc length along the path, starting one spacing past the nearest waypoint.
pub fn observe(track: &Track, state: &VehicleState, k: usize) -> Observation {
    let p = track.project(state.x, state.y);
    let wps = track.waypoints();
    let near = &wps[p.nearest_index];
    let heading = p.path_heading;
    let (sh, ch) = heading.sin_cos();
    let side = ch * (state.y - near.y) - sh * (state.x - near.x);
    let xte = if side < 0.0 { -p.distance } else { p.distance };
    let (sy, cy) = state.yaw.sin_cos();
    let mut lookahead = Vec::with_capacity(k);
    let (mut i, mut walked) = (p.nearest_index, 0.0);
    for j in 1..=k {
        let goal = j as f64 * LOOKAHEAD_SPACING;
        // Stop on the waypoint closest to the goal distance.
        loop {
            let next = track.next_index(i);
            let seg = (wps[next].x - wps[i].x).hypot(wps[next].y - wps[i].y);
            if walked + 0.5 * seg >= goal {
                break;
            }
            walked += seg;
            i = next;
        }
        let (dx, dy) = (wps[i].x - state.x, wps[i].y - state.y);
        lookahead.push((cy * dx + sy * dy, -sy * dx + cy * dy));
    }
    Observation { v: state.v, yaw_error: wrap_angle(state.yaw - heading), xte, lookahead }
}

static CLAMP_WARNINGS: AtomicU64 = AtomicU64::new(0);

/// Components clamped by [`decode_action`] since process start.
pub fn clamp_warning_count() -> u64 {
    CLAMP_WARNINGS.load(Ordering::Relaxed)
}

/// Maps a normalized interleaved `[a0, s0, a1, s1, ...]` vector onto the
/// vehicle bounds. Components outside `[-1, 1]` are clamped and counted.
pub fn decode_action(normalized: &[f64], spec: &VehicleSpec) -> ControlSequence {
    let mut clamped = 0u64;
    let mut c = |u: f64| {
        if !(-1.0..=1.0).contains(&u) {
            clamped += 1;
            if u.is_nan() {
                return 0.0;
            }
        }
        u.clamp(-1.0, 1.0)
    };
    let map = |u: f64, lo: f64, hi: f64| 0.5 * (lo + hi) + 0.5 * u * (hi - lo);
    let seq = normalized
        .chunks(2)
        .map(|p| {
            let a = c(p[0]);
            let s = c(p.get(1).copied().unwrap_or(0.0));
            ControlInput::new(map(a, spec.accel_min, spec.accel_max), map(s, spec.steer_min, spec.steer_max))
        })
        .collect();
    if clamped > 0 {
        CLAMP_WARNINGS.fetch_add(clamped, Ordering::Relaxed);
        log::warn!("decode_action clamped {clamped} component(s) into [-1, 1]");
    }
    ControlSequence(seq)
}

/// Inverse of [`decode_action`] for in-bounds sequences.
pub fn encode_action(seq: &ControlSequence, spec: &VehicleSpec) -> Vec<f64> {
    let n = |v: f64, lo: f64, hi: f64| (2.0 * v - (lo + hi)) / (hi - lo);
    seq.inputs()
        .iter()
        .flat_map(|u| [n(u.accel, spec.accel_min, spec.accel_max), n(u.steer, spec.steer_min, spec.steer_max)])
        .collect()
}

/// A warm-start policy network: `3 + 2K -> 64 -> 64 -> 2H`, tanh output and a Gaussian head.
pub fn new_policy<R: Rng>(k: usize, horizon: usize, log_std_init: f64, rng: &mut R) -> Result<MlpParams, PolicyError> {
    let dims = [Observation::dim(k), HIDDEN[0], HIDDEN[1], 2 * horizon];
    MlpParams::new(&dims, OutputActivation::Tanh, Some(log_std_init), 0.1, rng)
}

/// Scalar value network with the same hidden sizes.
pub fn new_value_net<R: Rng>(k: usize, rng: &mut R) -> Result<MlpParams, PolicyError> {
    let dims = [Observation::dim(k), HIDDEN[0], HIDDEN[1], 1];
    MlpParams::new(&dims, OutputActivation::Identity, None, 0.1, rng)
}

/// Mean guess and, when sampling, a Gaussian draw clamped to `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyOutput {
    pub mean: Vec<f64>,
    /// The raw (unclamped) draw; its log-probability is `log_prob`.
    pub sample: Vec<f64>,
    pub log_prob: f64,
}

impl PolicyOutput {
    /// The sample clamped into the decodable range.
    pub fn clamped_sample(&self) -> Vec<f64> {
        self.sample.iter().map(|u| u.clamp(-1.0, 1.0)).collect()
    }
}

pub fn sample_action<R: Rng>(params: &MlpParams, obs: &[f64], rng: &mut R) -> Result<PolicyOutput, PolicyError> {
    let mean = params.forward(obs)?;
    let log_std = params.log_std().ok_or_else(|| PolicyError::Shape("network has no log_std head".into()))?;
    let sample = gaussian_sample(&mean, log_std, rng);
    let log_prob = gaussian_log_prob(&mean, log_std, &sample);
    Ok(PolicyOutput { mean, sample, log_prob })
}

/// Per-input mean and inverse standard deviation over `rows`, for
/// [`MlpParams::set_input_normalization`]. Near-constant inputs keep unit scale.
pub fn fit_normalization(rows: &[&[f64]]) -> (Vec<f64>, Vec<f64>) {
    let dim = rows.first().map_or(0, |r| r.len());
    let n = rows.len().max(1) as f64;
    let mut mean = vec![0.0; dim];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r.iter()) {
            *m += v / n;
        }
    }
    let mut var = vec![0.0; dim];
    for r in rows {
        for ((s, v), m) in var.iter_mut().zip(r.iter()).zip(&mean) {
            *s += (v - m) * (v - m) / n;
        }
    }
    let scale = var.iter().map(|v| if *v > 1e-12 { 1.0 / v.sqrt() } else { 1.0 }).collect();
    (mean, scale)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dfo;
    use crate::trackgeom::{synth, Waypoint};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rotated(track: &Track, angle: f64, shift: (f64, f64)) -> Track {
        let (s, c) = angle.sin_cos();
        let wps = track
            .waypoints()
            .iter()
            .map(|w| {
                let mut r = *w;
                r.x = c * w.x - s * w.y + shift.0;
                r.y = s * w.x + c * w.y + shift.1;
                r
            })
            .collect();
        Track::new(wps, 1.0).unwrap()
    }

    #[test]
    fn aligned_on_straight() {
        let t = synth::straight(synth::DEFAULT_SPACING).unwrap();
        let w0 = t.waypoints()[0];
        let o = observe(&t, &VehicleState::new(w0.x, w0.y, t.segment_heading(0), 10.0), LOOKAHEAD);
        assert_eq!(o.to_vec().len(), 23);
        assert_eq!(o.v, 10.0);
        assert!(o.xte.abs() < 1e-12 && o.yaw_error.abs() < 1e-12);
        for (j, (x, y)) in o.lookahead.iter().enumerate() {
            assert!(y.abs() < 1e-9);
            assert!((x - (j + 1) as f64 * LOOKAHEAD_SPACING).abs() < 1e-6, "{x}");
        }
    }

    #[test]
    fn left_offset_is_positive_xte() {
        let wps: Vec<Waypoint> = (0..400)
            .map(|i| {
                let a = i as f64 / 400.0 * std::f64::consts::TAU;
                Waypoint::new(30.0 * a.cos(), 30.0 * a.sin(), 2.0)
            })
            .collect();
        let t = Track::new(wps, 1.0).unwrap();
        // Counter-clockwise circle: left of the path is towards the centre.
        let o = observe(&t, &VehicleState::new(29.5, 0.0, std::f64::consts::FRAC_PI_2, 10.0), 4);
        assert!((o.xte - 0.5).abs() < 1e-12, "{}", o.xte);
        let o = observe(&t, &VehicleState::new(30.5, 0.0, std::f64::consts::FRAC_PI_2, 10.0), 4);
        assert!((o.xte + 0.5).abs() < 1e-12);
    }

    #[test]
    fn rigid_motion_invariance() {
        let t = synth::hairpin(0.05).unwrap();
        let state = VehicleState::new(t.waypoints()[37].x + 0.3, t.waypoints()[37].y - 0.2, 0.7, 9.0);
        let base = observe(&t, &state, LOOKAHEAD).to_vec();
        for (angle, shift) in [(std::f64::consts::FRAC_PI_2, (0.0, 0.0)), (2.1, (13.0, -4.0))] {
            let rt = rotated(&t, angle, shift);
            let (s, c) = angle.sin_cos();
            let rs = VehicleState::new(
                c * state.x - s * state.y + shift.0,
                s * state.x + c * state.y + shift.1,
                wrap_angle(state.yaw + angle),
                state.v,
            );
            let o = observe(&rt, &rs, LOOKAHEAD).to_vec();
            for (a, b) in base.iter().zip(&o) {
                assert!((a - b).abs() < 1e-9, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn decode_examples() {
        let spec = VehicleSpec::default();
        let mid = decode_action(&[0.0; 50], &spec);
        assert!(mid.inputs().iter().all(|u| u.accel == 0.0 && u.steer == 0.0));
        let top = decode_action(&[1.0; 50], &spec);
        assert!(top.inputs().iter().all(|u| u.accel == 5.0 && u.steer == 0.52));
        assert_eq!(top.len(), 25);
    }

    #[test]
    fn decode_clamps_and_counts() {
        let spec = VehicleSpec::default();
        let before = clamp_warning_count();
        let s = decode_action(&[3.0, -2.0], &spec);
        assert_eq!(s.inputs()[0], ControlInput::new(5.0, -0.52));
        assert!(clamp_warning_count() >= before + 2);
    }

    #[test]
    fn decode_inverts_dfo_normalize() {
        let spec = VehicleSpec::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let seq = ControlSequence(
            (0..25).map(|_| ControlInput::new(rng.random_range(-5.0..5.0), rng.random_range(-0.52..0.52))).collect(),
        );
        let bounds = spec.input_bounds(25);
        let n = dfo::normalize(&seq.to_flat(), &bounds).unwrap();
        assert_eq!(n, encode_action(&seq, &spec));
        let back = decode_action(&n, &spec);
        for (a, b) in back.inputs().iter().zip(seq.inputs()) {
            assert!((a.accel - b.accel).abs() < 1e-12 && (a.steer - b.steer).abs() < 1e-12);
        }
    }

    #[test]
    fn sampled_log_prob_reproduces() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = new_policy(LOOKAHEAD, 25, LOG_STD_INIT, &mut rng).unwrap();
        let obs: Vec<f64> = (0..23).map(|i| (i as f64 * 0.37).sin()).collect();
        let out = sample_action(&p, &obs, &mut rng).unwrap();
        let again = gaussian_log_prob(&p.forward(&obs).unwrap(), p.log_std().unwrap(), &out.sample);
        assert!((again - out.log_prob).abs() < 1e-9);
        assert!(out.clamped_sample().iter().all(|u| u.abs() <= 1.0));
    }

    #[test]
    fn normalization_changes_nothing_when_identity() {
        let rows: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, 2.0 * i as f64, 5.0]).collect();
        let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        let (m, s) = fit_normalization(&refs);
        assert!((m[0] - 4.5).abs() < 1e-12 && (m[2] - 5.0).abs() < 1e-12);
        assert_eq!(s[2], 1.0);
        assert!((s[1] * 2.0 - s[0]).abs() < 1e-12);
    }
}
