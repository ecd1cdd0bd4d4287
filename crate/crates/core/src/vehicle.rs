//! Kinematic bicycle model.
//!
//! One explicit-Euler step advances position with the pre-step heading and
//! speed, turns the heading at `v / L * tan(steer)` and integrates
//! acceleration into speed. All four updates read the pre-step state.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trackgeom::wrap_angle;

#[derive(Debug, Error, PartialEq)]
pub enum VehicleError {
    #[error("input {index}: accel {accel} outside [{min}, {max}]")]
    AccelOutOfBounds { index: usize, accel: f64, min: f64, max: f64 },
    #[error("input {index}: steer {steer} outside [{min}, {max}]")]
    SteerOutOfBounds { index: usize, steer: f64, min: f64, max: f64 },
    #[error("invalid vehicle spec: {0}")]
    InvalidSpec(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    pub x: f64,
    pub y: f64,
    /// Heading in (-pi, pi].
    pub yaw: f64,
    pub v: f64,
}

impl VehicleState {
    pub fn new(x: f64, y: f64, yaw: f64, v: f64) -> Self {
        VehicleState { x, y, yaw: wrap_angle(yaw), v }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ControlInput {
    /// m/s^2
    pub accel: f64,
    /// rad
    pub steer: f64,
}

impl ControlInput {
    pub const ZERO: ControlInput = ControlInput { accel: 0.0, steer: 0.0 };

    pub fn new(accel: f64, steer: f64) -> Self {
        ControlInput { accel, steer }
    }
}

/// A horizon's worth of inputs.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ControlSequence(pub Vec<ControlInput>);

impl ControlSequence {
    pub fn zeros(horizon: usize) -> Self {
        ControlSequence(vec![ControlInput::ZERO; horizon])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn inputs(&self) -> &[ControlInput] {
        &self.0
    }

    pub fn first(&self) -> Option<ControlInput> {
        self.0.first().copied()
    }

    /// Interleaved `[a0, s0, a1, s1, ...]`.
    pub fn to_flat(&self) -> Vec<f64> {
        self.0.iter().flat_map(|u| [u.accel, u.steer]).collect()
    }

    pub fn from_flat(flat: &[f64]) -> Self {
        ControlSequence(flat.chunks_exact(2).map(|c| ControlInput::new(c[0], c[1])).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleSpec {
    pub wheelbase: f64,
    pub dt: f64,
    pub accel_min: f64,
    pub accel_max: f64,
    pub steer_min: f64,
    pub steer_max: f64,
}

impl Default for VehicleSpec {
    /// Ford Mustang wheelbase, 50 Hz control, passenger-car input limits.
    fn default() -> Self {
        VehicleSpec { wheelbase: 2.89, dt: 0.02, accel_min: -5.0, accel_max: 5.0, steer_min: -0.52, steer_max: 0.52 }
    }
}

impl VehicleSpec {
    pub fn validate(&self) -> Result<(), VehicleError> {
        let ok = self.wheelbase > 0.0
            && self.dt > 0.0
            && self.accel_min < self.accel_max
            && self.steer_min < self.steer_max
            && [self.wheelbase, self.dt, self.accel_min, self.accel_max, self.steer_min, self.steer_max]
                .iter()
                .all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(VehicleError::InvalidSpec(format!("{self:?}")))
        }
    }

    /// Per-dimension bounds of the interleaved decision vector.
    pub fn input_bounds(&self, horizon: usize) -> Vec<(f64, f64)> {
        (0..horizon).flat_map(|_| [(self.accel_min, self.accel_max), (self.steer_min, self.steer_max)]).collect()
    }

    pub fn clamp(&self, u: ControlInput) -> ControlInput {
        ControlInput {
            accel: u.accel.clamp(self.accel_min, self.accel_max),
            steer: u.steer.clamp(self.steer_min, self.steer_max),
        }
    }

    fn check(&self, index: usize, u: ControlInput) -> Result<(), VehicleError> {
        if !(u.accel >= self.accel_min && u.accel <= self.accel_max) {
            return Err(VehicleError::AccelOutOfBounds {
                index,
                accel: u.accel,
                min: self.accel_min,
                max: self.accel_max,
            });
        }
        if !(u.steer >= self.steer_min && u.steer <= self.steer_max) {
            return Err(VehicleError::SteerOutOfBounds {
                index,
                steer: u.steer,
                min: self.steer_min,
                max: self.steer_max,
            });
        }
        Ok(())
    }
}

/// Advances the state by one `dt`.
pub fn step(state: &VehicleState, input: ControlInput, spec: &VehicleSpec) -> Result<VehicleState, VehicleError> {
    spec.check(0, input)?;
    Ok(step_unchecked(state, input, spec))
}

#[inline]
pub(crate) fn step_unchecked(s: &VehicleState, u: ControlInput, spec: &VehicleSpec) -> VehicleState {
    let (sin, cos) = s.yaw.sin_cos();
    VehicleState {
        x: s.x + s.v * cos * spec.dt,
        y: s.y + s.v * sin * spec.dt,
        yaw: wrap_angle(s.yaw + s.v / spec.wheelbase * u.steer.tan() * spec.dt),
        v: s.v + u.accel * spec.dt,
    }
}

/// States visited by applying `seq` from `state`; `H + 1` entries.
pub fn rollout(
    state: &VehicleState,
    seq: &ControlSequence,
    spec: &VehicleSpec,
) -> Result<Vec<VehicleState>, VehicleError> {
    for (i, u) in seq.inputs().iter().enumerate() {
        spec.check(i, *u)?;
    }
    let mut out = Vec::with_capacity(seq.len() + 1);
    rollout_into(state, seq.inputs(), spec, &mut out);
    Ok(out)
}

pub(crate) fn rollout_into(
    state: &VehicleState,
    inputs: &[ControlInput],
    spec: &VehicleSpec,
    out: &mut Vec<VehicleState>,
) {
    out.clear();
    out.push(*state);
    let mut s = *state;
    for u in inputs {
        s = step_unchecked(&s, *u, spec);
        out.push(s);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn straight_line_step() {
        let s = VehicleState::new(0.0, 0.0, 0.0, 10.0);
        let n = step(&s, ControlInput::ZERO, &VehicleSpec::default()).unwrap();
        assert_abs_diff_eq!(n.x, 0.2, epsilon = 1e-15);
        assert_eq!(n.y, 0.0);
        assert_eq!(n.yaw, 0.0);
        assert_eq!(n.v, 10.0);
    }

    #[test]
    fn steering_step_matches_hand_value() {
        let s = VehicleState::new(0.0, 0.0, 0.0, 10.0);
        let n = step(&s, ControlInput::new(0.0, 0.1), &VehicleSpec::default()).unwrap();
        assert_abs_diff_eq!(n.yaw, 0.006_943_6, epsilon = 1e-7);
        assert_abs_diff_eq!(n.x, 0.2, epsilon = 1e-15);
        assert_eq!(n.v, 10.0);
    }

    #[test]
    fn acceleration_step() {
        let s = VehicleState::new(0.0, 0.0, 0.0, 10.0);
        let n = step(&s, ControlInput::new(5.0, 0.0), &VehicleSpec::default()).unwrap();
        assert_abs_diff_eq!(n.v, 10.1, epsilon = 1e-12);
    }

    #[test]
    fn out_of_bounds_input_rejected() {
        let s = VehicleState::new(0.0, 0.0, 0.0, 10.0);
        let spec = VehicleSpec::default();
        assert!(matches!(step(&s, ControlInput::new(0.0, 0.6), &spec), Err(VehicleError::SteerOutOfBounds { .. })));
        assert!(matches!(step(&s, ControlInput::new(-5.1, 0.0), &spec), Err(VehicleError::AccelOutOfBounds { .. })));
    }

    #[test]
    fn rollout_examples() {
        let spec = VehicleSpec::default();
        let s = VehicleState::new(0.0, 0.0, 0.0, 10.0);
        let traj = rollout(&s, &ControlSequence::zeros(2), &spec).unwrap();
        let xs: Vec<f64> = traj.iter().map(|t| t.x).collect();
        assert_abs_diff_eq!(xs[1], 0.2, epsilon = 1e-15);
        assert_abs_diff_eq!(xs[2], 0.4, epsilon = 1e-15);
        assert_eq!(rollout(&s, &ControlSequence::default(), &spec).unwrap(), vec![s]);

        let seq = ControlSequence(vec![ControlInput::new(1.0, -0.2), ControlInput::new(0.0, 0.3)]);
        let traj = rollout(&s, &seq, &spec).unwrap();
        assert_eq!(traj[1], step(&s, seq.0[0], &spec).unwrap());
    }

    #[test]
    fn rollout_reports_offending_index() {
        let spec = VehicleSpec::default();
        let s = VehicleState::new(0.0, 0.0, 0.0, 10.0);
        let seq = ControlSequence(vec![ControlInput::ZERO, ControlInput::new(9.0, 0.0)]);
        assert!(matches!(rollout(&s, &seq, &spec), Err(VehicleError::AccelOutOfBounds { index: 1, .. })));
    }

    #[test]
    fn flat_layout_is_interleaved() {
        let seq = ControlSequence(vec![ControlInput::new(1.0, 2.0), ControlInput::new(3.0, 4.0)]);
        assert_eq!(seq.to_flat(), vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(ControlSequence::from_flat(&seq.to_flat()), seq);
    }

    #[test]
    fn spec_validation() {
        assert!(VehicleSpec::default().validate().is_ok());
        let bad = VehicleSpec { wheelbase: 0.0, ..VehicleSpec::default() };
        assert!(bad.validate().is_err());
    }
}
