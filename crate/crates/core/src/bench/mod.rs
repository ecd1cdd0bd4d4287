//! Closed-loop evaluation: episodes under each warm-start source, the two
//! headline metrics (solver effort and tracking error per step), comparison
//! reports and the curvature-versus-xte scatter.

pub mod cli;
pub mod config;
mod report;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::learn::LearnError;
use crate::mpc::{Controller, MpcConfig, MpcError, WarmStartSource};
use crate::policy::{decode_action, observe, MlpParams, PolicyError, LOOKAHEAD};
use crate::trackgeom::{Track, TrackError};
use crate::vehicle::{self, ControlInput, VehicleState};

pub use report::{
    compare, curvature_vs_xte, write_scatter, ExperimentPlan, Improvement, Report, ReportRow, ScatterRecord,
    TrackEntry, TrackSet, VariantEntry, REPORT_HEADER,
};

pub const DEFAULT_MAX_STEPS: usize = 5000;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("warm start {0:?} needs a policy")]
    MissingPolicy(WarmStartSource),
    #[error("variant {variant}: cannot load checkpoint {path}: {source}")]
    Checkpoint {
        variant: String,
        path: String,
        #[source]
        source: PolicyError,
    },
    #[error("invalid experiment plan: {0}")]
    InvalidPlan(String),
    #[error(transparent)]
    Learn(#[from] LearnError),
    #[error(transparent)]
    Mpc(#[from] MpcError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Track(#[from] TrackError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// The vehicle at waypoint 0, heading along the path.
pub fn start_state(track: &Track, v: f64) -> VehicleState {
    let w = track.waypoints()[0];
    VehicleState::new(w.x, w.y, track.segment_heading(0), v)
}

/// What one simulated step did.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub xte: f64,
    pub off_track: bool,
    pub lap_completed: bool,
    pub truncated: bool,
}

impl StepOutcome {
    pub fn done(&self) -> bool {
        self.off_track || self.lap_completed || self.truncated
    }
}

/// Plant simulation with lap bookkeeping and off-track detection.
#[derive(Debug, Clone)]
pub struct Episode<'a> {
    track: &'a Track,
    state: VehicleState,
    progress: usize,
    steps: usize,
    max_steps: usize,
}

impl<'a> Episode<'a> {
    pub fn new(track: &'a Track, state: VehicleState, max_steps: usize) -> Self {
        Episode { track, progress: track.nearest_waypoint_index(state.x, state.y), state, steps: 0, max_steps }
    }

    pub fn state(&self) -> &VehicleState {
        &self.state
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn track(&self) -> &'a Track {
        self.track
    }

    /// Applies `input` (clamped to the vehicle bounds) for one `dt`.
    pub fn step(&mut self, input: ControlInput, spec: &vehicle::VehicleSpec) -> StepOutcome {
        let u = spec.clamp(input);
        self.state = vehicle::step(&self.state, u, spec).expect("input clamped to bounds");
        self.steps += 1;
        let p = self.track.project(self.state.x, self.state.y);
        let half_width = self.track.waypoints()[p.nearest_index].min_half_width();
        let lap = self.track.lap_progress(self.state.x, self.state.y, self.progress);
        self.progress = lap.index;
        let off_track = p.distance > half_width;
        StepOutcome {
            xte: p.distance,
            off_track,
            lap_completed: lap.lap_completed && !off_track,
            truncated: self.steps >= self.max_steps,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub completed_lap: bool,
    pub steps: usize,
    pub mean_iterations: f64,
    pub mean_solve_time: f64,
    pub mean_xte: f64,
    pub max_xte: f64,
    pub off_track_step: Option<usize>,
}

/// One executed step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub x: f64,
    pub y: f64,
    pub v: f64,
    pub iterations: usize,
    pub solve_time: f64,
    pub early_stopped: bool,
    pub planned_xte_sum: f64,
    /// Distance to the path after the step.
    pub xte: f64,
    /// Curvature score at the vehicle before the step.
    pub curvature: f64,
}

/// Runs from the track start until lap completion, off-track or `max_steps`.
///
/// The policy guess is the deterministic mean, so `seed` only labels the run.
pub fn run_episode(
    track: &Track,
    config: &MpcConfig,
    warm_start: WarmStartSource,
    policy: Option<&MlpParams>,
    _seed: u64,
    max_steps: usize,
) -> Result<(EpisodeMetrics, Vec<StepRecord>), BenchError> {
    if warm_start == WarmStartSource::Policy && policy.is_none() {
        return Err(BenchError::MissingPolicy(warm_start));
    }
    let mut controller = Controller::new(*config)?;
    let mut episode = Episode::new(track, start_state(track, config.v_ref), max_steps);
    let mut trace = Vec::new();
    let mut off_track_step = None;
    let mut completed_lap = false;
    loop {
        let s = *episode.state();
        let curvature = track.local_curvature(s.x, s.y)?;
        let guess = match (warm_start, policy) {
            (WarmStartSource::Policy, Some(p)) => {
                let obs = observe(track, &s, LOOKAHEAD).to_vec();
                Some(decode_action(&p.forward(&obs)?, &config.vehicle))
            }
            _ => None,
        };
        let sol = controller.solve(track, &s, warm_start, guess.as_ref())?;
        let u = sol.sequence.first().unwrap_or(ControlInput::ZERO);
        let out = episode.step(u, &config.vehicle);
        let after = episode.state();
        trace.push(StepRecord {
            step: episode.steps() - 1,
            x: after.x,
            y: after.y,
            v: after.v,
            iterations: sol.iterations_used,
            solve_time: sol.solve_time,
            early_stopped: sol.early_stopped,
            planned_xte_sum: sol.planned_xte_sum,
            xte: out.xte,
            curvature,
        });
        if out.off_track {
            off_track_step = Some(episode.steps() - 1);
            break;
        }
        if out.lap_completed {
            completed_lap = true;
            break;
        }
        if out.truncated {
            break;
        }
    }
    Ok((metrics_from_trace(&trace, completed_lap, off_track_step), trace))
}

pub fn metrics_from_trace(trace: &[StepRecord], completed_lap: bool, off_track_step: Option<usize>) -> EpisodeMetrics {
    let n = trace.len().max(1) as f64;
    EpisodeMetrics {
        completed_lap,
        steps: trace.len(),
        mean_iterations: trace.iter().map(|r| r.iterations as f64).sum::<f64>() / n,
        mean_solve_time: trace.iter().map(|r| r.solve_time).sum::<f64>() / n,
        mean_xte: trace.iter().map(|r| r.xte).sum::<f64>() / n,
        max_xte: trace.iter().map(|r| r.xte).fold(0.0, f64::max),
        off_track_step,
    }
}
