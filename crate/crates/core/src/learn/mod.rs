//! Phase 1: expert demonstrations and behavior cloning. Phase 2: online
//! fine-tuning with PPO against a value baseline plus an imitation term
//! towards the fast MPC's own solutions.

mod demos;
mod ppo;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bench::{start_state, Episode};
use crate::mpc::{self, Controller, MpcConfig, MpcError, MpcSolution, WarmStartSource};
use crate::policy::{
    adam_update, decode_action, encode_action, fit_normalization, gradients, observe, Adam, LossKind, MlpParams,
    PolicyError, PolicySample, LOOKAHEAD,
};
use crate::trackgeom::Track;
use crate::vehicle::{ControlInput, VehicleState};

pub use demos::{load_demos, load_demos_file, save_demos, save_demos_file, DEMO_FORMAT_VERSION};
pub use ppo::{
    combined_loss, compute_reward, finetune, gae_advantages, ppo_losses, Advantages, BatchMetrics, FinetuneConfig,
    FinetuneOutcome, PpoLosses, RolloutBuffer, TimeMode, Transition, METRICS_HEADER,
};

#[derive(Debug, Error)]
pub enum LearnError {
    #[error("expert left the track on {off_track} of {attempted} steps; refusing to clone it")]
    IncompetentExpert { off_track: usize, attempted: usize },
    #[error("non-finite {what} at epoch {epoch}")]
    NonFiniteLoss { what: &'static str, epoch: usize },
    #[error("training diverged: planned xte {level:.4} exceeded 5x the reference {reference:.4} on {count} consecutive batches")]
    Diverged { level: f64, reference: f64, count: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("no demonstrations")]
    Empty,
    #[error("malformed demonstration file: {0}")]
    Format(String),
    #[error(transparent)]
    Mpc(#[from] MpcError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// An observation with the expert's normalized plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Demonstration {
    pub obs: Vec<f64>,
    pub target: Vec<f64>,
}

/// How demonstration episodes start and how the expert is warm-started.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CollectConfig {
    pub seed: u64,
    /// Guess for each expert solve after the first of an episode.
    pub warm_start: WarmStartSource,
    /// Extra expert solves at the start state of each episode, each seeded
    /// with the previous result, before anything is recorded.
    pub warmup_solves: usize,
    /// Episode length cap; episodes also end on lap completion or off-track.
    pub max_episode_steps: usize,
    /// Start anywhere along the lap instead of at waypoint 0.
    pub random_start: bool,
    /// Uniform start perturbations: lateral offset (m), yaw (rad), speed (m/s).
    pub lateral_noise: f64,
    pub yaw_noise: f64,
    pub speed_noise: f64,
}

impl Default for CollectConfig {
    fn default() -> Self {
        CollectConfig {
            seed: 0,
            warm_start: WarmStartSource::PreviousShifted,
            warmup_solves: 4,
            max_episode_steps: 250,
            random_start: true,
            lateral_noise: 0.3,
            yaw_noise: 0.08,
            speed_noise: 0.5,
        }
    }
}

impl CollectConfig {
    /// The plain closed loop: waypoint 0, no noise, zero guess every step.
    pub fn unperturbed() -> Self {
        CollectConfig {
            warm_start: WarmStartSource::Zeros,
            warmup_solves: 0,
            max_episode_steps: usize::MAX,
            random_start: false,
            lateral_noise: 0.0,
            yaw_noise: 0.0,
            speed_noise: 0.0,
            ..Self::default()
        }
    }
}

/// Start anywhere along the lap when `random_start`, then perturb laterally,
/// in yaw and in speed by uniform draws of at most `noise`.
pub(crate) fn perturbed_start(
    track: &Track,
    v_ref: f64,
    random_start: bool,
    noise: [f64; 3],
    rng: &mut ChaCha8Rng,
) -> VehicleState {
    let base = start_state(track, v_ref);
    let i = if random_start { rng.random_range(0..track.len()) } else { 0 };
    let w = track.waypoints()[i];
    let heading = track.segment_heading(i);
    let mut jitter = |scale: f64| if scale > 0.0 { rng.random_range(-scale..=scale) } else { 0.0 };
    let (lat, dyaw, dv) = (jitter(noise[0]), jitter(noise[1]), jitter(noise[2]));
    let (s, c) = heading.sin_cos();
    VehicleState::new(w.x - s * lat, w.y + c * lat, heading + dyaw, base.v + dv)
}

/// Runs the expert in closed loop and records `n` (observation, plan) pairs.
///
/// Tracks are visited round-robin, one episode each. Only the first input of
/// each plan is applied.
pub fn collect_demos(
    tracks: &[Track],
    expert: &MpcConfig,
    n: usize,
    cfg: &CollectConfig,
) -> Result<Vec<Demonstration>, LearnError> {
    collect(tracks, expert, n, cfg, None)
}

/// A policy-warm-started controller that drives while the expert labels.
#[derive(Debug, Clone, Copy)]
pub struct Learner<'a> {
    pub policy: &'a MlpParams,
    pub controller: &'a MpcConfig,
}

/// Dataset aggregation: the learner's controller drives and the expert
/// labels every visited state, so the demonstrations cover the states the
/// learner actually reaches.
pub fn aggregate_demos(
    tracks: &[Track],
    expert: &MpcConfig,
    learner: Learner<'_>,
    n: usize,
    cfg: &CollectConfig,
) -> Result<Vec<Demonstration>, LearnError> {
    collect(tracks, expert, n, cfg, Some(learner))
}

fn collect(
    tracks: &[Track],
    expert: &MpcConfig,
    n: usize,
    cfg: &CollectConfig,
    learner: Option<Learner<'_>>,
) -> Result<Vec<Demonstration>, LearnError> {
    if n == 0 || tracks.is_empty() {
        return Err(LearnError::InvalidConfig("need n >= 1 and at least one track".into()));
    }
    expert.validate()?;
    let spec = expert.vehicle;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut driver = match learner {
        Some(l) => Some((l.policy, Controller::new(*l.controller)?)),
        None => None,
    };
    let mut out = Vec::with_capacity(n);
    let (mut attempted, mut off_track) = (0usize, 0usize);
    let mut episode_index = 0;
    while out.len() < n {
        let track = &tracks[episode_index % tracks.len()];
        episode_index += 1;
        let noise = [cfg.lateral_noise, cfg.yaw_noise, cfg.speed_noise];
        let start = perturbed_start(track, expert.v_ref, cfg.random_start, noise, &mut rng);
        let mut episode = Episode::new(track, start, cfg.max_episode_steps);
        let mut settled = warm_up(expert, track, &start, cfg.warmup_solves)?;
        let mut previous: Option<MpcSolution> = None;
        let mut applied = ControlInput::ZERO;
        if let Some((_, c)) = driver.as_mut() {
            c.reset();
        }
        while out.len() < n {
            let s = *episode.state();
            let obs = observe(track, &s, LOOKAHEAD).to_vec();
            let (source, guess) = match (settled.take(), &previous) {
                (Some(g), _) => (WarmStartSource::Policy, Some(g)),
                (None, None) if cfg.warm_start == WarmStartSource::PreviousShifted => (WarmStartSource::Zeros, None),
                (None, _) => (cfg.warm_start, None),
            };
            let sol = mpc::solve(track, &s, applied, expert, source, guess.as_ref(), previous.as_ref())?;
            out.push(Demonstration { obs: obs.clone(), target: encode_action(&sol.sequence, &spec) });
            applied = match driver.as_mut() {
                None => sol.sequence.first().unwrap_or(ControlInput::ZERO),
                Some((policy, c)) => {
                    let g = decode_action(&policy.forward(&obs)?, &c.config().vehicle);
                    let own = c.solve(track, &s, WarmStartSource::Policy, Some(&g))?;
                    own.sequence.first().unwrap_or(ControlInput::ZERO)
                }
            };
            previous = Some(sol);
            let step = episode.step(applied, &spec);
            attempted += 1;
            if step.off_track {
                off_track += 1;
            }
            if step.done() {
                break;
            }
        }
        log::debug!("demo episode {episode_index}: {} records so far", out.len());
    }
    if learner.is_none() && 2 * off_track > attempted {
        return Err(LearnError::IncompetentExpert { off_track, attempted });
    }
    Ok(out)
}

/// Re-solves at a fixed state, each time from the previous plan, so the
/// first recorded solve of an episode starts from a settled guess.
fn warm_up(
    config: &MpcConfig,
    track: &Track,
    state: &VehicleState,
    solves: usize,
) -> Result<Option<crate::vehicle::ControlSequence>, MpcError> {
    if solves == 0 {
        return Ok(None);
    }
    let config = *config;
    let mut prev: Option<MpcSolution> = None;
    for _ in 0..solves {
        let sol = match &prev {
            None => mpc::solve(track, state, ControlInput::ZERO, &config, WarmStartSource::Zeros, None, None)?,
            Some(p) => {
                mpc::solve(track, state, ControlInput::ZERO, &config, WarmStartSource::Policy, Some(&p.sequence), None)?
            }
        };
        prev = Some(sol);
    }
    Ok(prev.map(|p| p.sequence))
}

/// Fits the policy's input normalization to the demonstration observations.
pub fn normalize_inputs(policy: &mut MlpParams, demos: &[Demonstration]) -> Result<(), LearnError> {
    if demos.is_empty() {
        return Err(LearnError::Empty);
    }
    let rows: Vec<&[f64]> = demos.iter().map(|d| d.obs.as_slice()).collect();
    let (shift, scale) = fit_normalization(&rows);
    policy.set_input_normalization(shift, scale)?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BcConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Learning rate reached by the last epoch (geometric decay); `None` keeps it constant.
    pub final_learning_rate: Option<f64>,
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for BcConfig {
    fn default() -> Self {
        BcConfig {
            epochs: 200,
            batch_size: 64,
            learning_rate: 1e-3,
            final_learning_rate: Some(5e-5),
            validation_fraction: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossHistory {
    pub train: Vec<f64>,
    /// Empty entries are NaN-free: with no validation split the train loss is repeated.
    pub validation: Vec<f64>,
}

fn as_samples(demos: &[Demonstration], idx: &[usize]) -> Vec<PolicySample> {
    idx.iter()
        .map(|&i| PolicySample { obs: demos[i].obs.clone(), target: demos[i].target.clone(), ..Default::default() })
        .collect()
}

fn mean_mse(policy: &MlpParams, samples: &[PolicySample]) -> Result<f64, PolicyError> {
    let mut total = 0.0;
    for chunk in samples.chunks(256) {
        let (l, _) = gradients(policy, chunk, LossKind::Mse)?;
        total += l * chunk.len() as f64;
    }
    Ok(total / samples.len() as f64)
}

/// Minimises the mean squared error between the policy mean and the expert
/// plans over shuffled minibatches with Adam.
pub fn train_bc(
    policy: &MlpParams,
    demos: &[Demonstration],
    cfg: &BcConfig,
) -> Result<(MlpParams, LossHistory), LearnError> {
    if demos.is_empty() {
        return Err(LearnError::Empty);
    }
    if cfg.batch_size == 0 || !(0.0..1.0).contains(&cfg.validation_fraction) {
        return Err(LearnError::InvalidConfig("batch_size >= 1 and validation_fraction in [0, 1)".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..demos.len()).collect();
    order.shuffle(&mut rng);
    let n_val = ((demos.len() as f64) * cfg.validation_fraction).floor() as usize;
    let n_val = n_val.min(demos.len() - 1);
    let (train_idx, val_idx) = order.split_at(demos.len() - n_val);
    let mut train_idx = train_idx.to_vec();
    let val = as_samples(demos, val_idx);

    let mut params = policy.clone();
    let mut adam = Adam::new(params.num_params());
    let mut history = LossHistory::default();
    let decay = match cfg.final_learning_rate {
        Some(lr_end) if cfg.epochs > 1 => (lr_end / cfg.learning_rate).powf(1.0 / (cfg.epochs - 1) as f64),
        _ => 1.0,
    };
    let mut lr = cfg.learning_rate;
    for epoch in 0..cfg.epochs {
        train_idx.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in train_idx.chunks(cfg.batch_size) {
            let samples = as_samples(demos, batch);
            let (loss, grad) = gradients(&params, &samples, LossKind::Mse)?;
            if !loss.is_finite() {
                return Err(LearnError::NonFiniteLoss { what: "training loss", epoch });
            }
            epoch_loss += loss * batch.len() as f64;
            if loss > 0.0 {
                adam_update(&mut params, &grad, &mut adam, lr)?;
            }
        }
        let train_loss = epoch_loss / train_idx.len() as f64;
        let val_loss = if val.is_empty() { train_loss } else { mean_mse(&params, &val)? };
        if !val_loss.is_finite() {
            return Err(LearnError::NonFiniteLoss { what: "validation loss", epoch });
        }
        log::info!("bc epoch {epoch}: train {train_loss:.3e} validation {val_loss:.3e} lr {lr:.2e}");
        history.train.push(train_loss);
        history.validation.push(val_loss);
        lr *= decay;
    }
    Ok((params, history))
}
