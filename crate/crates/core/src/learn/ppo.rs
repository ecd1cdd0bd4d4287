//! Online fine-tuning: rollouts through the fast MPC, generalized advantage
//! estimation, and clipped PPO updates mixed with the imitation term.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{perturbed_start, LearnError};
use crate::bench::Episode;
use crate::mpc::{Controller, MpcConfig, MpcSolution, WarmStartSource};
use crate::policy::{
    adam_update, decode_action, encode_action, gaussian_entropy, observe, policy_loss_gradients, sample_action,
    value_loss_gradients, Adam, MlpParams, PolicyError, PolicyLossWeights, PolicySample, LOOKAHEAD,
};
use crate::trackgeom::Track;
use crate::vehicle::{ControlInput, VehicleState};

/// Source of the reward's time term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeMode {
    /// `iterations_used * t_iter_nominal`; deterministic.
    IterationsProxy,
    /// Measured solver wall time.
    WallClock,
}

/// Worst-case real-time budget spread over the 50-iteration cap.
pub const T_ITER_NOMINAL: f64 = 0.08 / 50.0;

/// Negative solve time minus the plan's accumulated xte.
pub fn compute_reward(solution: &MpcSolution, mode: TimeMode, t_iter_nominal: f64) -> f64 {
    let time = match mode {
        TimeMode::IterationsProxy => solution.iterations_used as f64 * t_iter_nominal,
        TimeMode::WallClock => solution.solve_time,
    };
    -time - solution.planned_xte_sum
}

/// One environment step as seen by the learner.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub obs: Vec<f64>,
    /// The raw Gaussian draw (before clamping).
    pub action: Vec<f64>,
    pub log_prob: f64,
    pub reward: f64,
    pub value: f64,
    /// Normalized fast-MPC solution.
    pub target: Vec<f64>,
    /// The episode ended after this step.
    pub done: bool,
    /// Value of the state after this step, used when `done` or when this is
    /// the last step of the buffer; 0 marks a true terminal.
    pub bootstrap: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RolloutBuffer {
    pub steps: Vec<Transition>,
}

impl RolloutBuffer {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Advantages {
    pub raw: Vec<f64>,
    /// `raw` shifted and scaled to zero mean and unit variance.
    pub normalized: Vec<f64>,
    /// `raw + value`.
    pub returns: Vec<f64>,
}

/// Generalized advantage estimation, reset at episode boundaries.
pub fn gae_advantages(buffer: &RolloutBuffer, gamma: f64, gae_lambda: f64) -> Advantages {
    let steps = &buffer.steps;
    let n = steps.len();
    let mut raw = vec![0.0; n];
    let mut next_adv = 0.0;
    for t in (0..n).rev() {
        let s = &steps[t];
        let cut = s.done || t + 1 == n;
        let next_value = if cut { s.bootstrap } else { steps[t + 1].value };
        if cut {
            next_adv = 0.0;
        }
        let delta = s.reward + gamma * next_value - s.value;
        raw[t] = delta + gamma * gae_lambda * next_adv;
        next_adv = raw[t];
    }
    let returns = raw.iter().zip(steps).map(|(a, s)| a + s.value).collect();
    let mean = raw.iter().sum::<f64>() / n.max(1) as f64;
    let var = raw.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n.max(1) as f64;
    let sd = var.sqrt();
    let normalized = raw.iter().map(|a| if sd > 1e-12 { (a - mean) / sd } else { a - mean }).collect();
    Advantages { raw, normalized, returns }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PpoLosses {
    /// Negated clipped surrogate.
    pub policy: f64,
    /// Negated Gaussian entropy.
    pub entropy: f64,
    /// Mean squared error of the value net against the returns.
    pub value: f64,
}

/// The three PPO terms on a minibatch; `returns[i]` pairs with `batch[i]`.
pub fn ppo_losses(
    policy: &MlpParams,
    value_net: &MlpParams,
    batch: &[PolicySample],
    returns: &[f64],
    clip: f64,
) -> Result<PpoLosses, LearnError> {
    if batch.len() != returns.len() {
        return Err(LearnError::InvalidConfig("batch and returns differ in length".into()));
    }
    let mut scratch = vec![0.0; policy.num_params()];
    let w = PolicyLossWeights { policy: 1.0, entropy: 0.0, imitation: 0.0, clip };
    let p = policy_loss_gradients(policy, batch, w, &mut scratch)?;
    let entropy = -gaussian_entropy(policy.log_std().ok_or_else(|| PolicyError::Shape("no log_std head".into()))?);
    let value_batch: Vec<PolicySample> = batch
        .iter()
        .zip(returns)
        .map(|(s, r)| PolicySample { obs: s.obs.clone(), target: vec![*r], ..Default::default() })
        .collect();
    let mut vs = vec![0.0; value_net.num_params()];
    let value = value_loss_gradients(value_net, &value_batch, 1.0, &mut vs)?;
    Ok(PpoLosses { policy: p.policy, entropy, value })
}

/// `lambda * rl + (1 - lambda) * imitation`.
pub fn combined_loss(rl: f64, imitation: f64, lambda: f64) -> f64 {
    lambda * rl + (1.0 - lambda) * imitation
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    /// Weight of the RL loss against the imitation loss.
    pub lambda: f64,
    pub lambda_policy: f64,
    pub lambda_entropy: f64,
    pub lambda_value: f64,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip: f64,
    pub epochs: usize,
    pub minibatch_size: usize,
    pub steps_per_batch: usize,
    pub learning_rate: f64,
    pub time_mode: TimeMode,
    pub t_iter_nominal: f64,
    pub max_episode_steps: usize,
    /// Overrides the policy's `log_std` before the first rollout.
    pub log_std_init: Option<f64>,
    /// Batches at the start that train only the value net, so the first
    /// policy updates see a fitted baseline.
    pub value_warmup_batches: usize,
    /// Decay the learning rate linearly to zero over the policy-update batches.
    pub anneal_learning_rate: bool,
    /// Episode starts, as in demonstration collection: anywhere along the lap
    /// and perturbed by uniform lateral (m), yaw (rad) and speed (m/s) draws.
    pub random_start: bool,
    pub lateral_noise: f64,
    pub yaw_noise: f64,
    pub speed_noise: f64,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            lambda: 0.5,
            lambda_policy: 0.5,
            lambda_entropy: 0.0,
            lambda_value: 0.5,
            gamma: 0.9,
            gae_lambda: 0.95,
            clip: 0.2,
            epochs: 10,
            minibatch_size: 64,
            steps_per_batch: 2048,
            learning_rate: 1e-5,
            time_mode: TimeMode::IterationsProxy,
            t_iter_nominal: T_ITER_NOMINAL,
            max_episode_steps: 5000,
            log_std_init: Some(-4.0),
            value_warmup_batches: 5,
            anneal_learning_rate: true,
            random_start: true,
            lateral_noise: 0.3,
            yaw_noise: 0.08,
            speed_noise: 0.5,
            seed: 0,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<(), LearnError> {
        let ok = (0.0..=1.0).contains(&self.lambda)
            && self.gamma > 0.0
            && self.gamma < 1.0
            && (0.0..=1.0).contains(&self.gae_lambda)
            && self.clip > 0.0
            && self.epochs >= 1
            && self.minibatch_size >= 1
            && self.steps_per_batch >= 1
            && self.learning_rate >= 0.0
            && self.max_episode_steps >= 1;
        if ok {
            Ok(())
        } else {
            Err(LearnError::InvalidConfig(format!("{self:?}")))
        }
    }
}

pub const METRICS_HEADER: &str = "batch,mean_reward,mean_iterations,mean_xte,L_policy,L_value,L_imitation";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchMetrics {
    pub batch: usize,
    pub mean_reward: f64,
    pub mean_iterations: f64,
    /// Mean distance to the path after each executed step.
    pub mean_xte: f64,
    pub l_policy: f64,
    pub l_value: f64,
    pub l_imitation: f64,
    /// Mean planned xte of the fast-MPC solutions; drives the divergence guard.
    pub mean_planned_xte: f64,
    pub learning_rate: f64,
}

impl BatchMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.batch,
            self.mean_reward,
            self.mean_iterations,
            self.mean_xte,
            self.l_policy,
            self.l_value,
            self.l_imitation
        )
    }

    pub fn write_csv<W: Write>(rows: &[BatchMetrics], mut sink: W) -> std::io::Result<()> {
        writeln!(sink, "{METRICS_HEADER}")?;
        for r in rows {
            writeln!(sink, "{}", r.csv_row())?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub policy: MlpParams,
    pub value_net: MlpParams,
    pub log: Vec<BatchMetrics>,
}

struct Rollout<'a> {
    tracks: &'a [Track],
    next_track: usize,
    episode: Episode<'a>,
    controller: Controller,
    v_ref: f64,
    cfg: FinetuneConfig,
    // Separate from the sampling stream so start states do not depend on
    // how many actions were drawn.
    starts: ChaCha8Rng,
}

impl<'a> Rollout<'a> {
    fn new(tracks: &'a [Track], mpc: &MpcConfig, cfg: &FinetuneConfig) -> Result<Self, LearnError> {
        let mut starts = ChaCha8Rng::seed_from_u64(cfg.seed);
        starts.set_stream(1);
        let first = Self::start(&tracks[0], mpc.v_ref, cfg, &mut starts);
        Ok(Rollout {
            tracks,
            next_track: 1,
            episode: Episode::new(&tracks[0], first, cfg.max_episode_steps),
            controller: Controller::new(*mpc)?,
            v_ref: mpc.v_ref,
            cfg: *cfg,
            starts,
        })
    }

    fn start(track: &Track, v_ref: f64, cfg: &FinetuneConfig, rng: &mut ChaCha8Rng) -> VehicleState {
        let noise = [cfg.lateral_noise, cfg.yaw_noise, cfg.speed_noise];
        perturbed_start(track, v_ref, cfg.random_start, noise, rng)
    }

    fn restart(&mut self) {
        let track = &self.tracks[self.next_track % self.tracks.len()];
        self.next_track += 1;
        let s = Self::start(track, self.v_ref, &self.cfg, &mut self.starts);
        self.episode = Episode::new(track, s, self.cfg.max_episode_steps);
        self.controller.reset();
    }

    fn obs(&self) -> Vec<f64> {
        observe(self.episode.track(), self.episode.state(), LOOKAHEAD).to_vec()
    }
}

#[derive(Default)]
struct Totals {
    reward: f64,
    iterations: f64,
    xte: f64,
    planned: f64,
}

/// Alternates rollouts of `steps_per_batch` steps with PPO epochs.
///
/// Each step samples a guess from the policy, lets the fast MPC solve from
/// it, applies the first input of that solution and stores the solution as
/// the imitation target. Only complete batches run, so
/// `total_steps / steps_per_batch` rows are logged.
pub fn finetune(
    policy: &MlpParams,
    value_net: &MlpParams,
    tracks: &[Track],
    mpc: &MpcConfig,
    cfg: &FinetuneConfig,
    total_steps: usize,
) -> Result<FinetuneOutcome, LearnError> {
    cfg.validate()?;
    if tracks.is_empty() {
        return Err(LearnError::InvalidConfig("no tracks".into()));
    }
    if policy.log_std().is_none() {
        return Err(PolicyError::Shape("policy needs a log_std head".into()).into());
    }
    let mut policy = policy.clone();
    if let Some(ls) = cfg.log_std_init {
        let n = policy.num_params();
        let k = policy.output_dim();
        for v in &mut policy.theta_mut()[n - k..] {
            *v = ls.clamp(crate::policy::mlp::LOG_STD_MIN, crate::policy::mlp::LOG_STD_MAX);
        }
    }
    let mut value_net = value_net.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam_p = Adam::new(policy.num_params());
    let mut adam_v = Adam::new(value_net.num_params());
    let mut lr = cfg.learning_rate;
    let weights = PolicyLossWeights {
        policy: cfg.lambda * cfg.lambda_policy,
        entropy: cfg.lambda * cfg.lambda_entropy,
        imitation: 1.0 - cfg.lambda,
        clip: cfg.clip,
    };
    let value_weight = cfg.lambda * cfg.lambda_value;
    let spec = mpc.vehicle;

    let mut env = Rollout::new(tracks, mpc, cfg)?;
    let mut log = Vec::new();
    let mut reference: Option<f64> = None;
    let mut strikes = 0;
    let batches = total_steps / cfg.steps_per_batch;
    for batch in 0..batches {
        let mut buffer = RolloutBuffer::default();
        let mut totals = Totals::default();
        for _ in 0..cfg.steps_per_batch {
            let state = *env.episode.state();
            let obs = env.obs();
            let out = sample_action(&policy, &obs, &mut rng)?;
            let guess = decode_action(&out.clamped_sample(), &spec);
            let value = value_net.forward(&obs)?[0];
            let sol = env.controller.solve(env.episode.track(), &state, WarmStartSource::Policy, Some(&guess))?;
            let reward = compute_reward(&sol, cfg.time_mode, cfg.t_iter_nominal);
            let step = env.episode.step(sol.sequence.first().unwrap_or(ControlInput::ZERO), &spec);
            totals.reward += reward;
            totals.iterations += sol.iterations_used as f64;
            totals.xte += step.xte;
            totals.planned += sol.planned_xte_sum;
            let done = step.done();
            let bootstrap = if done { value_net.forward(&env.obs())?[0] } else { 0.0 };
            buffer.steps.push(Transition {
                obs,
                action: out.sample,
                log_prob: out.log_prob,
                reward,
                value,
                target: encode_action(&sol.sequence, &spec),
                done,
                bootstrap,
            });
            if done {
                env.restart();
            }
        }
        if let Some(last) = buffer.steps.last_mut() {
            if !last.done {
                last.bootstrap = value_net.forward(&env.obs())?[0];
            }
        }

        let n = buffer.len() as f64;
        let mean_planned = totals.planned / n;
        let level = *reference.get_or_insert(mean_planned.max(1e-9));
        if mean_planned > 5.0 * level {
            strikes += 1;
            lr *= 0.5;
            log::warn!("batch {batch}: planned xte {mean_planned:.4} > 5x {level:.4}; learning rate now {lr:.2e}");
            if strikes >= 3 {
                return Err(LearnError::Diverged { level: mean_planned, reference: level, count: strikes });
            }
        } else {
            strikes = 0;
        }

        let adv = gae_advantages(&buffer, cfg.gamma, cfg.gae_lambda);
        let samples: Vec<PolicySample> = buffer
            .steps
            .iter()
            .zip(&adv.normalized)
            .map(|(t, a)| PolicySample {
                obs: t.obs.clone(),
                target: t.target.clone(),
                action: t.action.clone(),
                old_log_prob: t.log_prob,
                advantage: *a,
            })
            .collect();
        let value_samples: Vec<PolicySample> = buffer
            .steps
            .iter()
            .zip(&adv.returns)
            .map(|(t, r)| PolicySample { obs: t.obs.clone(), target: vec![*r], ..Default::default() })
            .collect();

        let policy_lr = if cfg.anneal_learning_rate && batch >= cfg.value_warmup_batches {
            let span = (batches - cfg.value_warmup_batches) as f64;
            lr * (1.0 - (batch - cfg.value_warmup_batches) as f64 / span)
        } else {
            lr
        };
        let mut idx: Vec<usize> = (0..samples.len()).collect();
        let (mut lp, mut lv, mut li, mut count) = (0.0, 0.0, 0.0, 0.0);
        for _ in 0..cfg.epochs {
            idx.shuffle(&mut rng);
            for mb in idx.chunks(cfg.minibatch_size) {
                let ps: Vec<PolicySample> = mb.iter().map(|&i| samples[i].clone()).collect();
                let vs: Vec<PolicySample> = mb.iter().map(|&i| value_samples[i].clone()).collect();
                let mut gp = vec![0.0; policy.num_params()];
                let mut gv = vec![0.0; value_net.num_params()];
                let losses = policy_loss_gradients(&policy, &ps, weights, &mut gp)?;
                // Terms with zero weight are still evaluated for the log.
                let imitation = if weights.imitation == 0.0 {
                    let mut scratch = vec![0.0; policy.num_params()];
                    policy_loss_gradients(&policy, &ps, PolicyLossWeights::mse(), &mut scratch)?.imitation
                } else {
                    losses.imitation
                };
                let policy_term = if weights.policy == 0.0 {
                    let mut scratch = vec![0.0; policy.num_params()];
                    let w = PolicyLossWeights { policy: 1.0, entropy: 0.0, imitation: 0.0, clip: cfg.clip };
                    policy_loss_gradients(&policy, &ps, w, &mut scratch)?.policy
                } else {
                    losses.policy
                };
                let value_loss = value_loss_gradients(&value_net, &vs, value_weight, &mut gv)?;
                lp += policy_term;
                li += imitation;
                lv += if value_weight > 0.0 { value_loss / value_weight } else { value_loss };
                count += 1.0;
                if lr > 0.0 {
                    if batch >= cfg.value_warmup_batches {
                        adam_update(&mut policy, &gp, &mut adam_p, policy_lr)?;
                    }
                    if value_weight > 0.0 {
                        adam_update(&mut value_net, &gv, &mut adam_v, lr)?;
                    }
                }
            }
        }
        let row = BatchMetrics {
            batch,
            mean_reward: totals.reward / n,
            mean_iterations: totals.iterations / n,
            mean_xte: totals.xte / n,
            l_policy: lp / count,
            l_value: lv / count,
            l_imitation: li / count,
            mean_planned_xte: mean_planned,
            learning_rate: policy_lr,
        };
        if ![row.l_policy, row.l_value, row.l_imitation].iter().all(|v| v.is_finite()) {
            return Err(LearnError::NonFiniteLoss { what: "fine-tuning loss", epoch: batch });
        }
        log::info!(
            "finetune batch {batch}: reward {:.4} iterations {:.2} xte {:.4} planned {:.4}",
            row.mean_reward,
            row.mean_iterations,
            row.mean_xte,
            mean_planned
        );
        log.push(row);
    }
    Ok(FinetuneOutcome { policy, value_net, log })
}
