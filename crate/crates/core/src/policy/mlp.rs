//! Fully-connected network with ReLU hidden layers, hand-written
//! reverse-mode gradients, a diagonal Gaussian head and Adam.
//!
//! All trainable values live in one flat vector: for each layer the weight
//! matrix (row-major, `out x in`) followed by its bias, then `log_std` when
//! the network is a stochastic policy. Gradients share that layout.

use std::f64::consts::PI;
use std::io::{Read, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::PolicyError;

pub const FORMAT_VERSION: u32 = 1;
pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputActivation {
    Tanh,
    Identity,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    layer_dims: Vec<usize>,
    output: OutputActivation,
    theta: Vec<f64>,
    has_log_std: bool,
    /// Inputs are mapped to `(x - shift) * scale` before the first layer.
    input_shift: Vec<f64>,
    input_scale: Vec<f64>,
}

/// Activations kept from a forward pass for the backward pass.
#[derive(Debug, Clone, Default)]
pub struct ForwardCache {
    /// Input to each layer; entry 0 is the scaled network input.
    acts: Vec<Vec<f64>>,
    out: Vec<f64>,
}

impl ForwardCache {
    pub fn output(&self) -> &[f64] {
        &self.out
    }

    /// Input seen by layer `l` (0 is the normalized network input).
    pub fn layer_input(&self, l: usize) -> &[f64] {
        &self.acts[l]
    }
}

/// Four-lane dot product; fixed summation order, vectorizes well.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

impl MlpParams {
    /// Random initialisation: He-uniform hidden layers, output layer scaled
    /// by `output_gain`, zero biases.
    pub fn new<R: Rng>(
        layer_dims: &[usize],
        output: OutputActivation,
        log_std_init: Option<f64>,
        output_gain: f64,
        rng: &mut R,
    ) -> Result<Self, PolicyError> {
        let mut p = Self::zeros(layer_dims, output, log_std_init)?;
        let layers = layer_dims.len() - 1;
        let mut offset = 0;
        for l in 0..layers {
            let (n_in, n_out) = (layer_dims[l], layer_dims[l + 1]);
            let mut bound = (6.0 / n_in as f64).sqrt();
            if l + 1 == layers {
                bound *= output_gain;
            }
            for w in &mut p.theta[offset..offset + n_in * n_out] {
                *w = rng.random_range(-bound..=bound);
            }
            offset += n_in * n_out + n_out;
        }
        Ok(p)
    }

    pub fn zeros(
        layer_dims: &[usize],
        output: OutputActivation,
        log_std_init: Option<f64>,
    ) -> Result<Self, PolicyError> {
        if layer_dims.len() < 2 || layer_dims.contains(&0) {
            return Err(PolicyError::Shape(format!("bad layer dims {layer_dims:?}")));
        }
        let n_out = *layer_dims.last().expect("len checked");
        let body: usize = layer_dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        let mut theta = vec![0.0; body];
        if let Some(ls) = log_std_init {
            theta.extend(std::iter::repeat_n(ls.clamp(LOG_STD_MIN, LOG_STD_MAX), n_out));
        }
        Ok(MlpParams {
            layer_dims: layer_dims.to_vec(),
            output,
            theta,
            has_log_std: log_std_init.is_some(),
            input_shift: vec![0.0; layer_dims[0]],
            input_scale: vec![1.0; layer_dims[0]],
        })
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().expect("at least two layers")
    }

    pub fn output_activation(&self) -> OutputActivation {
        self.output
    }

    /// Every trainable value in the flat layout.
    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn theta_mut(&mut self) -> &mut [f64] {
        &mut self.theta
    }

    pub fn num_params(&self) -> usize {
        self.theta.len()
    }

    fn body_len(&self) -> usize {
        self.theta.len() - if self.has_log_std { self.output_dim() } else { 0 }
    }

    pub fn log_std(&self) -> Option<&[f64]> {
        self.has_log_std.then(|| &self.theta[self.body_len()..])
    }

    pub fn set_input_normalization(&mut self, shift: Vec<f64>, scale: Vec<f64>) -> Result<(), PolicyError> {
        if shift.len() != self.input_dim() || scale.len() != self.input_dim() {
            return Err(PolicyError::Shape("normalization length differs from input dim".into()));
        }
        if scale.iter().chain(&shift).any(|v| !v.is_finite()) {
            return Err(PolicyError::NonFinite);
        }
        self.input_shift = shift;
        self.input_scale = scale;
        Ok(())
    }

    pub fn input_normalization(&self) -> (&[f64], &[f64]) {
        (&self.input_shift, &self.input_scale)
    }

    fn clamp_log_std(&mut self) {
        let start = self.body_len();
        for v in &mut self.theta[start..] {
            *v = v.clamp(LOG_STD_MIN, LOG_STD_MAX);
        }
    }

    /// Deterministic network output.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>, PolicyError> {
        let mut cache = ForwardCache::default();
        self.forward_cached(x, &mut cache)?;
        Ok(cache.out)
    }

    pub fn forward_cached(&self, x: &[f64], cache: &mut ForwardCache) -> Result<(), PolicyError> {
        if x.len() != self.input_dim() {
            return Err(PolicyError::DimensionMismatch { expected: self.input_dim(), got: x.len() });
        }
        let layers = self.layer_dims.len() - 1;
        cache.acts.resize_with(layers, Vec::new);
        let a0 = &mut cache.acts[0];
        a0.clear();
        a0.extend(x.iter().zip(&self.input_shift).zip(&self.input_scale).map(|((v, s), k)| (v - s) * k));
        let mut offset = 0;
        for l in 0..layers {
            let (n_in, n_out) = (self.layer_dims[l], self.layer_dims[l + 1]);
            let w = &self.theta[offset..offset + n_in * n_out];
            let b = &self.theta[offset + n_in * n_out..offset + n_in * n_out + n_out];
            offset += n_in * n_out + n_out;
            let last = l + 1 == layers;
            let mut next = if last { std::mem::take(&mut cache.out) } else { std::mem::take(&mut cache.acts[l + 1]) };
            next.clear();
            let input = &cache.acts[l];
            for j in 0..n_out {
                let z = b[j] + dot(&w[j * n_in..(j + 1) * n_in], input);
                next.push(if !last {
                    z.max(0.0)
                } else {
                    match self.output {
                        OutputActivation::Tanh => z.tanh(),
                        OutputActivation::Identity => z,
                    }
                });
            }
            if last {
                cache.out = next;
            } else {
                cache.acts[l + 1] = next;
            }
        }
        Ok(())
    }

    /// Accumulates into `grad` the gradient of a loss whose derivative with
    /// respect to the network output is `d_out`.
    pub fn backward(&self, cache: &ForwardCache, d_out: &[f64], grad: &mut [f64]) {
        let layers = self.layer_dims.len() - 1;
        let mut delta: Vec<f64> = match self.output {
            OutputActivation::Tanh => d_out.iter().zip(&cache.out).map(|(d, y)| d * (1.0 - y * y)).collect(),
            OutputActivation::Identity => d_out.to_vec(),
        };
        let mut offsets = Vec::with_capacity(layers);
        let mut offset = 0;
        for l in 0..layers {
            offsets.push(offset);
            offset += self.layer_dims[l] * self.layer_dims[l + 1] + self.layer_dims[l + 1];
        }
        for l in (0..layers).rev() {
            let (n_in, n_out) = (self.layer_dims[l], self.layer_dims[l + 1]);
            let off = offsets[l];
            let input = &cache.acts[l];
            {
                let (gw, gb) = grad[off..off + n_in * n_out + n_out].split_at_mut(n_in * n_out);
                for j in 0..n_out {
                    if delta[j] != 0.0 {
                        axpy(delta[j], input, &mut gw[j * n_in..(j + 1) * n_in]);
                        gb[j] += delta[j];
                    }
                }
            }
            if l > 0 {
                let w = &self.theta[off..off + n_in * n_out];
                let mut prev = vec![0.0; n_in];
                for j in 0..n_out {
                    if delta[j] != 0.0 {
                        axpy(delta[j], &w[j * n_in..(j + 1) * n_in], &mut prev);
                    }
                }
                for (p, a) in prev.iter_mut().zip(input) {
                    if *a <= 0.0 {
                        *p = 0.0;
                    }
                }
                delta = prev;
            }
        }
    }

    /// Writes the self-describing JSON document.
    pub fn save<W: Write>(&self, sink: W) -> Result<(), PolicyError> {
        let doc = self.to_document();
        serde_json::to_writer_pretty(sink, &doc).map_err(|e| PolicyError::Format(e.to_string()))
    }

    pub fn load<R: Read>(source: R) -> Result<Self, PolicyError> {
        let value: serde_json::Value =
            serde_json::from_reader(source).map_err(|e| PolicyError::Format(e.to_string()))?;
        match value.get("format_version").and_then(|v| v.as_u64()) {
            Some(v) if v == u64::from(FORMAT_VERSION) => {}
            Some(v) => return Err(PolicyError::UnsupportedVersion(v)),
            None => return Err(PolicyError::Format("missing format_version".into())),
        }
        let doc: Document = serde_json::from_value(value).map_err(|e| PolicyError::Format(e.to_string()))?;
        Self::from_document(doc)
    }

    pub fn save_file(&self, path: impl AsRef<std::path::Path>) -> Result<(), PolicyError> {
        let f = std::fs::File::create(path)?;
        self.save(std::io::BufWriter::new(f))
    }

    pub fn load_file(path: impl AsRef<std::path::Path>) -> Result<Self, PolicyError> {
        Self::load(std::io::BufReader::new(std::fs::File::open(path)?))
    }

    fn to_document(&self) -> Document {
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        let mut offset = 0;
        for w in self.layer_dims.windows(2) {
            let (n_in, n_out) = (w[0], w[1]);
            weights.push(self.theta[offset..offset + n_in * n_out].to_vec());
            offset += n_in * n_out;
            biases.push(self.theta[offset..offset + n_out].to_vec());
            offset += n_out;
        }
        Document {
            format_version: FORMAT_VERSION,
            layer_dims: self.layer_dims.clone(),
            output_activation: self.output,
            input_shift: self.input_shift.clone(),
            input_scale: self.input_scale.clone(),
            weights,
            biases,
            log_std: self.log_std().map(<[f64]>::to_vec),
        }
    }

    fn from_document(doc: Document) -> Result<Self, PolicyError> {
        let mut p = Self::zeros(&doc.layer_dims, doc.output_activation, doc.log_std.as_ref().map(|_| 0.0))?;
        let layers = doc.layer_dims.len() - 1;
        if doc.weights.len() != layers || doc.biases.len() != layers {
            return Err(PolicyError::Shape(format!(
                "{} weight and {} bias arrays for {layers} layers",
                doc.weights.len(),
                doc.biases.len()
            )));
        }
        let mut offset = 0;
        for l in 0..layers {
            let (n_in, n_out) = (doc.layer_dims[l], doc.layer_dims[l + 1]);
            if doc.weights[l].len() != n_in * n_out || doc.biases[l].len() != n_out {
                return Err(PolicyError::Shape(format!("layer {l} arrays do not match {n_in}x{n_out}")));
            }
            p.theta[offset..offset + n_in * n_out].copy_from_slice(&doc.weights[l]);
            offset += n_in * n_out;
            p.theta[offset..offset + n_out].copy_from_slice(&doc.biases[l]);
            offset += n_out;
        }
        if let Some(ls) = doc.log_std {
            if ls.len() != p.output_dim() {
                return Err(PolicyError::Shape(format!(
                    "log_std has {} entries, output dim {}",
                    ls.len(),
                    p.output_dim()
                )));
            }
            if ls.iter().any(|v| !(LOG_STD_MIN..=LOG_STD_MAX).contains(v)) {
                return Err(PolicyError::Shape("log_std outside [-5, 2]".into()));
            }
            p.theta[offset..].copy_from_slice(&ls);
        }
        p.set_input_normalization(doc.input_shift, doc.input_scale)?;
        if p.theta.iter().any(|v| !v.is_finite()) {
            return Err(PolicyError::NonFinite);
        }
        Ok(p)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Document {
    format_version: u32,
    layer_dims: Vec<usize>,
    output_activation: OutputActivation,
    input_shift: Vec<f64>,
    input_scale: Vec<f64>,
    /// Row-major `out x in` per layer.
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
    log_std: Option<Vec<f64>>,
}

const HALF_LOG_2PI: f64 = 0.918_938_533_204_672_8;

/// Log density of `action` under a diagonal Gaussian.
pub fn gaussian_log_prob(mean: &[f64], log_std: &[f64], action: &[f64]) -> f64 {
    mean.iter()
        .zip(log_std)
        .zip(action)
        .map(|((m, ls), a)| {
            let z = (a - m) * (-ls).exp();
            -0.5 * z * z - ls - HALF_LOG_2PI
        })
        .sum()
}

pub fn gaussian_entropy(log_std: &[f64]) -> f64 {
    log_std.iter().map(|ls| ls + 0.5 * (2.0 * PI * std::f64::consts::E).ln()).sum()
}

pub fn gaussian_sample<R: Rng>(mean: &[f64], log_std: &[f64], rng: &mut R) -> Vec<f64> {
    use rand_distr::{Distribution, StandardNormal};
    mean.iter()
        .zip(log_std)
        .map(|(m, ls)| {
            let e: f64 = StandardNormal.sample(rng);
            m + ls.exp() * e
        })
        .collect()
}

/// One training record for the policy network. Fields unused by the active
/// loss terms may be empty.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PolicySample {
    pub obs: Vec<f64>,
    pub target: Vec<f64>,
    pub action: Vec<f64>,
    pub old_log_prob: f64,
    pub advantage: f64,
}

/// Coefficients of the policy-network loss
/// `policy * L_clip + entropy * L_entropy + imitation * L_mse`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolicyLossWeights {
    pub policy: f64,
    pub entropy: f64,
    pub imitation: f64,
    pub clip: f64,
}

impl PolicyLossWeights {
    pub fn mse() -> Self {
        PolicyLossWeights { policy: 0.0, entropy: 0.0, imitation: 1.0, clip: 0.2 }
    }
}

/// Batch means of the individual terms.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PolicyLosses {
    /// Clipped surrogate, negated.
    pub policy: f64,
    /// Negated entropy.
    pub entropy: f64,
    pub imitation: f64,
    pub total: f64,
    /// Mean probability ratio, for diagnostics.
    pub mean_ratio: f64,
}

/// Which scalar loss [`gradients`] differentiates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossKind {
    /// Mean squared error between output and `target`.
    Mse,
    /// Weighted PPO clip, entropy and imitation terms.
    Ppo(PolicyLossWeights),
    /// Mean squared error of a scalar output against `target[0]`.
    Value,
}

/// Exact gradient of the chosen loss over `batch`; returns the loss and the
/// gradient in the flat parameter layout.
pub fn gradients(params: &MlpParams, batch: &[PolicySample], kind: LossKind) -> Result<(f64, Vec<f64>), PolicyError> {
    let mut grad = vec![0.0; params.num_params()];
    let loss = match kind {
        LossKind::Mse => policy_loss_gradients(params, batch, PolicyLossWeights::mse(), &mut grad)?.total,
        LossKind::Ppo(w) => policy_loss_gradients(params, batch, w, &mut grad)?.total,
        LossKind::Value => value_loss_gradients(params, batch, 1.0, &mut grad)?,
    };
    Ok((loss, grad))
}

/// Accumulates `grad += d(total)/d(theta)` and returns the loss terms.
pub fn policy_loss_gradients(
    params: &MlpParams,
    batch: &[PolicySample],
    w: PolicyLossWeights,
    grad: &mut [f64],
) -> Result<PolicyLosses, PolicyError> {
    if batch.is_empty() {
        return Err(PolicyError::EmptyBatch);
    }
    let n = batch.len() as f64;
    let dim = params.output_dim();
    let needs_std = w.policy != 0.0 || w.entropy != 0.0;
    let log_std: Vec<f64> = match (params.log_std(), needs_std) {
        (Some(ls), _) => ls.to_vec(),
        (None, false) => vec![0.0; dim],
        (None, true) => return Err(PolicyError::Shape("PPO loss needs a log_std head".into())),
    };
    let inv_var: Vec<f64> = log_std.iter().map(|ls| (-2.0 * ls).exp()).collect();
    let body = params.body_len();
    let mut out = PolicyLosses::default();
    let mut cache = ForwardCache::default();
    let mut d_out = vec![0.0; dim];
    for s in batch {
        params.forward_cached(&s.obs, &mut cache)?;
        let mean = cache.output();
        d_out.fill(0.0);
        if w.imitation != 0.0 {
            if s.target.len() != dim {
                return Err(PolicyError::DimensionMismatch { expected: dim, got: s.target.len() });
            }
            let mut se = 0.0;
            for j in 0..dim {
                let e = mean[j] - s.target[j];
                se += e * e;
                d_out[j] += w.imitation * 2.0 * e / (dim as f64 * n);
            }
            out.imitation += se / dim as f64 / n;
        }
        if w.policy != 0.0 {
            if s.action.len() != dim {
                return Err(PolicyError::DimensionMismatch { expected: dim, got: s.action.len() });
            }
            let logp = gaussian_log_prob(mean, &log_std, &s.action);
            let ratio = (logp - s.old_log_prob).exp();
            let a = s.advantage;
            let unclipped = ratio * a;
            let clipped = ratio.clamp(1.0 - w.clip, 1.0 + w.clip) * a;
            out.policy -= unclipped.min(clipped) / n;
            out.mean_ratio += ratio / n;
            // The gradient flows only through the unclipped branch when it is the minimum.
            if unclipped <= clipped {
                let coef = -w.policy * a * ratio / n;
                for j in 0..dim {
                    let diff = s.action[j] - mean[j];
                    d_out[j] += coef * diff * inv_var[j];
                    grad[body + j] += coef * (diff * diff * inv_var[j] - 1.0);
                }
            }
        }
        params.backward(&cache, &d_out, grad);
    }
    if w.entropy != 0.0 {
        out.entropy = -gaussian_entropy(&log_std);
        for j in 0..dim {
            grad[body + j] -= w.entropy;
        }
    }
    out.total = w.policy * out.policy + w.entropy * out.entropy + w.imitation * out.imitation;
    Ok(out)
}

/// Accumulates the gradient of `weight * mean((V(obs) - target[0])^2)`.
pub fn value_loss_gradients(
    params: &MlpParams,
    batch: &[PolicySample],
    weight: f64,
    grad: &mut [f64],
) -> Result<f64, PolicyError> {
    if batch.is_empty() {
        return Err(PolicyError::EmptyBatch);
    }
    let n = batch.len() as f64;
    let mut cache = ForwardCache::default();
    let mut loss = 0.0;
    for s in batch {
        params.forward_cached(&s.obs, &mut cache)?;
        let target = *s.target.first().ok_or(PolicyError::DimensionMismatch { expected: 1, got: 0 })?;
        let e = cache.output()[0] - target;
        loss += e * e / n;
        params.backward(&cache, &[weight * 2.0 * e / n], grad);
    }
    Ok(weight * loss)
}

/// Adam moments for one parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(num_params: usize) -> Self {
        Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8, m: vec![0.0; num_params], v: vec![0.0; num_params], t: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }
}

/// One bias-corrected Adam step; `log_std` is kept inside its bounds.
pub fn adam_update(params: &mut MlpParams, grad: &[f64], state: &mut Adam, lr: f64) -> Result<(), PolicyError> {
    if grad.len() != params.num_params() || state.m.len() != params.num_params() {
        return Err(PolicyError::DimensionMismatch {
            expected: params.num_params(),
            got: grad.len().min(state.m.len()),
        });
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(PolicyError::NonFinite);
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    for i in 0..grad.len() {
        let g = grad[i];
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
        let mh = state.m[i] / c1;
        let vh = state.v[i] / c2;
        params.theta[i] -= lr * mh / (vh.sqrt() + state.eps);
    }
    params.clamp_log_std();
    Ok(())
}
