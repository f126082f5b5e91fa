//! Proximal Policy Optimization for the exit policy.
//!
//! Actor and critic are separate tanh MLPs optimized jointly by one Adam
//! instance. Advantages come from GAE and are normalized over the whole
//! rollout before each update.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exitenv::{Action, EnvObservation, Environment};
use crate::optim::{clip_grad_norm, Adam};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    #[serde(rename = "in")]
    pub input: usize,
    #[serde(rename = "out")]
    pub output: usize,
    pub activation: Activation,
    /// Row-major `out × in`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Feed-forward network with tanh hidden layers and a linear output layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<DenseLayer>,
}

struct MlpTrace {
    /// Input to each layer plus the final output.
    acts: Vec<Vec<f64>>,
}

impl Mlp {
    /// `gains` gives the init scale per layer (std = gain / sqrt(fan_in)).
    pub fn new(sizes: &[usize], gains: &[f64], rng: &mut impl Rng) -> Self {
        assert!(sizes.len() >= 2 && gains.len() == sizes.len() - 1);
        let n_layers = sizes.len() - 1;
        let layers = (0..n_layers)
            .map(|i| {
                let (fan_in, fan_out) = (sizes[i], sizes[i + 1]);
                let std = gains[i] / (fan_in as f64).sqrt();
                let normal = Normal::new(0.0, std).expect("finite std");
                DenseLayer {
                    input: fan_in,
                    output: fan_out,
                    activation: if i + 1 == n_layers { Activation::Identity } else { Activation::Tanh },
                    weights: (0..fan_in * fan_out).map(|_| normal.sample(rng)).collect(),
                    bias: vec![0.0; fan_out],
                }
            })
            .collect();
        Self { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").output
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |detail: String| Error::Malformed { what: "mlp", detail };
        if self.layers.is_empty() {
            return Err(bad("no layers".into()));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.weights.len() != l.input * l.output || l.bias.len() != l.output {
                return Err(bad(format!("layer {i} has inconsistent shapes")));
            }
            if i > 0 && self.layers[i - 1].output != l.input {
                return Err(bad(format!("layer {i} input does not match previous output")));
            }
            if l.weights.iter().chain(&l.bias).any(|v| !v.is_finite()) {
                return Err(bad(format!("layer {i} has non-finite parameters")));
            }
        }
        Ok(())
    }

    fn run(&self, x: &[f64]) -> MlpTrace {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.to_vec());
        for l in &self.layers {
            let inp = acts.last().expect("input present");
            let mut out = l.bias.clone();
            for (o, row) in out.iter_mut().zip(l.weights.chunks_exact(l.input)) {
                *o += row.iter().zip(inp).map(|(w, v)| w * v).sum::<f64>();
                if l.activation == Activation::Tanh {
                    *o = o.tanh();
                }
            }
            acts.push(out);
        }
        MlpTrace { acts }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        self.run(x).acts.pop().expect("output present")
    }

    /// Accumulates parameter gradients (flat, layer by layer: weights then bias).
    fn backward(&self, trace: &MlpTrace, dout: &[f64], grad: &mut [f64]) {
        let mut offsets = Vec::with_capacity(self.layers.len());
        let mut off = 0;
        for l in &self.layers {
            offsets.push(off);
            off += l.weights.len() + l.bias.len();
        }
        let mut delta = dout.to_vec();
        for (i, l) in self.layers.iter().enumerate().rev() {
            if l.activation == Activation::Tanh {
                for (d, y) in delta.iter_mut().zip(&trace.acts[i + 1]) {
                    *d *= 1.0 - y * y;
                }
            }
            let inp = &trace.acts[i];
            let g = &mut grad[offsets[i]..offsets[i] + l.weights.len() + l.bias.len()];
            let (gw, gb) = g.split_at_mut(l.weights.len());
            for (o, &d) in delta.iter().enumerate() {
                gb[o] += d;
                for (gwi, v) in gw[o * l.input..(o + 1) * l.input].iter_mut().zip(inp) {
                    *gwi += d * v;
                }
            }
            if i > 0 {
                let mut next = vec![0.0; l.input];
                for (o, &d) in delta.iter().enumerate() {
                    for (n, w) in next.iter_mut().zip(&l.weights[o * l.input..(o + 1) * l.input]) {
                        *n += d * w;
                    }
                }
                delta = next;
            }
        }
    }

    fn flat(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.bias).copied())
            .collect()
    }

    fn set_flat(&mut self, p: &[f64]) {
        let mut off = 0;
        for l in &mut self.layers {
            let nw = l.weights.len();
            l.weights.copy_from_slice(&p[off..off + nw]);
            off += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&p[off..off + nb]);
            off += nb;
        }
    }
}

pub fn softmax2(logits: &[f64]) -> [f64; 2] {
    let m = logits[0].max(logits[1]);
    let a = (logits[0] - m).exp();
    let b = (logits[1] - m).exp();
    [a / (a + b), b / (a + b)]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyNetwork {
    /// Outputs `[continue, exit]` logits.
    pub actor: Mlp,
    pub critic: Mlp,
}

impl PolicyNetwork {
    pub fn new(input_dim: usize, hidden_layers: usize, hidden_units: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut sizes = vec![input_dim];
        sizes.extend(std::iter::repeat_n(hidden_units, hidden_layers));
        let hidden_gain = std::f64::consts::SQRT_2;
        let mut actor_sizes = sizes.clone();
        actor_sizes.push(2);
        let mut gains = vec![hidden_gain; hidden_layers];
        gains.push(0.01);
        let actor = Mlp::new(&actor_sizes, &gains, &mut rng);
        sizes.push(1);
        gains[hidden_layers] = 1.0;
        let critic = Mlp::new(&sizes, &gains, &mut rng);
        Self { actor, critic }
    }

    pub fn input_dim(&self) -> usize {
        self.actor.input_dim()
    }

    pub fn action_probs(&self, obs: &[f64]) -> [f64; 2] {
        softmax2(&self.actor.forward(obs))
    }

    pub fn value(&self, obs: &[f64]) -> f64 {
        self.critic.forward(obs)[0]
    }

    pub fn param_count(&self) -> usize {
        self.actor.param_count() + self.critic.param_count()
    }

    pub fn flat_params(&self) -> Vec<f64> {
        let mut p = self.actor.flat();
        p.extend(self.critic.flat());
        p
    }

    pub fn set_flat_params(&mut self, p: &[f64]) {
        let na = self.actor.param_count();
        self.actor.set_flat(&p[..na]);
        self.critic.set_flat(&p[na..]);
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_vec(&PolicyCheckpoint {
            format_version: POLICY_FORMAT_VERSION,
            network: self.clone(),
        })?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_artifact(path, "train a policy first (train-rl)")?;
        let ck: PolicyCheckpoint = serde_json::from_slice(&bytes)?;
        check_version("policy checkpoint", ck.format_version)?;
        ck.network.actor.validate()?;
        ck.network.critic.validate()?;
        Ok(ck.network)
    }
}

#[derive(Serialize, Deserialize)]
struct PolicyCheckpoint {
    format_version: u32,
    network: PolicyNetwork,
}

pub const POLICY_FORMAT_VERSION: u32 = 1;

fn check_version(what: &'static str, found: u32) -> Result<()> {
    if found != POLICY_FORMAT_VERSION {
        return Err(Error::UnsupportedVersion {
            what,
            found,
            expected: POLICY_FORMAT_VERSION,
        });
    }
    Ok(())
}

fn read_artifact(path: &Path, hint: &str) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingArtifact {
            path: path.to_path_buf(),
            hint: hint.into(),
        },
        _ => Error::io(path, e),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PPOConfig {
    pub total_steps: usize,
    pub rollout_buffer_size: usize,
    pub minibatch_size: usize,
    pub epochs_per_update: usize,
    pub learning_rate: f64,
    /// Linear decay to zero over `total_steps`.
    pub linear_lr_decay: bool,
    pub discount: f64,
    pub gae_lambda: f64,
    pub clip_range: f64,
    pub vf_coef: f64,
    pub ent_coef: f64,
    pub max_grad_norm: f64,
    pub hidden_layers: usize,
    pub hidden_units: usize,
    pub seed: u64,
}

impl Default for PPOConfig {
    fn default() -> Self {
        Self::large()
    }
}

impl PPOConfig {
    /// Buffer 4096, minibatch 512, 6 epochs, lr 5e-5.
    pub fn large() -> Self {
        Self {
            total_steps: 200_000,
            rollout_buffer_size: 4096,
            minibatch_size: 512,
            epochs_per_update: 6,
            learning_rate: 5e-5,
            linear_lr_decay: true,
            discount: 0.99,
            gae_lambda: 0.95,
            clip_range: 0.2,
            vf_coef: 0.5,
            ent_coef: 0.0,
            max_grad_norm: 0.5,
            hidden_layers: 2,
            hidden_units: 64,
            seed: 0,
        }
    }

    /// Buffer 256, minibatch 32, 2 epochs, lr 1e-4.
    pub fn small() -> Self {
        Self {
            rollout_buffer_size: 256,
            minibatch_size: 32,
            epochs_per_update: 2,
            learning_rate: 1e-4,
            ..Self::large()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rollout_buffer_size == 0 || self.minibatch_size == 0 {
            return Err(Error::config("buffer and minibatch sizes must be ≥ 1"));
        }
        if !self.rollout_buffer_size.is_multiple_of(self.minibatch_size) {
            return Err(Error::config(format!(
                "rollout_buffer_size {} is not divisible by minibatch_size {}",
                self.rollout_buffer_size, self.minibatch_size
            )));
        }
        if self.epochs_per_update == 0 {
            return Err(Error::config("epochs_per_update must be ≥ 1"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate must be finite and ≥ 0"));
        }
        if !(0.0..=1.0).contains(&self.discount) || !(0.0..=1.0).contains(&self.gae_lambda) {
            return Err(Error::config("discount and gae_lambda must lie in [0, 1]"));
        }
        if [self.clip_range, self.max_grad_norm].iter().any(|v| v.is_nan() || *v <= 0.0) {
            return Err(Error::config("clip_range and max_grad_norm must be positive"));
        }
        if self.hidden_layers == 0 || self.hidden_units == 0 {
            return Err(Error::config("policy needs at least one hidden layer"));
        }
        Ok(())
    }

    fn lr_at(&self, steps_done: usize) -> f64 {
        if !self.linear_lr_decay || self.total_steps == 0 {
            return self.learning_rate;
        }
        let progress_remaining = 1.0 - steps_done as f64 / self.total_steps as f64;
        self.learning_rate * progress_remaining.max(0.0)
    }
}

#[derive(Debug, Clone, Default)]
pub struct RolloutBuffer {
    pub observations: Vec<Vec<f64>>,
    pub actions: Vec<Action>,
    pub log_probs: Vec<f64>,
    pub rewards: Vec<f64>,
    pub values: Vec<f64>,
    /// True when the step ended its episode.
    pub dones: Vec<bool>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl RolloutBuffer {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn exit_fraction(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        self.actions.iter().filter(|a| **a == Action::Exit).count() as f64 / self.len() as f64
    }

    /// Fills `advantages` (GAE) and `returns = advantages + values`.
    /// `last_value` is the critic's estimate for the state after the last step.
    pub fn compute_advantages(&mut self, last_value: f64, discount: f64, lambda: f64) {
        let (adv, ret) = gae(&self.rewards, &self.values, &self.dones, last_value, discount, lambda);
        self.advantages = adv;
        self.returns = ret;
    }
}

/// Generalized advantage estimation over a flat step sequence with episode
/// boundaries marked by `dones`.
pub fn gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    last_value: f64,
    discount: f64,
    lambda: f64,
) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut next_adv = 0.0;
    for t in (0..n).rev() {
        let non_terminal = if dones[t] { 0.0 } else { 1.0 };
        let next_value = if t + 1 < n { values[t + 1] } else { last_value };
        let delta = rewards[t] + discount * next_value * non_terminal - values[t];
        next_adv = delta + discount * lambda * non_terminal * next_adv;
        adv[t] = next_adv;
    }
    let ret = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, ret)
}

/// Normalizes to mean 0 and std 1; an all-equal vector becomes all zeros.
pub fn normalize(v: &mut [f64]) {
    if v.is_empty() {
        return;
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let std = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    for x in v.iter_mut() {
        *x = (*x - mean) / (std + 1e-8);
    }
}

/// Carries the environment's current observation and per-episode reward
/// bookkeeping across rollouts.
pub struct RolloutState {
    obs: Option<EnvObservation>,
    episode_rewards: Vec<f64>,
    /// Mean step reward of every finished episode, in order.
    pub finished_episodes: Vec<f64>,
    /// For each finished token: (exit index reached, optimal exit index).
    pub token_outcomes: Vec<(usize, usize)>,
    rng: ChaCha8Rng,
}

impl RolloutState {
    pub fn new(seed: u64) -> Self {
        Self {
            obs: None,
            episode_rewards: Vec::new(),
            finished_episodes: Vec::new(),
            token_outcomes: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

fn sample_action(p: [f64; 2], rng: &mut impl Rng) -> Action {
    if rng.random::<f64>() < p[1] {
        Action::Exit
    } else {
        Action::Continue
    }
}

pub fn collect_rollout<E: Environment + ?Sized>(
    env: &mut E,
    policy: &PolicyNetwork,
    n_steps: usize,
    state: &mut RolloutState,
) -> Result<RolloutBuffer> {
    let mut buf = RolloutBuffer::default();
    for _ in 0..n_steps {
        let obs = match state.obs.take() {
            Some(o) => o,
            None => env.reset()?,
        };
        let p = policy.action_probs(&obs.hidden);
        let action = sample_action(p, &mut state.rng);
        let value = policy.value(&obs.hidden);
        let step = env.step(action)?;
        buf.observations.push(obs.hidden);
        buf.actions.push(action);
        buf.log_probs.push(p[action.index()].ln());
        buf.rewards.push(step.reward);
        buf.values.push(value);
        buf.dones.push(step.done);
        state.episode_rewards.push(step.reward);
        if let Some(outcome) = step.finished_token {
            state.token_outcomes.push(outcome);
        }
        if step.done {
            let r = &state.episode_rewards;
            state.finished_episodes.push(r.iter().sum::<f64>() / r.len() as f64);
            state.episode_rewards.clear();
        } else {
            state.obs = Some(step.observation);
        }
    }
    Ok(buf)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UpdateDiagnostics {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
    pub approx_kl: f64,
    pub learning_rate: f64,
}

/// Runs `epochs_per_update` passes of shuffled minibatches over the buffer.
pub fn ppo_update(
    policy: &mut PolicyNetwork,
    buffer: &RolloutBuffer,
    cfg: &PPOConfig,
    opt: &mut Adam,
    lr: f64,
    rng: &mut impl Rng,
) -> Result<UpdateDiagnostics> {
    cfg.validate()?;
    if buffer.len() != cfg.rollout_buffer_size || buffer.advantages.len() != buffer.len() {
        return Err(Error::config(format!(
            "buffer holds {} steps with {} advantages, expected {}",
            buffer.len(),
            buffer.advantages.len(),
            cfg.rollout_buffer_size
        )));
    }
    let mut adv = buffer.advantages.clone();
    normalize(&mut adv);
    let n_actor = policy.actor.param_count();
    let mut params = policy.flat_params();
    let mut grad = vec![0.0; params.len()];
    let mut idx: Vec<usize> = (0..buffer.len()).collect();
    let mut sums = [0.0f64; 5];
    let mut batches = 0usize;
    for _ in 0..cfg.epochs_per_update {
        idx.shuffle(rng);
        for mb in idx.chunks(cfg.minibatch_size) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let b = mb.len() as f64;
            let mut acc = [0.0f64; 5];
            for &i in mb {
                let obs = &buffer.observations[i];
                let a = buffer.actions[i].index();
                let at = policy.actor.run(obs);
                let logits = at.acts.last().expect("output");
                let p = softmax2(logits);
                let logp = p[a].ln();
                let ratio = (logp - buffer.log_probs[i]).exp();
                let clipped = ratio.clamp(1.0 - cfg.clip_range, 1.0 + cfg.clip_range);
                let (surr1, surr2) = (ratio * adv[i], clipped * adv[i]);
                let entropy = -(p[0] * p[0].ln() + p[1] * p[1].ln());
                acc[0] += -surr1.min(surr2);
                acc[2] += entropy;
                acc[3] += f64::from(u8::from((ratio - 1.0).abs() > cfg.clip_range));
                acc[4] += (ratio - 1.0) - (ratio.ln());

                // d(loss)/d(log p_a); zero when the clipped branch is selected
                let dlogp = if surr1 <= surr2 { -ratio * adv[i] / b } else { 0.0 };
                let mut dlogits = [0.0; 2];
                for (j, d) in dlogits.iter_mut().enumerate() {
                    let onehot = if j == a { 1.0 } else { 0.0 };
                    *d = dlogp * (onehot - p[j]);
                    // entropy bonus: d(-c·H)/dz_j = c·p_j(log p_j + H)
                    *d += cfg.ent_coef * p[j] * (p[j].ln() + entropy) / b;
                }
                policy.actor.backward(&at, &dlogits, &mut grad[..n_actor]);

                let ct = policy.critic.run(obs);
                let v = ct.acts.last().expect("output")[0];
                let err = v - buffer.returns[i];
                acc[1] += err * err;
                policy
                    .critic
                    .backward(&ct, &[2.0 * cfg.vf_coef * err / b], &mut grad[n_actor..]);
            }
            let loss = (acc[0] + cfg.vf_coef * acc[1] - cfg.ent_coef * acc[2]) / b;
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteLoss {
                    step: opt.steps() as usize,
                    detail: format!(
                        "policy_loss={} value_loss={} entropy={} param_norm={}",
                        acc[0] / b,
                        acc[1] / b,
                        acc[2] / b,
                        params.iter().map(|p| p * p).sum::<f64>().sqrt()
                    ),
                });
            }
            clip_grad_norm(&mut grad, cfg.max_grad_norm);
            opt.step(&mut params, &grad, lr);
            policy.set_flat_params(&params);
            for (s, a) in sums.iter_mut().zip(acc) {
                *s += a / b;
            }
            batches += 1;
        }
    }
    let k = batches as f64;
    Ok(UpdateDiagnostics {
        policy_loss: sums[0] / k,
        value_loss: sums[1] / k,
        entropy: sums[2] / k,
        clip_fraction: sums[3] / k,
        approx_kl: sums[4] / k,
        learning_rate: lr,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub episode: usize,
    pub mean_step_reward: f64,
    pub moving_average: f64,
    /// Environment steps taken when the episode finished (rounded to the rollout).
    pub timestep: usize,
}

pub const MOVING_AVERAGE_WINDOW: usize = 50;

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Policy with the best moving-average reward seen at an update boundary.
    pub best: PolicyNetwork,
    pub best_moving_average: f64,
    pub last: PolicyNetwork,
    pub curve: Vec<CurvePoint>,
    pub updates: Vec<UpdateDiagnostics>,
    /// For each finished token during training: (exit index reached, optimal index).
    pub token_outcomes: Vec<(usize, usize)>,
}

pub fn train<E: Environment + ?Sized>(
    env: &mut E,
    cfg: &PPOConfig,
    mut on_update: impl FnMut(usize, &UpdateDiagnostics, Option<&CurvePoint>),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut policy = PolicyNetwork::new(env.observation_dim(), cfg.hidden_layers, cfg.hidden_units, cfg.seed);
    let mut opt = Adam::with_eps(policy.param_count(), 1e-5);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut state = RolloutState::new(cfg.seed.wrapping_add(2));
    let mut curve: Vec<CurvePoint> = Vec::new();
    let mut updates = Vec::new();
    let mut best = policy.clone();
    let mut best_ma = f64::NEG_INFINITY;
    let mut steps = 0;
    while steps < cfg.total_steps {
        let lr = cfg.lr_at(steps);
        let mut buf = collect_rollout(env, &policy, cfg.rollout_buffer_size, &mut state)?;
        steps += buf.len();
        let last_value = state.obs.as_ref().map_or(0.0, |o| policy.value(&o.hidden));
        buf.compute_advantages(last_value, cfg.discount, cfg.gae_lambda);
        for &r in &state.finished_episodes[curve.len()..] {
            let start = (curve.len() + 1).saturating_sub(MOVING_AVERAGE_WINDOW);
            let window = &state.finished_episodes[start..=curve.len()];
            let ma = window.iter().sum::<f64>() / window.len() as f64;
            curve.push(CurvePoint {
                episode: curve.len() + 1,
                mean_step_reward: r,
                moving_average: ma,
                timestep: steps,
            });
        }
        if let Some(last) = curve.last() {
            if last.moving_average > best_ma {
                best_ma = last.moving_average;
                best = policy.clone();
            }
        }
        let diag = ppo_update(&mut policy, &buf, cfg, &mut opt, lr, &mut rng)?;
        on_update(steps, &diag, curve.last());
        updates.push(diag);
    }
    Ok(TrainOutcome {
        best,
        best_moving_average: best_ma,
        last: policy,
        curve,
        updates,
        token_outcomes: state.token_outcomes,
    })
}

pub fn reward_curve_csv(curve: &[CurvePoint]) -> String {
    let mut s = String::from("episode,mean_step_reward,moving_average_50,timestep\n");
    for p in curve {
        s.push_str(&format!(
            "{},{:.6},{:.6},{}\n",
            p.episode, p.mean_step_reward, p.moving_average, p.timestep
        ));
    }
    s
}

pub fn write_reward_curve(path: &Path, curve: &[CurvePoint]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(reward_curve_csv(curve).as_bytes())
        .map_err(|e| Error::io(path, e))
}

/// Greedy or stochastic evaluation summary of a policy on an environment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyEval {
    pub mean_step_reward: f64,
    /// Fraction of tokens finished exactly at their optimal exit point.
    pub optimal_exit_rate: f64,
    pub mean_exit_index: f64,
    pub tokens: usize,
}

/// `choose` maps an observation to an action.
pub fn evaluate_policy<E: Environment + ?Sized>(
    env: &mut E,
    episodes: usize,
    mut choose: impl FnMut(&[f64]) -> Action,
) -> Result<PolicyEval> {
    let (mut reward, mut steps, mut hits, mut tokens, mut exit_sum) = (0.0, 0usize, 0usize, 0usize, 0usize);
    for _ in 0..episodes {
        let mut obs = env.reset()?;
        loop {
            let s = env.step(choose(&obs.hidden))?;
            reward += s.reward;
            steps += 1;
            if let Some((k, opt)) = s.finished_token {
                tokens += 1;
                exit_sum += k;
                hits += usize::from(k == opt);
            }
            if s.done {
                break;
            }
            obs = s.observation;
        }
    }
    Ok(PolicyEval {
        mean_step_reward: reward / steps.max(1) as f64,
        optimal_exit_rate: hits as f64 / tokens.max(1) as f64,
        mean_exit_index: exit_sum as f64 / tokens.max(1) as f64,
        tokens,
    })
}

/// Inference-only artifact: the actor network and its descriptor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyArtifact {
    pub format: String,
    pub format_version: u32,
    pub input_dim: usize,
    pub actions: Vec<String>,
    pub layers: Vec<DenseLayer>,
}

impl PolicyArtifact {
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_vec_pretty(self)?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_artifact(path, "export a policy first (export-policy)")?;
        let art: Self = serde_json::from_slice(&bytes)?;
        check_version("policy artifact", art.format_version)?;
        if art.format != POLICY_ARTIFACT_FORMAT {
            return Err(Error::Malformed {
                what: "policy artifact",
                detail: format!("unknown format {:?}", art.format),
            });
        }
        let mlp = Mlp { layers: art.layers.clone() };
        mlp.validate()?;
        if mlp.input_dim() != art.input_dim || mlp.output_dim() != 2 {
            return Err(Error::Malformed {
                what: "policy artifact",
                detail: "declared dimensions do not match the layers".into(),
            });
        }
        Ok(art)
    }
}

pub const POLICY_ARTIFACT_FORMAT: &str = "earlyexit-policy";

pub fn export_policy(policy: &PolicyNetwork) -> PolicyArtifact {
    PolicyArtifact {
        format: POLICY_ARTIFACT_FORMAT.into(),
        format_version: POLICY_FORMAT_VERSION,
        input_dim: policy.input_dim(),
        actions: vec!["continue".into(), "exit".into()],
        layers: policy.actor.layers.clone(),
    }
}

/// The exported actor, evaluated without any training machinery.
#[derive(Debug, Clone, PartialEq)]
pub struct ExitPolicy {
    net: Mlp,
}

impl ExitPolicy {
    pub fn from_artifact(art: &PolicyArtifact) -> Result<Self> {
        let net = Mlp { layers: art.layers.clone() };
        net.validate()?;
        Ok(Self { net })
    }

    pub fn input_dim(&self) -> usize {
        self.net.input_dim()
    }

    /// Policy with no inputs in use that always yields `p_exit`
    /// (clamped so the logit stays finite); handy as a stub.
    pub fn constant(input_dim: usize, p_exit: f64) -> Self {
        let p = p_exit.clamp(1e-30, 1.0 - 1e-16);
        let logit = (p / (1.0 - p)).ln().clamp(-60.0, 60.0);
        Self {
            net: Mlp {
                layers: vec![DenseLayer {
                    input: input_dim,
                    output: 2,
                    activation: Activation::Identity,
                    weights: vec![0.0; 2 * input_dim],
                    bias: vec![0.0, logit],
                }],
            },
        }
    }

    /// `[continue, exit]` logits.
    pub fn logits(&self, hidden: &[f64]) -> Result<[f64; 2]> {
        if hidden.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                got: hidden.len(),
            });
        }
        let z = self.net.forward(hidden);
        Ok([z[0], z[1]])
    }

    /// `[p_continue, p_exit]`.
    pub fn action_probs(&self, hidden: &[f64]) -> Result<[f64; 2]> {
        Ok(softmax2(&self.logits(hidden)?))
    }

    pub fn exit_probability(&self, hidden: &[f64]) -> Result<f64> {
        Ok(self.action_probs(hidden)?[1])
    }
}
