//! Exit-decision environment.
//!
//! An episode is a run of generated tokens; for each token the agent walks
//! the exit points from shallowest to deepest, seeing only the hidden state
//! at the current exit point, and chooses to continue or exit. Rewards follow
//! the exit/continue tables below with penalties measured in exit-point steps
//! and scaled by `D = n_exit_points - 1`.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::TokenId;
use crate::error::{Error, Result};
use crate::lite::ExitSchedule;
use crate::model::{KVCache, Transformer};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardConfig {
    /// Late-exit penalty coefficient.
    pub alpha: f64,
    /// Early (wrong) exit penalty coefficient.
    pub beta: f64,
    /// Over-continue penalty coefficient.
    pub gamma: f64,
    /// Constant penalty for a wrong prediction past the optimal exit.
    pub epsilon: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            beta: 1.0,
            gamma: 1.0,
            epsilon: 0.05,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(format!("{name} = {v} outside [0, 1]")));
            }
        }
        if self.alpha > self.beta {
            return Err(Error::config(format!(
                "alpha ({}) must not exceed beta ({})",
                self.alpha, self.beta
            )));
        }
        if !(self.epsilon > 0.0 && self.epsilon <= 1.0) {
            return Err(Error::config(format!("epsilon {} outside (0, 1]", self.epsilon)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RewardInput {
    pub curr_idx: usize,
    pub opt_idx: usize,
    pub pred_matches: bool,
    pub n_exit_points: usize,
}

impl RewardInput {
    fn divisor(&self) -> f64 {
        self.n_exit_points.saturating_sub(1).max(1) as f64
    }
}

/// Scaled distance, capped so a penalty never exceeds its coefficient.
fn scaled(steps: usize, d: f64) -> f64 {
    (steps as f64 / d).min(1.0)
}

pub fn exit_reward(input: &RewardInput, cfg: &RewardConfig) -> f64 {
    let d = input.divisor();
    let (c, o) = (input.curr_idx, input.opt_idx);
    if input.pred_matches && c == o {
        1.0
    } else if input.pred_matches {
        -scaled(c.abs_diff(o), d) * cfg.alpha
    } else if c < o {
        -scaled(o - c, d) * cfg.beta
    } else {
        -cfg.epsilon
    }
}

pub fn continue_reward(input: &RewardInput, cfg: &RewardConfig) -> f64 {
    let (c, o) = (input.curr_idx, input.opt_idx);
    if c < o {
        1.0
    } else {
        -scaled(c + 1 - o, input.divisor()) * cfg.gamma
    }
}

/// Shallowest exit point whose prediction equals the final one (the last entry).
pub fn optimal_exit_index(exit_predictions: &[TokenId]) -> usize {
    let Some(last) = exit_predictions.last() else {
        return 0;
    };
    exit_predictions
        .iter()
        .position(|p| p == last)
        .unwrap_or(exit_predictions.len() - 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Action {
    Continue,
    Exit,
}

impl Action {
    pub fn index(self) -> usize {
        match self {
            Action::Continue => 0,
            Action::Exit => 1,
        }
    }

    pub fn from_index(i: usize) -> Self {
        if i == 1 {
            Action::Exit
        } else {
            Action::Continue
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvObservation {
    pub hidden: Vec<f64>,
    pub exit_point_index: usize,
    pub token_index_in_episode: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvStep {
    pub observation: EnvObservation,
    pub reward: f64,
    pub done: bool,
    /// Set when this step completed a token: the exit point it finished at
    /// and that token's optimal exit point.
    pub finished_token: Option<(usize, usize)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub token_idx: usize,
    pub exit_idx: usize,
    pub action: Action,
    pub reward: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeConfig {
    pub tokens_per_episode: usize,
    pub context_fraction_range: (f64, f64),
    pub max_context: usize,
    pub max_resample: usize,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            tokens_per_episode: 16,
            context_fraction_range: (0.2, 0.6),
            max_context: crate::corpus::DEFAULT_MAX_CONTEXT,
            max_resample: 100,
        }
    }
}

impl EpisodeConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.context_fraction_range;
        if self.tokens_per_episode == 0 {
            return Err(Error::config("tokens_per_episode must be ≥ 1"));
        }
        if !(lo > 0.0 && lo <= hi && hi < 1.0) {
            return Err(Error::config(format!("context fraction range ({lo}, {hi}) not within (0,1)")));
        }
        if self.max_context == 0 {
            return Err(Error::config("max_context must be ≥ 1"));
        }
        Ok(())
    }
}

/// Everything an episode needs for one token, precomputed at reset.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenRecord {
    /// Hidden state at each exit point.
    pub hidden: Vec<Vec<f64>>,
    /// Greedy prediction at each exit point; the last is the final layer's.
    pub predictions: Vec<TokenId>,
    pub opt_idx: usize,
}

impl TokenRecord {
    pub fn new(hidden: Vec<Vec<f64>>, predictions: Vec<TokenId>) -> Self {
        let opt_idx = optimal_exit_index(&predictions);
        Self {
            hidden,
            predictions,
            opt_idx,
        }
    }
}

/// The step machine shared by every environment.
#[derive(Debug, Clone)]
pub struct EpisodeCursor {
    tokens: Vec<TokenRecord>,
    token: usize,
    exit_idx: usize,
    done: bool,
    trace: Vec<StepRecord>,
}

impl EpisodeCursor {
    pub fn new(tokens: Vec<TokenRecord>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::config("episode has no tokens"));
        }
        let n = tokens[0].predictions.len();
        if n == 0 || tokens.iter().any(|t| t.predictions.len() != n || t.hidden.len() != n) {
            return Err(Error::config("every token needs one hidden state and prediction per exit point"));
        }
        Ok(Self {
            tokens,
            token: 0,
            exit_idx: 0,
            done: false,
            trace: Vec::new(),
        })
    }

    pub fn tokens(&self) -> &[TokenRecord] {
        &self.tokens
    }

    pub fn trace(&self) -> &[StepRecord] {
        &self.trace
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn observation(&self) -> EnvObservation {
        let t = self.token.min(self.tokens.len() - 1);
        EnvObservation {
            hidden: self.tokens[t].hidden[self.exit_idx].clone(),
            exit_point_index: self.exit_idx,
            token_index_in_episode: t,
        }
    }

    pub fn step(&mut self, action: Action, cfg: &RewardConfig) -> Result<EnvStep> {
        if self.done {
            return Err(Error::EpisodeFinished);
        }
        let rec = &self.tokens[self.token];
        let n = rec.predictions.len();
        let input = RewardInput {
            curr_idx: self.exit_idx,
            opt_idx: rec.opt_idx,
            pred_matches: rec.predictions[self.exit_idx] == rec.predictions[n - 1],
            n_exit_points: n,
        };
        let opt = rec.opt_idx;
        let (reward, finished) = match action {
            Action::Exit => (exit_reward(&input, cfg), true),
            // continuing past the last exit point finishes the token there
            Action::Continue => (continue_reward(&input, cfg), self.exit_idx + 1 == n),
        };
        self.trace.push(StepRecord {
            token_idx: self.token,
            exit_idx: self.exit_idx,
            action,
            reward,
        });
        let finished_token = finished.then_some((self.exit_idx, opt));
        if finished {
            self.token += 1;
            self.exit_idx = 0;
            if self.token == self.tokens.len() {
                self.done = true;
                // terminal observation: stay on the last token's final state
                self.token = self.tokens.len() - 1;
                self.exit_idx = n - 1;
            }
        } else {
            self.exit_idx += 1;
        }
        Ok(EnvStep {
            observation: self.observation(),
            reward,
            done: self.done,
            finished_token,
        })
    }
}

pub trait Environment {
    fn observation_dim(&self) -> usize;
    fn n_exit_points(&self) -> usize;
    fn reset(&mut self) -> Result<EnvObservation>;
    fn step(&mut self, action: Action) -> Result<EnvStep>;
}

/// Language-model environment: episodes come from greedy generation with
/// the full model on a uniformly sampled corpus file.
pub struct LmExitEnv {
    model: Arc<Transformer>,
    schedule: ExitSchedule,
    samples: Vec<Vec<TokenId>>,
    episode_cfg: EpisodeConfig,
    rewards: RewardConfig,
    rng: ChaCha8Rng,
    cursor: Option<EpisodeCursor>,
    opt_histogram: Vec<u64>,
    context_len: usize,
}

impl LmExitEnv {
    pub fn new(
        model: Arc<Transformer>,
        schedule: ExitSchedule,
        samples: Vec<Vec<TokenId>>,
        episode_cfg: EpisodeConfig,
        rewards: RewardConfig,
        seed: u64,
    ) -> Result<Self> {
        episode_cfg.validate()?;
        rewards.validate()?;
        if schedule.n_layers() != model.n_layers() {
            return Err(Error::config("schedule depth differs from model depth"));
        }
        if samples.is_empty() {
            return Err(Error::config("environment needs at least one sample"));
        }
        let max_seq = model.config().max_seq;
        if episode_cfg.tokens_per_episode >= max_seq {
            return Err(Error::config("tokens_per_episode must be smaller than max_seq"));
        }
        let n = schedule.n_exit_points();
        Ok(Self {
            model,
            schedule,
            samples,
            episode_cfg,
            rewards,
            rng: ChaCha8Rng::seed_from_u64(seed),
            cursor: None,
            opt_histogram: vec![0; n],
            context_len: 0,
        })
    }

    pub fn schedule(&self) -> &ExitSchedule {
        &self.schedule
    }

    pub fn reward_config(&self) -> &RewardConfig {
        &self.rewards
    }

    pub fn cursor(&self) -> Option<&EpisodeCursor> {
        self.cursor.as_ref()
    }

    /// Counts of optimal exit indices over every token generated so far.
    pub fn opt_histogram(&self) -> &[u64] {
        &self.opt_histogram
    }

    pub fn context_len(&self) -> usize {
        self.context_len
    }

    fn sample_context(&mut self) -> Result<Vec<TokenId>> {
        let (lo, hi) = self.episode_cfg.context_fraction_range;
        let limit = self
            .episode_cfg
            .max_context
            .min(self.model.config().max_seq - self.episode_cfg.tokens_per_episode);
        for _ in 0..self.episode_cfg.max_resample.max(1) {
            let idx = self.rng.random_range(0..self.samples.len());
            let frac = if hi > lo { self.rng.random_range(lo..hi) } else { lo };
            let sample = &self.samples[idx];
            let end = (frac * sample.len() as f64).floor() as usize;
            if end == 0 {
                continue;
            }
            let start = end.saturating_sub(limit);
            return Ok(sample[start..end].to_vec());
        }
        Err(Error::EpisodeUnavailable {
            attempts: self.episode_cfg.max_resample,
            reason: "samples too short for the context fraction range".into(),
        })
    }

    /// Generates the episode's tokens with the full model, recording every
    /// exit point's hidden state and prediction.
    pub fn build_episode(&self, context: &[TokenId]) -> Result<Vec<TokenRecord>> {
        exit_point_records(&self.model, &self.schedule, context, self.episode_cfg.tokens_per_episode)
    }
}

/// Greedy full-depth generation of `n_tokens` after `context`, keeping the
/// hidden state and head prediction at every exit point of each token.
pub fn exit_point_records(
    model: &Transformer,
    schedule: &ExitSchedule,
    context: &[TokenId],
    n_tokens: usize,
) -> Result<Vec<TokenRecord>> {
    let mut cache = KVCache::new(model.config());
    let mut seq = context.to_vec();
    let mut records = Vec::with_capacity(n_tokens);
    for _ in 0..n_tokens {
        let mut pass = model.begin_pass(&seq, Some(&mut cache))?;
        let mut hidden = Vec::with_capacity(schedule.n_exit_points());
        let mut preds = Vec::with_capacity(schedule.n_exit_points());
        for layer in 1..=model.n_layers() {
            let h = pass.advance()?;
            if schedule.contains(layer) {
                preds.push(model.predict(&h)?.token_id);
                hidden.push(h.values);
            }
        }
        let y = *preds.last().expect("final layer is an exit point");
        records.push(TokenRecord::new(hidden, preds));
        seq.push(y);
    }
    Ok(records)
}

impl Environment for LmExitEnv {
    fn observation_dim(&self) -> usize {
        self.model.d_model()
    }

    fn n_exit_points(&self) -> usize {
        self.schedule.n_exit_points()
    }

    fn reset(&mut self) -> Result<EnvObservation> {
        let context = self.sample_context()?;
        let records = self.build_episode(&context)?;
        for r in &records {
            self.opt_histogram[r.opt_idx] += 1;
        }
        self.context_len = context.len();
        let cursor = EpisodeCursor::new(records)?;
        let obs = cursor.observation();
        self.cursor = Some(cursor);
        Ok(obs)
    }

    fn step(&mut self, action: Action) -> Result<EnvStep> {
        let cursor = self.cursor.as_mut().ok_or(Error::EpisodeFinished)?;
        cursor.step(action, &self.rewards)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedEnvConfig {
    pub n_exit_points: usize,
    pub dim: usize,
    pub tokens_per_episode: usize,
    /// Std of the Gaussian noise added to the planted coordinates.
    pub noise: f64,
    pub seed: u64,
}

impl Default for PlantedEnvConfig {
    fn default() -> Self {
        Self {
            n_exit_points: 6,
            dim: 16,
            tokens_per_episode: 16,
            noise: 0.05,
            seed: 0,
        }
    }
}

/// Synthetic environment with a known answer: each token's optimal exit index
/// is written (scaled to [0,1], plus noise) into coordinates 0..4 of every
/// observation, the current exit index into coordinates 4..8, and the rest is
/// noise. Predictions match the final layer exactly from the optimal exit on.
pub struct PlantedExitEnv {
    cfg: PlantedEnvConfig,
    rewards: RewardConfig,
    rng: ChaCha8Rng,
    cursor: Option<EpisodeCursor>,
}

impl PlantedExitEnv {
    pub fn new(cfg: PlantedEnvConfig, rewards: RewardConfig) -> Result<Self> {
        rewards.validate()?;
        if cfg.n_exit_points < 2 || cfg.dim < 8 || cfg.tokens_per_episode == 0 {
            return Err(Error::config("planted env needs ≥ 2 exit points, dim ≥ 8, ≥ 1 token"));
        }
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Ok(Self {
            cfg,
            rewards,
            rng,
            cursor: None,
        })
    }

    fn token(&mut self) -> TokenRecord {
        let n = self.cfg.n_exit_points;
        let d = (n - 1) as f64;
        let opt = self.rng.random_range(0..n);
        let noise = Normal::new(0.0, self.cfg.noise).expect("valid noise");
        let filler = Normal::new(0.0, 0.5).expect("valid std");
        let mut hidden = Vec::with_capacity(n);
        for k in 0..n {
            let mut h = Vec::with_capacity(self.cfg.dim);
            for _ in 0..4 {
                h.push(opt as f64 / d + noise.sample(&mut self.rng));
            }
            for _ in 0..4 {
                h.push(k as f64 / d + noise.sample(&mut self.rng));
            }
            for _ in 8..self.cfg.dim {
                h.push(filler.sample(&mut self.rng));
            }
            hidden.push(h);
        }
        // token ids: final prediction 1, shallower-than-optimal exits predict 0
        let predictions = (0..n).map(|k| TokenId::from(k >= opt)).collect();
        TokenRecord::new(hidden, predictions)
    }
}

impl Environment for PlantedExitEnv {
    fn observation_dim(&self) -> usize {
        self.cfg.dim
    }

    fn n_exit_points(&self) -> usize {
        self.cfg.n_exit_points
    }

    fn reset(&mut self) -> Result<EnvObservation> {
        let tokens = (0..self.cfg.tokens_per_episode).map(|_| self.token()).collect();
        let cursor = EpisodeCursor::new(tokens)?;
        let obs = cursor.observation();
        self.cursor = Some(cursor);
        Ok(obs)
    }

    fn step(&mut self, action: Action) -> Result<EnvStep> {
        let cursor = self.cursor.as_mut().ok_or(Error::EpisodeFinished)?;
        cursor.step(action, &self.rewards)
    }
}

/// One JSON object per line: `{token_idx, exit_idx, action, reward}`.
pub fn write_trace(path: &Path, trace: &[StepRecord]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for rec in trace {
        let line = serde_json::to_string(rec)?;
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn cfg(alpha: f64, beta: f64, gamma: f64) -> RewardConfig {
        RewardConfig { alpha, beta, gamma, epsilon: 0.05 }
    }

    fn input(curr: usize, opt: usize, pred_matches: bool, n: usize) -> RewardInput {
        RewardInput { curr_idx: curr, opt_idx: opt, pred_matches, n_exit_points: n }
    }

    #[test]
    fn exit_reward_cases() {
        let c = cfg(0.5, 1.0, 1.0);
        assert_eq!(exit_reward(&input(3, 3, true, 9), &c), 1.0);
        assert_eq!(exit_reward(&input(5, 3, true, 9), &c), -0.125);
        assert_eq!(exit_reward(&input(1, 4, false, 9), &c), -0.375);
        assert_eq!(exit_reward(&input(6, 3, false, 9), &c), -0.05);
    }

    #[test]
    fn continue_reward_cases() {
        assert_eq!(continue_reward(&input(2, 5, false, 9), &cfg(0.5, 1.0, 1.0)), 1.0);
        assert_eq!(continue_reward(&input(5, 5, true, 9), &cfg(0.5, 1.0, 1.0)), -0.125);
        assert_eq!(continue_reward(&input(7, 5, true, 9), &cfg(0.5, 0.5, 0.5)), -0.1875);
    }

    #[test]
    fn reward_config_constraints() {
        assert!(cfg(0.5, 0.5, 0.5).validate().is_ok());
        assert!(cfg(0.8, 0.5, 0.5).validate().is_err());
        assert!(cfg(0.5, 1.5, 0.5).validate().is_err());
    }

    #[test]
    fn optimal_index() {
        assert_eq!(optimal_exit_index(&[7, 7, 7, 7]), 0);
        assert_eq!(optimal_exit_index(&[1, 2, 9, 9]), 2);
        assert_eq!(optimal_exit_index(&[9, 2, 3, 9]), 0);
        assert_eq!(optimal_exit_index(&[1, 2, 3, 9]), 3);
    }

    #[test]
    fn rewards_bounded_and_exit_argmax_at_opt() {
        let c = cfg(1.0, 1.0, 1.0);
        for n in 1..=12 {
            for opt in 0..n {
                let mut best = (f64::NEG_INFINITY, usize::MAX);
                for curr in 0..n {
                    for m in [true, false] {
                        let i = input(curr, opt, m, n);
                        for r in [exit_reward(&i, &c), continue_reward(&i, &c)] {
                            assert!((-1.0..=1.0).contains(&r));
                        }
                    }
                    let r = exit_reward(&input(curr, opt, true, n), &c);
                    if r > best.0 {
                        best = (r, curr);
                    } else {
                        assert!(r < best.0 || curr != opt);
                    }
                }
                assert_eq!(best.1, opt);
            }
        }
    }

    fn scripted(opts: &[usize], n: usize) -> EpisodeCursor {
        let tokens = opts
            .iter()
            .map(|&o| {
                let preds = (0..n).map(|k| TokenId::from(k >= o)).collect();
                TokenRecord::new(vec![vec![0.0; 2]; n], preds)
            })
            .collect();
        EpisodeCursor::new(tokens).unwrap()
    }

    #[test]
    fn continue_at_last_exit_finishes_token() {
        let c = RewardConfig::default();
        let mut cur = scripted(&[1, 0], 3);
        cur.step(Action::Continue, &c).unwrap();
        cur.step(Action::Continue, &c).unwrap();
        let s = cur.step(Action::Continue, &c).unwrap();
        // curr=2, opt=1: next=3 is two steps past opt, D=2
        assert_eq!(s.reward, -c.gamma);
        assert_eq!(s.finished_token, Some((2, 1)));
        assert_eq!(s.observation.token_index_in_episode, 1);
        assert_eq!(s.observation.exit_point_index, 0);
        let s = cur.step(Action::Exit, &c).unwrap();
        assert!(s.done);
        assert_eq!(s.reward, 1.0);
        assert!(matches!(cur.step(Action::Exit, &c), Err(Error::EpisodeFinished)));
    }

    #[test]
    fn step_count_equals_sum_of_exit_indices_plus_one() {
        let c = RewardConfig::default();
        let mut cur = scripted(&[0, 2, 1, 3], 4);
        let plan = [0usize, 3, 1, 2];
        let mut steps = 0;
        for &k in &plan {
            for _ in 0..k {
                cur.step(Action::Continue, &c).unwrap();
                steps += 1;
            }
            if k < 3 {
                cur.step(Action::Exit, &c).unwrap();
            } else {
                cur.step(Action::Continue, &c).unwrap();
            }
            steps += 1;
        }
        assert!(cur.is_done());
        assert_eq!(steps, plan.iter().map(|k| k + 1).sum::<usize>());
        assert_eq!(cur.trace().len(), steps);
    }

    fn lm_env(seed: u64) -> LmExitEnv {
        let model = Transformer::new(ModelConfig {
            n_layers: 4,
            d_model: 16,
            n_heads: 2,
            ffn_mult: 2,
            max_seq: 64,
            vocab_size: 259,
            seed: 4,
        })
        .unwrap();
        let sched = ExitSchedule::build(4, 1, 1, 1).unwrap();
        let samples = (0..5)
            .map(|i| (0..80).map(|j| ((i * 13 + j * 7) % 256) as TokenId).collect())
            .collect();
        let ep = EpisodeConfig { tokens_per_episode: 6, max_context: 40, ..Default::default() };
        LmExitEnv::new(Arc::new(model), sched, samples, ep, RewardConfig::default(), seed).unwrap()
    }

    #[test]
    fn lm_env_reset_contract() {
        let mut env = lm_env(3);
        let obs = env.reset().unwrap();
        assert_eq!(obs.exit_point_index, 0);
        assert_eq!(obs.token_index_in_episode, 0);
        assert_eq!(obs.hidden.len(), 16);
        let cur = env.cursor().unwrap();
        assert_eq!(cur.tokens().len(), 6);
        assert!(cur.tokens().iter().all(|t| t.predictions.len() == 4 && t.hidden.len() == 4));
        assert_eq!(env.opt_histogram().iter().sum::<u64>(), 6);

        let mut again = lm_env(3);
        again.reset().unwrap();
        assert_eq!(again.cursor().unwrap().tokens(), cur.tokens());
    }

    #[test]
    fn lm_env_full_episode_and_trace() {
        let mut env = lm_env(9);
        env.reset().unwrap();
        let mut done = false;
        let mut i = 0;
        while !done {
            let a = if i % 3 == 2 { Action::Exit } else { Action::Continue };
            done = env.step(a).unwrap().done;
            i += 1;
        }
        assert!(env.step(Action::Exit).is_err());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.jsonl");
        write_trace(&path, env.cursor().unwrap().trace()).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), i);
        let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(first["action"], "continue");
        assert!(first.get("token_idx").is_some() && first.get("reward").is_some());
    }

    #[test]
    fn planted_env_encodes_opt() {
        let mut env = PlantedExitEnv::new(PlantedEnvConfig::default(), RewardConfig::default()).unwrap();
        env.reset().unwrap();
        let cur = env.cursor.as_ref().unwrap();
        for t in cur.tokens() {
            let est = t.hidden[0][..4].iter().sum::<f64>() / 4.0 * 5.0;
            assert!((est - t.opt_idx as f64).abs() < 0.5);
        }
    }
}
