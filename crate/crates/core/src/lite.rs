//! Exit schedule, per-layer loss weights and training with the weighted
//! intermediate-layer loss.
//!
//! Exits sit on every `first_stride`-th layer from `earliest` up to the middle
//! of the stack, then every `second_stride`-th layer after the middle, and
//! always on the last layer. Each half gets a loss budget that is spread over
//! its exits with a geometric decay (earliest exit heaviest); the final layer
//! gets its own fixed budget.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::TokenId;
use crate::error::{Error, Result};
use crate::model::Transformer;
use crate::optim::{clip_grad_norm, Adam};

/// Layers at which a token may leave the network, ascending, ending at the
/// model depth.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawSchedule", into = "RawSchedule")]
pub struct ExitSchedule {
    exit_layers: Vec<usize>,
    n_layers: usize,
}

#[derive(Serialize, Deserialize)]
struct RawSchedule {
    exit_layers: Vec<usize>,
    n_layers: usize,
}

impl TryFrom<RawSchedule> for ExitSchedule {
    type Error = Error;
    fn try_from(r: RawSchedule) -> Result<Self> {
        ExitSchedule::new(r.exit_layers, r.n_layers)
    }
}

impl From<ExitSchedule> for RawSchedule {
    fn from(s: ExitSchedule) -> Self {
        RawSchedule {
            exit_layers: s.exit_layers,
            n_layers: s.n_layers,
        }
    }
}

impl ExitSchedule {
    pub fn new(exit_layers: Vec<usize>, n_layers: usize) -> Result<Self> {
        if exit_layers.is_empty() {
            return Err(Error::config("exit schedule is empty"));
        }
        if exit_layers[0] == 0 || exit_layers.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config(format!(
                "exit layers must be strictly increasing and ≥ 1: {exit_layers:?}"
            )));
        }
        if *exit_layers.last().expect("non-empty") != n_layers {
            return Err(Error::config(format!(
                "last exit layer must be the final layer {n_layers}: {exit_layers:?}"
            )));
        }
        Ok(Self {
            exit_layers,
            n_layers,
        })
    }

    pub fn build(
        n_layers: usize,
        earliest: usize,
        first_half_stride: usize,
        second_half_stride: usize,
    ) -> Result<Self> {
        if earliest == 0 || first_half_stride == 0 || second_half_stride == 0 {
            return Err(Error::config("earliest exit and strides must be ≥ 1"));
        }
        if n_layers == 0 || earliest > n_layers {
            return Err(Error::config(format!(
                "earliest exit {earliest} leaves no exit in a {n_layers}-layer model"
            )));
        }
        let half = n_layers / 2;
        let mut layers = Vec::new();
        let mut l = earliest;
        while l <= half {
            layers.push(l);
            l += first_half_stride;
        }
        let mut l = half + second_half_stride;
        while l < n_layers {
            if l >= earliest {
                layers.push(l);
            }
            l += second_half_stride;
        }
        layers.push(n_layers);
        Self::new(layers, n_layers)
    }

    pub fn layers(&self) -> &[usize] {
        &self.exit_layers
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    pub fn n_exit_points(&self) -> usize {
        self.exit_layers.len()
    }

    pub fn earliest(&self) -> usize {
        self.exit_layers[0]
    }

    pub fn contains(&self, layer: usize) -> bool {
        self.exit_layers.binary_search(&layer).is_ok()
    }

    pub fn index_of(&self, layer: usize) -> Option<usize> {
        self.exit_layers.binary_search(&layer).ok()
    }

    pub fn layer_at(&self, index: usize) -> usize {
        self.exit_layers[index]
    }

    fn first_half(&self) -> Vec<usize> {
        let half = self.n_layers / 2;
        self.exit_layers
            .iter()
            .copied()
            .filter(|&l| l <= half && l != self.n_layers)
            .collect()
    }

    fn second_half(&self) -> Vec<usize> {
        let half = self.n_layers / 2;
        self.exit_layers
            .iter()
            .copied()
            .filter(|&l| l > half && l != self.n_layers)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Budgets {
    pub first_half: f64,
    pub second_half: f64,
    pub final_layer: f64,
}

impl Default for Budgets {
    fn default() -> Self {
        Self {
            first_half: 0.7,
            second_half: 0.2,
            final_layer: 0.1,
        }
    }
}

impl Budgets {
    /// All weight on the last layer: plain language-model training.
    pub fn final_only() -> Self {
        Self {
            first_half: 0.0,
            second_half: 0.0,
            final_layer: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerWeight {
    pub layer: usize,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightSchedule {
    pub weights: Vec<LayerWeight>,
    pub budgets: Budgets,
    pub decay: f64,
}

/// Geometric weights r⁰, r¹, … normalized to sum to `budget`.
fn geometric(n: usize, decay: f64, budget: f64) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|k| decay.powi(k as i32)).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|r| budget * r / total).collect()
}

impl WeightSchedule {
    /// A half without exits hands its budget to the other half; with neither
    /// half populated the final layer takes everything.
    pub fn build(sched: &ExitSchedule, budgets: Budgets, decay: f64) -> Result<Self> {
        let b = [budgets.first_half, budgets.second_half, budgets.final_layer];
        if b.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::config(format!("budgets must be non-negative: {b:?}")));
        }
        if (b.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!("budgets {b:?} do not sum to 1")));
        }
        if !(decay > 0.0 && decay <= 1.0) {
            return Err(Error::config(format!("decay {decay} not in (0, 1]")));
        }
        let first = sched.first_half();
        let second = sched.second_half();
        let (mut bf, mut bs, mut bl) = (budgets.first_half, budgets.second_half, budgets.final_layer);
        match (first.is_empty(), second.is_empty()) {
            (true, true) => {
                bl = 1.0;
                bf = 0.0;
                bs = 0.0;
            }
            (true, false) => {
                bs += bf;
                bf = 0.0;
            }
            (false, true) => {
                bf += bs;
                bs = 0.0;
            }
            (false, false) => {}
        }
        let mut weights = Vec::with_capacity(sched.n_exit_points());
        for (layers, budget) in [(&first, bf), (&second, bs)] {
            for (&layer, w) in layers.iter().zip(geometric(layers.len(), decay, budget)) {
                weights.push(LayerWeight { layer, weight: w });
            }
        }
        weights.push(LayerWeight {
            layer: sched.n_layers(),
            weight: bl,
        });
        Ok(Self {
            weights,
            budgets,
            decay,
        })
    }

    pub fn weight(&self, layer: usize) -> Option<f64> {
        self.weights.iter().find(|w| w.layer == layer).map(|w| w.weight)
    }

    pub fn total(&self) -> f64 {
        self.weights.iter().map(|w| w.weight).sum()
    }

    pub fn as_pairs(&self) -> Vec<(usize, f64)> {
        self.weights.iter().map(|w| (w.layer, w.weight)).collect()
    }
}

/// Σ wᵢ·lossᵢ / Σ wᵢ over exactly the schedule layers.
pub fn aggregated_loss(per_layer_losses: &[(usize, f64)], ws: &WeightSchedule) -> Result<f64> {
    for &(layer, loss) in per_layer_losses {
        if ws.weight(layer).is_none() {
            return Err(Error::config(format!("loss given for non-exit layer {layer}")));
        }
        if !loss.is_finite() {
            return Err(Error::config(format!("non-finite loss at layer {layer}")));
        }
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for w in &ws.weights {
        let loss = per_layer_losses
            .iter()
            .find(|(l, _)| *l == w.layer)
            .map(|(_, v)| *v)
            .ok_or(Error::MissingLayerLoss(w.layer))?;
        num += w.weight * loss;
        den += w.weight;
    }
    if den <= 0.0 {
        return Err(Error::config("weights sum to zero"));
    }
    Ok(num / den)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub grad_accum_steps: usize,
    pub epochs: usize,
    /// Stop after this many optimizer steps even if epochs remain.
    pub max_steps: Option<usize>,
    pub block_len: usize,
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 4,
            grad_accum_steps: 32,
            epochs: 1,
            max_steps: None,
            block_len: 256,
            grad_clip: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate must be finite and ≥ 0"));
        }
        if self.batch_size == 0 || self.grad_accum_steps == 0 || self.block_len < 2 {
            return Err(Error::config("batch_size, grad_accum_steps ≥ 1 and block_len ≥ 2 required"));
        }
        if self.grad_clip.is_nan() || self.grad_clip <= 0.0 {
            return Err(Error::config("grad_clip must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub aggregated_loss: f64,
    pub per_layer: Vec<(usize, f64)>,
}

/// Trains `model` in place. `on_step` sees every optimizer step as it happens.
pub fn train_lite(
    model: &mut Transformer,
    blocks: &[Vec<TokenId>],
    sched: &ExitSchedule,
    ws: &WeightSchedule,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&LossRecord),
) -> Result<Vec<LossRecord>> {
    cfg.validate()?;
    if sched.n_layers() != model.n_layers() {
        return Err(Error::config(format!(
            "schedule has {} layers, model has {}",
            sched.n_layers(),
            model.n_layers()
        )));
    }
    if blocks.is_empty() {
        return Err(Error::config("no training blocks"));
    }
    let exits = ws.as_pairs();
    let mut opt = Adam::new(model.param_count());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut history = Vec::new();
    let mut grad = vec![0.0; model.param_count()];
    let per_step = cfg.batch_size * cfg.grad_accum_steps;
    let max_steps = cfg.max_steps.unwrap_or(usize::MAX);

    'epochs: for _ in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..blocks.len()).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(per_step) {
            if history.len() >= max_steps {
                break 'epochs;
            }
            grad.iter_mut().for_each(|g| *g = 0.0);
            let micro: Vec<&[usize]> = chunk.chunks(cfg.batch_size).collect();
            let mut sums = vec![0.0; exits.len()];
            for mb in &micro {
                let batch: Vec<Vec<TokenId>> = mb.iter().map(|&i| blocks[i].clone()).collect();
                let lb = model.loss_and_grad(&batch, &exits, &mut grad)?;
                for (s, (_, l)) in sums.iter_mut().zip(&lb.per_layer) {
                    *s += l;
                }
            }
            let scale = 1.0 / micro.len() as f64;
            grad.iter_mut().for_each(|g| *g *= scale);
            let per_layer: Vec<(usize, f64)> = exits
                .iter()
                .zip(&sums)
                .map(|(&(l, _), s)| (l, s * scale))
                .collect();
            let step = history.len() + 1;
            let agg = aggregated_loss(&per_layer, ws)?;
            let grad_norm = clip_grad_norm(&mut grad, cfg.grad_clip);
            if !agg.is_finite() || !grad_norm.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step,
                    detail: format!("per-layer losses {per_layer:?}, grad norm {grad_norm}"),
                });
            }
            opt.step(model.params_mut(), &grad, cfg.learning_rate);
            let rec = LossRecord {
                step,
                aggregated_loss: agg,
                per_layer,
            };
            on_step(&rec);
            history.push(rec);
        }
    }
    Ok(history)
}

/// Mean cross-entropy at every exit layer on held-out blocks.
pub fn evaluate_exit_losses(
    model: &Transformer,
    blocks: &[Vec<TokenId>],
    sched: &ExitSchedule,
) -> Result<Vec<(usize, f64)>> {
    let lb = model.exit_losses(blocks, sched.layers())?;
    Ok(lb.per_layer)
}

pub fn loss_history_csv(history: &[LossRecord]) -> String {
    let mut out = String::from("step,aggregated_loss");
    if let Some(first) = history.first() {
        for (l, _) in &first.per_layer {
            let _ = write!(out, ",loss_layer_{l}");
        }
    }
    out.push('\n');
    for r in history {
        let _ = write!(out, "{},{}", r.step, r.aggregated_loss);
        for (_, v) in &r.per_layer {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

pub fn write_loss_history(path: &Path, history: &[LossRecord]) -> Result<()> {
    fs::write(path, loss_history_csv(history)).map_err(|e| Error::io(path, e))
}
