//! Decoder-only transformer whose forward pass can stop at any layer and
//! decode that layer's hidden state through the single shared LM head.
//!
//! Blocks are pre-norm (LayerNorm → causal MHA → residual, LayerNorm → GELU
//! MLP → residual) over learned token and position embeddings. The head is a
//! final LayerNorm followed by one vocabulary projection; it is applied
//! unchanged to the output of whichever layer the caller stops at.
//!
//! All parameters live in one flat `f64` buffer described by [`Layout`], which
//! keeps the optimizer, gradient checks and checkpointing trivial.

mod checkpoint;
mod infer;
mod train;

use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{Array1, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::{TokenId, VOCAB_SIZE};
use crate::error::{Error, Result};

pub use checkpoint::{Checkpoint, CheckpointKind, CHECKPOINT_VERSION};
pub use infer::{KVCache, TokenPass};
pub use train::LossBreakdown;

pub(crate) const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub ffn_mult: usize,
    pub max_seq: usize,
    pub vocab_size: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 8,
            d_model: 128,
            n_heads: 4,
            ffn_mult: 4,
            max_seq: 512,
            vocab_size: VOCAB_SIZE,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers < 2 {
            return Err(Error::config(format!("n_layers = {} < 2", self.n_layers)));
        }
        if self.n_heads == 0 || self.d_model == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.ffn_mult == 0 || self.max_seq == 0 || self.vocab_size == 0 {
            return Err(Error::config("ffn_mult, max_seq and vocab_size must be positive"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn ffn_dim(&self) -> usize {
        self.d_model * self.ffn_mult
    }
}

/// A residual-stream vector taken after `layer_index` blocks (1-based).
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenState {
    pub values: Vec<f64>,
    pub layer_index: usize,
    pub token_position: usize,
}

impl HiddenState {
    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenPrediction {
    pub token_id: TokenId,
    pub logits_argmax_source_layer: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Slot {
    pub off: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Slot {
    fn len(&self) -> usize {
        self.rows * self.cols
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct LayerSlots {
    pub ln1_g: Slot,
    pub ln1_b: Slot,
    pub w_qkv: Slot,
    pub b_qkv: Slot,
    pub w_o: Slot,
    pub b_o: Slot,
    pub ln2_g: Slot,
    pub ln2_b: Slot,
    pub w_fc1: Slot,
    pub b_fc1: Slot,
    pub w_fc2: Slot,
    pub b_fc2: Slot,
}

/// Offsets of every tensor inside the flat parameter buffer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct Layout {
    pub tok_emb: Slot,
    pub pos_emb: Slot,
    pub layers: Vec<LayerSlots>,
    pub lnf_g: Slot,
    pub lnf_b: Slot,
    pub w_head: Slot,
    pub b_head: Slot,
    pub total: usize,
}

impl Layout {
    fn new(cfg: &ModelConfig) -> Self {
        let mut off = 0;
        let mut slot = |rows: usize, cols: usize| {
            let s = Slot { off, rows, cols };
            off += rows * cols;
            s
        };
        let d = cfg.d_model;
        let f = cfg.ffn_dim();
        let tok_emb = slot(cfg.vocab_size, d);
        let pos_emb = slot(cfg.max_seq, d);
        let layers = (0..cfg.n_layers)
            .map(|_| LayerSlots {
                ln1_g: slot(1, d),
                ln1_b: slot(1, d),
                w_qkv: slot(d, 3 * d),
                b_qkv: slot(1, 3 * d),
                w_o: slot(d, d),
                b_o: slot(1, d),
                ln2_g: slot(1, d),
                ln2_b: slot(1, d),
                w_fc1: slot(d, f),
                b_fc1: slot(1, f),
                w_fc2: slot(f, d),
                b_fc2: slot(1, d),
            })
            .collect();
        let lnf_g = slot(1, d);
        let lnf_b = slot(1, d);
        let w_head = slot(d, cfg.vocab_size);
        let b_head = slot(1, cfg.vocab_size);
        Self {
            tok_emb,
            pos_emb,
            layers,
            lnf_g,
            lnf_b,
            w_head,
            b_head,
            total: off,
        }
    }
}

pub(crate) fn mat(buf: &[f64], s: Slot) -> ArrayView2<'_, f64> {
    ArrayView2::from_shape((s.rows, s.cols), &buf[s.off..s.off + s.len()]).expect("slot shape")
}

pub(crate) fn mat_mut(buf: &mut [f64], s: Slot) -> ArrayViewMut2<'_, f64> {
    ArrayViewMut2::from_shape((s.rows, s.cols), &mut buf[s.off..s.off + s.len()]).expect("slot shape")
}

pub(crate) fn vec1(buf: &[f64], s: Slot) -> ArrayView1<'_, f64> {
    ArrayView1::from(&buf[s.off..s.off + s.len()])
}

pub(crate) fn vec1_mut(buf: &mut [f64], s: Slot) -> ArrayViewMut1<'_, f64> {
    ArrayViewMut1::from(&mut buf[s.off..s.off + s.len()])
}

#[derive(Debug)]
pub struct Transformer {
    cfg: ModelConfig,
    layout: Layout,
    params: Vec<f64>,
    layer_executions: AtomicU64,
    propagated_rows: AtomicU64,
}

impl Clone for Transformer {
    fn clone(&self) -> Self {
        Self {
            cfg: self.cfg.clone(),
            layout: self.layout.clone(),
            params: self.params.clone(),
            layer_executions: AtomicU64::new(self.layer_executions()),
            propagated_rows: AtomicU64::new(self.propagated_rows()),
        }
    }
}

impl Transformer {
    /// Randomly initialized model (GPT-2 style: N(0, 0.02), residual
    /// projections scaled by 1/sqrt(2·n_layers), unit LayerNorm gains).
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let layout = Layout::new(&cfg);
        let mut params = vec![0.0; layout.total];
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let std = 0.02;
        let normal = Normal::new(0.0, std).expect("valid std");
        let resid = Normal::new(0.0, std / (2.0 * cfg.n_layers as f64).sqrt()).expect("valid std");

        let mut fill = |params: &mut [f64], s: Slot, dist: &Normal<f64>| {
            for v in &mut params[s.off..s.off + s.len()] {
                *v = dist.sample(&mut rng);
            }
        };
        fill(&mut params, layout.tok_emb, &normal);
        fill(&mut params, layout.pos_emb, &normal);
        for l in &layout.layers {
            fill(&mut params, l.w_qkv, &normal);
            fill(&mut params, l.w_o, &resid);
            fill(&mut params, l.w_fc1, &normal);
            fill(&mut params, l.w_fc2, &resid);
        }
        fill(&mut params, layout.w_head, &normal);
        for s in layout
            .layers
            .iter()
            .flat_map(|l| [l.ln1_g, l.ln2_g])
            .chain([layout.lnf_g])
        {
            params[s.off..s.off + s.len()].fill(1.0);
        }
        Ok(Self::from_parts(cfg, layout, params))
    }

    fn from_parts(cfg: ModelConfig, layout: Layout, params: Vec<f64>) -> Self {
        Self {
            cfg,
            layout,
            params,
            layer_executions: AtomicU64::new(0),
            propagated_rows: AtomicU64::new(0),
        }
    }

    pub fn from_params(cfg: ModelConfig, params: Vec<f64>) -> Result<Self> {
        cfg.validate()?;
        let layout = Layout::new(&cfg);
        if params.len() != layout.total {
            return Err(Error::DimensionMismatch {
                expected: layout.total,
                got: params.len(),
            });
        }
        Ok(Self::from_parts(cfg, layout, params))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn n_layers(&self) -> usize {
        self.cfg.n_layers
    }

    pub fn d_model(&self) -> usize {
        self.cfg.d_model
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.layout.total
    }

    /// Number of (token, layer) block executions since the last reset. Each
    /// layer run for the token being produced counts once; recomputation of
    /// earlier cached positions is tracked by [`Self::propagated_rows`].
    pub fn layer_executions(&self) -> u64 {
        self.layer_executions.load(Ordering::Relaxed)
    }

    pub fn propagated_rows(&self) -> u64 {
        self.propagated_rows.load(Ordering::Relaxed)
    }

    pub fn reset_counters(&self) {
        self.layer_executions.store(0, Ordering::Relaxed);
        self.propagated_rows.store(0, Ordering::Relaxed);
    }

    pub(crate) fn count_layer(&self) {
        self.layer_executions.fetch_add(1, Ordering::Relaxed);
    }

    pub(crate) fn count_propagated(&self, rows: usize) {
        self.propagated_rows.fetch_add(rows as u64, Ordering::Relaxed);
    }

    pub(crate) fn check_tokens(&self, tokens: &[TokenId]) -> Result<()> {
        if tokens.len() > self.cfg.max_seq {
            return Err(Error::ContextOverflow {
                len: tokens.len(),
                max_seq: self.cfg.max_seq,
            });
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= self.cfg.vocab_size) {
            return Err(Error::config(format!(
                "token id {bad} outside vocabulary of {}",
                self.cfg.vocab_size
            )));
        }
        Ok(())
    }

    /// Logits for a hidden state from any layer. The layer index is metadata
    /// only; one LayerNorm + projection serves every exit.
    pub fn decode_head(&self, h: &HiddenState) -> Result<Vec<f64>> {
        if h.values.len() != self.cfg.d_model {
            return Err(Error::DimensionMismatch {
                expected: self.cfg.d_model,
                got: h.values.len(),
            });
        }
        if !h.is_finite() {
            return Err(Error::config("hidden state contains non-finite values"));
        }
        Ok(self.head_logits(ArrayView1::from(&h.values[..])).to_vec())
    }

    pub(crate) fn head_logits(&self, x: ArrayView1<'_, f64>) -> Array1<f64> {
        let p = &self.params;
        let l = &self.layout;
        let z = layer_norm_row(x, vec1(p, l.lnf_g), vec1(p, l.lnf_b));
        z.dot(&mat(p, l.w_head)) + vec1(p, l.b_head)
    }

    pub fn predict(&self, h: &HiddenState) -> Result<TokenPrediction> {
        let logits = self.decode_head(h)?;
        Ok(TokenPrediction {
            token_id: argmax(&logits) as TokenId,
            logits_argmax_source_layer: h.layer_index,
        })
    }
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn layer_norm_row(
    x: ArrayView1<'_, f64>,
    g: ArrayView1<'_, f64>,
    b: ArrayView1<'_, f64>,
) -> Array1<f64> {
    let n = x.len() as f64;
    let mean = x.sum() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let rstd = 1.0 / (var + LN_EPS).sqrt();
    let mut out = Array1::zeros(x.len());
    for i in 0..x.len() {
        out[i] = (x[i] - mean) * rstd * g[i] + b[i];
    }
    out
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}
