//! Layer-by-layer inference for one new token, with or without a KV cache.
//!
//! A [`TokenPass`] advances the newest position one block at a time so a
//! caller can inspect every intermediate hidden state and stop anywhere.
//! With a cache, earlier positions may sit at different depths (they exited
//! early); before block `l` runs, every earlier position still at depth `l-1`
//! is recomputed through block `l` from its stored hidden state, so the cache
//! is always filled to a uniform depth for the layers attention needs.

use ndarray::{s, Array1, Array2};

use super::{gelu, layer_norm_row, mat, vec1, HiddenState, ModelConfig, Transformer};
use crate::corpus::TokenId;
use crate::error::{Error, Result};

/// Per-layer keys/values plus, for every position, how many layers it has
/// been pushed through and the residual state at that depth.
#[derive(Debug, Clone)]
pub struct KVCache {
    n_layers: usize,
    keys: Vec<Array2<f64>>,
    values: Vec<Array2<f64>>,
    depth: Vec<usize>,
    hidden: Array2<f64>,
    tokens: Vec<TokenId>,
}

impl KVCache {
    pub fn new(cfg: &ModelConfig) -> Self {
        let cap = cfg.max_seq;
        let d = cfg.d_model;
        Self {
            n_layers: cfg.n_layers,
            keys: (0..cfg.n_layers).map(|_| Array2::zeros((cap, d))).collect(),
            values: (0..cfg.n_layers).map(|_| Array2::zeros((cap, d))).collect(),
            depth: Vec::with_capacity(cap),
            hidden: Array2::zeros((cap, d)),
            tokens: Vec::with_capacity(cap),
        }
    }

    pub fn len(&self) -> usize {
        self.depth.len()
    }

    pub fn is_empty(&self) -> bool {
        self.depth.is_empty()
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    /// Deepest layer with cached keys/values, per position (0 = embedding only).
    pub fn deepest_layer_cached(&self) -> &[usize] {
        &self.depth
    }

    /// Layers are filled as a prefix per position, so the only failure modes
    /// are depths beyond the model or bookkeeping drift.
    pub fn is_consistent(&self) -> bool {
        self.depth.len() == self.tokens.len() && self.depth.iter().all(|&d| d <= self.n_layers)
    }

    pub fn clear(&mut self) {
        self.depth.clear();
        self.tokens.clear();
    }
}

enum Mode<'a> {
    Full { x: Array2<f64> },
    Cached { cache: &'a mut KVCache, new_rows: usize },
}

/// Forward pass for the last position of a sequence, one layer at a time.
pub struct TokenPass<'a> {
    model: &'a Transformer,
    mode: Mode<'a>,
    layers_done: usize,
    len: usize,
    propagated: usize,
}

impl<'a> TokenPass<'a> {
    /// Rows of older positions recomputed by this pass (cached mode only).
    pub fn propagated_rows(&self) -> usize {
        self.propagated
    }

    pub fn layers_done(&self) -> usize {
        self.layers_done
    }

    pub fn position(&self) -> usize {
        self.len - 1
    }

    pub fn is_finished(&self) -> bool {
        self.layers_done == self.model.n_layers()
    }

    /// Runs the next block and returns the newest position's hidden state.
    pub fn advance(&mut self) -> Result<HiddenState> {
        let model = self.model;
        if self.layers_done >= model.n_layers() {
            return Err(Error::config("all layers already executed"));
        }
        let layer = self.layers_done + 1;
        match &mut self.mode {
            Mode::Full { x } => {
                *x = model.block_forward(layer - 1, x, false).0;
            }
            Mode::Cached { cache, new_rows } => {
                let filled = model.fill_layer(cache, layer, self.len)?;
                let old = filled.saturating_sub(*new_rows);
                self.propagated += old;
                model.count_propagated(old);
            }
        }
        model.count_layer();
        self.layers_done = layer;
        Ok(self.hidden())
    }

    pub fn hidden(&self) -> HiddenState {
        let row = self.len - 1;
        let values = match &self.mode {
            Mode::Full { x } => x.row(row).to_vec(),
            Mode::Cached { cache, .. } => cache.hidden.row(row).to_vec(),
        };
        HiddenState {
            values,
            layer_index: self.layers_done,
            token_position: row,
        }
    }
}

impl Transformer {
    /// Starts a pass whose newest position is `tokens.len() - 1`. With a
    /// cache, `tokens` must extend the cached token prefix; every uncached
    /// position is embedded and advanced together with the newest one.
    pub fn begin_pass<'a>(
        &'a self,
        tokens: &[TokenId],
        cache: Option<&'a mut KVCache>,
    ) -> Result<TokenPass<'a>> {
        if tokens.is_empty() {
            return Err(Error::config("empty input sequence"));
        }
        self.check_tokens(tokens)?;
        let mode = match cache {
            None => Mode::Full {
                x: self.embed(tokens, 0),
            },
            Some(cache) => {
                let have = cache.len();
                if tokens.len() <= have || cache.tokens[..] != tokens[..have] {
                    return Err(Error::config(
                        "tokens must extend the cached prefix by at least one position",
                    ));
                }
                let new = &tokens[have..];
                let emb = self.embed(new, have);
                cache
                    .hidden
                    .slice_mut(s![have..tokens.len(), ..])
                    .assign(&emb);
                cache.tokens.extend_from_slice(new);
                cache.depth.extend(std::iter::repeat_n(0, new.len()));
                Mode::Cached {
                    cache,
                    new_rows: new.len(),
                }
            }
        };
        Ok(TokenPass {
            model: self,
            mode,
            layers_done: 0,
            len: tokens.len(),
            propagated: 0,
        })
    }

    /// Hidden states of the final input position after each of layers
    /// `1..=stop_layer`. Deeper blocks are not executed.
    pub fn forward_to_layer(
        &self,
        input: &[TokenId],
        stop_layer: usize,
        cache: Option<&mut KVCache>,
    ) -> Result<Vec<HiddenState>> {
        if stop_layer == 0 || stop_layer > self.n_layers() {
            return Err(Error::config(format!(
                "stop_layer {stop_layer} outside 1..={}",
                self.n_layers()
            )));
        }
        let mut pass = self.begin_pass(input, cache)?;
        (0..stop_layer).map(|_| pass.advance()).collect()
    }

    /// Brings every position before `position` to at least `needed_layer`
    /// by recomputing the missing blocks from each position's deepest stored
    /// hidden state. Returns the number of (position, layer) rows computed.
    pub fn kv_propagate(&self, cache: &mut KVCache, needed_layer: usize, position: usize) -> Result<usize> {
        if needed_layer > self.n_layers() {
            return Err(Error::config(format!("needed_layer {needed_layer} beyond model depth")));
        }
        let upto = position.min(cache.len());
        let mut rows = 0;
        for layer in 1..=needed_layer {
            rows += self.fill_layer(cache, layer, upto)?;
        }
        self.count_propagated(rows);
        Ok(rows)
    }

    /// Runs block `layer` for every position `< upto` currently at depth
    /// `layer - 1`. Positions must already be at depth ≥ `layer - 1`.
    fn fill_layer(&self, cache: &mut KVCache, layer: usize, upto: usize) -> Result<usize> {
        let rows: Vec<usize> = (0..upto).filter(|&p| cache.depth[p] < layer).collect();
        if rows.is_empty() {
            return Ok(0);
        }
        if let Some(&p) = rows.iter().find(|&&p| cache.depth[p] + 1 < layer) {
            return Err(Error::config(format!(
                "position {p} at depth {} cannot jump to layer {layer}",
                cache.depth[p]
            )));
        }
        let p = &self.params;
        let ls = &self.layout.layers[layer - 1];
        let d = self.cfg.d_model;
        let nh = self.cfg.n_heads;
        let dh = self.cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();

        let mut x = Array2::zeros((rows.len(), d));
        for (i, &pos) in rows.iter().enumerate() {
            x.row_mut(i).assign(&cache.hidden.row(pos));
        }
        let mut a = Array2::zeros((rows.len(), d));
        for i in 0..rows.len() {
            a.row_mut(i)
                .assign(&layer_norm_row(x.row(i), vec1(p, ls.ln1_g), vec1(p, ls.ln1_b)));
        }
        let qkv = a.dot(&mat(p, ls.w_qkv)) + vec1(p, ls.b_qkv);
        {
            let keys = &mut cache.keys[layer - 1];
            let vals = &mut cache.values[layer - 1];
            for (i, &pos) in rows.iter().enumerate() {
                keys.row_mut(pos).assign(&qkv.slice(s![i, d..2 * d]));
                vals.row_mut(pos).assign(&qkv.slice(s![i, 2 * d..3 * d]));
            }
        }

        let keys = &cache.keys[layer - 1];
        let vals = &cache.values[layer - 1];
        let mut ctx = Array2::zeros((rows.len(), d));
        for (i, &pos) in rows.iter().enumerate() {
            for h in 0..nh {
                let cols = h * dh..(h + 1) * dh;
                let q = qkv.slice(s![i, cols.clone()]);
                let k = keys.slice(s![..=pos, cols.clone()]);
                let v = vals.slice(s![..=pos, cols.clone()]);
                let mut sc: Array1<f64> = k.dot(&q) * scale;
                let max = sc.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                sc.mapv_inplace(|z| (z - max).exp());
                let sum = sc.sum();
                sc /= sum;
                ctx.slice_mut(s![i, cols]).assign(&v.t().dot(&sc));
            }
        }
        let x1 = x + &(ctx.dot(&mat(p, ls.w_o)) + vec1(p, ls.b_o));
        let mut m = Array2::zeros((rows.len(), d));
        for i in 0..rows.len() {
            m.row_mut(i)
                .assign(&layer_norm_row(x1.row(i), vec1(p, ls.ln2_g), vec1(p, ls.ln2_b)));
        }
        let hact = (m.dot(&mat(p, ls.w_fc1)) + vec1(p, ls.b_fc1)).mapv(gelu);
        let out = &x1 + &(hact.dot(&mat(p, ls.w_fc2)) + vec1(p, ls.b_fc2));
        for (i, &pos) in rows.iter().enumerate() {
            cache.hidden.row_mut(pos).assign(&out.row(i));
            cache.depth[pos] = layer;
        }
        Ok(rows.len())
    }
}
