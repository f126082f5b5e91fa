//! Full-sequence forward pass with hand-written backward for the weighted
//! multi-exit cross-entropy.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};

use super::{gelu, gelu_grad, mat, mat_mut, vec1, vec1_mut, Transformer, LN_EPS};
use crate::corpus::{TokenId, PAD};
use crate::error::{Error, Result};

/// Mean next-token cross-entropy at each requested exit layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    /// `(layer, loss)` in the order the exits were requested.
    pub per_layer: Vec<(usize, f64)>,
    /// Number of non-PAD target positions the means are taken over.
    pub tokens: usize,
}

pub(crate) struct BlockCache {
    xhat1: Array2<f64>,
    rstd1: Array1<f64>,
    a: Array2<f64>,
    qkv: Array2<f64>,
    probs: Vec<Array2<f64>>,
    ctx: Array2<f64>,
    xhat2: Array2<f64>,
    rstd2: Array1<f64>,
    m: Array2<f64>,
    hpre: Array2<f64>,
    hact: Array2<f64>,
}

struct HeadCache {
    xhat: Array2<f64>,
    rstd: Array1<f64>,
    z: Array2<f64>,
}

fn ln_forward(
    x: &Array2<f64>,
    g: ArrayView1<'_, f64>,
    b: ArrayView1<'_, f64>,
) -> (Array2<f64>, Array2<f64>, Array1<f64>) {
    let (rows, d) = x.dim();
    let mut xhat = Array2::zeros((rows, d));
    let mut rstd = Array1::zeros(rows);
    for i in 0..rows {
        let row = x.row(i);
        let mean = row.sum() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let r = 1.0 / (var + LN_EPS).sqrt();
        rstd[i] = r;
        for j in 0..d {
            xhat[[i, j]] = (row[j] - mean) * r;
        }
    }
    let out = &xhat * &g + b;
    (out, xhat, rstd)
}

/// Returns dx and accumulates dg, db.
fn ln_backward(
    dout: &Array2<f64>,
    xhat: &Array2<f64>,
    rstd: &Array1<f64>,
    g: ArrayView1<'_, f64>,
    grad: &mut [f64],
    g_slot: super::Slot,
    b_slot: super::Slot,
) -> Array2<f64> {
    {
        let mut dg = vec1_mut(grad, g_slot);
        dg += &(dout * xhat).sum_axis(Axis(0));
    }
    {
        let mut db = vec1_mut(grad, b_slot);
        db += &dout.sum_axis(Axis(0));
    }
    let dxhat = dout * &g;
    let (rows, d) = dxhat.dim();
    let mut dx = Array2::zeros((rows, d));
    for i in 0..rows {
        let dr = dxhat.row(i);
        let xr = xhat.row(i);
        let mean_d = dr.sum() / d as f64;
        let mean_dx = dr.dot(&xr) / d as f64;
        for j in 0..d {
            dx[[i, j]] = rstd[i] * (dr[j] - mean_d - xr[j] * mean_dx);
        }
    }
    dx
}

fn add_row_sum(grad: &mut [f64], slot: super::Slot, d: &Array2<f64>) {
    let mut b = vec1_mut(grad, slot);
    b += &d.sum_axis(Axis(0));
}

/// grad[slot] += a^T · b
fn add_at_b(grad: &mut [f64], slot: super::Slot, a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) {
    let mut w = mat_mut(grad, slot);
    general_mat_mul(1.0, &a.t(), &b, 1.0, &mut w);
}

impl Transformer {
    pub(crate) fn embed(&self, tokens: &[TokenId], start_pos: usize) -> Array2<f64> {
        let p = &self.params;
        let tok = mat(p, self.layout.tok_emb);
        let pos = mat(p, self.layout.pos_emb);
        let d = self.cfg.d_model;
        let mut x = Array2::zeros((tokens.len(), d));
        for (i, &t) in tokens.iter().enumerate() {
            let mut row = x.row_mut(i);
            row.assign(&tok.row(t as usize));
            row += &pos.row(start_pos + i);
        }
        x
    }

    /// One transformer block over a full causal sequence. `block` is 0-based.
    pub(crate) fn block_forward(
        &self,
        block: usize,
        x: &Array2<f64>,
        keep: bool,
    ) -> (Array2<f64>, Option<BlockCache>) {
        let p = &self.params;
        let ls = &self.layout.layers[block];
        let d = self.cfg.d_model;
        let nh = self.cfg.n_heads;
        let dh = self.cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let n = x.nrows();

        let (a, xhat1, rstd1) = ln_forward(x, vec1(p, ls.ln1_g), vec1(p, ls.ln1_b));
        let qkv = a.dot(&mat(p, ls.w_qkv)) + vec1(p, ls.b_qkv);

        let mut ctx = Array2::zeros((n, d));
        let mut probs = Vec::with_capacity(if keep { nh } else { 0 });
        for h in 0..nh {
            let q = qkv.slice(s![.., h * dh..(h + 1) * dh]);
            let k = qkv.slice(s![.., d + h * dh..d + (h + 1) * dh]);
            let v = qkv.slice(s![.., 2 * d + h * dh..2 * d + (h + 1) * dh]);
            let mut sc = q.dot(&k.t());
            for i in 0..n {
                let mut row = sc.row_mut(i);
                let mut max = f64::NEG_INFINITY;
                for j in 0..=i {
                    row[j] *= scale;
                    max = max.max(row[j]);
                }
                let mut sum = 0.0;
                for j in 0..=i {
                    row[j] = (row[j] - max).exp();
                    sum += row[j];
                }
                for j in 0..=i {
                    row[j] /= sum;
                }
                for j in i + 1..n {
                    row[j] = 0.0;
                }
            }
            ctx.slice_mut(s![.., h * dh..(h + 1) * dh]).assign(&sc.dot(&v));
            if keep {
                probs.push(sc);
            }
        }

        let x1 = x + &(ctx.dot(&mat(p, ls.w_o)) + vec1(p, ls.b_o));
        let (m, xhat2, rstd2) = ln_forward(&x1, vec1(p, ls.ln2_g), vec1(p, ls.ln2_b));
        let hpre = m.dot(&mat(p, ls.w_fc1)) + vec1(p, ls.b_fc1);
        let hact = hpre.mapv(gelu);
        let out = &x1 + &(hact.dot(&mat(p, ls.w_fc2)) + vec1(p, ls.b_fc2));

        let cache = keep.then(|| BlockCache {
            xhat1,
            rstd1,
            a,
            qkv,
            probs,
            ctx,
            xhat2,
            rstd2,
            m,
            hpre,
            hact,
        });
        (out, cache)
    }

    /// Backpropagates through one block; returns d(input).
    fn block_backward(
        &self,
        block: usize,
        c: &BlockCache,
        dout: &Array2<f64>,
        grad: &mut [f64],
    ) -> Array2<f64> {
        let p = &self.params;
        let ls = &self.layout.layers[block];
        let d = self.cfg.d_model;
        let nh = self.cfg.n_heads;
        let dh = self.cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let n = dout.nrows();

        // MLP
        add_at_b(grad, ls.w_fc2, c.hact.view(), dout.view());
        add_row_sum(grad, ls.b_fc2, dout);
        let mut dh_pre = dout.dot(&mat(p, ls.w_fc2).t());
        Zip::from(&mut dh_pre).and(&c.hpre).for_each(|g, &x| *g *= gelu_grad(x));
        add_at_b(grad, ls.w_fc1, c.m.view(), dh_pre.view());
        add_row_sum(grad, ls.b_fc1, &dh_pre);
        let dm = dh_pre.dot(&mat(p, ls.w_fc1).t());
        let dx1 = dout + &ln_backward(&dm, &c.xhat2, &c.rstd2, vec1(p, ls.ln2_g), grad, ls.ln2_g, ls.ln2_b);

        // attention
        add_at_b(grad, ls.w_o, c.ctx.view(), dx1.view());
        add_row_sum(grad, ls.b_o, &dx1);
        let dctx = dx1.dot(&mat(p, ls.w_o).t());
        let mut dqkv = Array2::zeros((n, 3 * d));
        for h in 0..nh {
            let q = c.qkv.slice(s![.., h * dh..(h + 1) * dh]);
            let k = c.qkv.slice(s![.., d + h * dh..d + (h + 1) * dh]);
            let v = c.qkv.slice(s![.., 2 * d + h * dh..2 * d + (h + 1) * dh]);
            let pr = &c.probs[h];
            let dctx_h = dctx.slice(s![.., h * dh..(h + 1) * dh]);
            let dp = dctx_h.dot(&v.t());
            let dv = pr.t().dot(&dctx_h);
            let mut ds = dp;
            for i in 0..n {
                let mut row = ds.row_mut(i);
                let prow = pr.row(i);
                let dot: f64 = (0..=i).map(|j| row[j] * prow[j]).sum();
                for j in 0..n {
                    row[j] = if j <= i { prow[j] * (row[j] - dot) * scale } else { 0.0 };
                }
            }
            let dq = ds.dot(&k);
            let dk = ds.t().dot(&q);
            dqkv.slice_mut(s![.., h * dh..(h + 1) * dh]).assign(&dq);
            dqkv.slice_mut(s![.., d + h * dh..d + (h + 1) * dh]).assign(&dk);
            dqkv.slice_mut(s![.., 2 * d + h * dh..2 * d + (h + 1) * dh]).assign(&dv);
        }
        add_at_b(grad, ls.w_qkv, c.a.view(), dqkv.view());
        add_row_sum(grad, ls.b_qkv, &dqkv);
        let da = dqkv.dot(&mat(p, ls.w_qkv).t());
        dx1 + ln_backward(&da, &c.xhat1, &c.rstd1, vec1(p, ls.ln1_g), grad, ls.ln1_g, ls.ln1_b)
    }

    fn head_forward(&self, x: &Array2<f64>) -> (Array2<f64>, HeadCache) {
        let p = &self.params;
        let l = &self.layout;
        let (z, xhat, rstd) = ln_forward(x, vec1(p, l.lnf_g), vec1(p, l.lnf_b));
        let logits = z.dot(&mat(p, l.w_head)) + vec1(p, l.b_head);
        (logits, HeadCache { xhat, rstd, z })
    }

    /// Turns logits into summed CE over valid targets and (optionally) the
    /// scaled d(logits) in place.
    fn cross_entropy(logits: &mut Array2<f64>, targets: &[TokenId], grad_scale: Option<f64>) -> f64 {
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let mut row = logits.row_mut(i);
            if t == PAD {
                row.fill(0.0);
                continue;
            }
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + sum.ln();
            total += lse - row[t as usize];
            if let Some(sc) = grad_scale {
                row.mapv_inplace(|v| (v - lse).exp() * sc);
                row[t as usize] -= sc;
            }
        }
        total
    }

    fn validate_exits(&self, exits: &[(usize, f64)]) -> Result<()> {
        if exits.is_empty() {
            return Err(Error::config("no exit layers given"));
        }
        for &(layer, w) in exits {
            if layer == 0 || layer > self.cfg.n_layers {
                return Err(Error::config(format!("exit layer {layer} out of range")));
            }
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::config(format!("weight {w} for layer {layer} invalid")));
            }
        }
        if exits.iter().map(|e| e.1).sum::<f64>() <= 0.0 {
            return Err(Error::config("exit weights sum to zero"));
        }
        Ok(())
    }

    /// Per-exit mean cross-entropy over a batch of blocks (input = block[..-1],
    /// target = block[1..], PAD targets masked) without gradients.
    pub fn exit_losses(&self, blocks: &[Vec<TokenId>], layers: &[usize]) -> Result<LossBreakdown> {
        let exits: Vec<(usize, f64)> = layers.iter().map(|&l| (l, 1.0)).collect();
        self.run_batch(blocks, &exits, None)
    }

    /// Accumulates into `grad` the gradient of Σ wᵢ·lossᵢ / Σ wᵢ and returns
    /// the per-exit losses.
    pub fn loss_and_grad(
        &self,
        blocks: &[Vec<TokenId>],
        exits: &[(usize, f64)],
        grad: &mut [f64],
    ) -> Result<LossBreakdown> {
        if grad.len() != self.layout.total {
            return Err(Error::DimensionMismatch {
                expected: self.layout.total,
                got: grad.len(),
            });
        }
        self.run_batch(blocks, exits, Some(grad))
    }

    fn run_batch(
        &self,
        blocks: &[Vec<TokenId>],
        exits: &[(usize, f64)],
        mut grad: Option<&mut [f64]>,
    ) -> Result<LossBreakdown> {
        self.validate_exits(exits)?;
        for b in blocks {
            if b.len() < 2 {
                return Err(Error::config("training block shorter than 2 tokens"));
            }
            self.check_tokens(&b[..b.len() - 1])?;
        }
        let valid: usize = blocks
            .iter()
            .map(|b| b[1..].iter().filter(|&&t| t != PAD).count())
            .sum();
        if valid == 0 {
            return Err(Error::config("batch has no non-PAD targets"));
        }
        let wsum: f64 = exits.iter().map(|e| e.1).sum();
        let top = exits.iter().map(|e| e.0).max().unwrap_or(0);
        let mut sums = vec![0.0; exits.len()];

        for blk in blocks {
            let input = &blk[..blk.len() - 1];
            let targets = &blk[1..];
            let mut x = self.embed(input, 0);
            let mut caches = Vec::with_capacity(top);
            // d(loss)/d(output of layer l), indexed by layer (1-based)
            let mut dx_exit: Vec<Option<Array2<f64>>> = vec![None; top + 1];

            for block in 0..top {
                let (out, cache) = self.block_forward(block, &x, grad.is_some());
                x = out;
                if let Some(c) = cache {
                    caches.push(c);
                }
                let layer = block + 1;
                for (k, &(l, w)) in exits.iter().enumerate() {
                    if l != layer {
                        continue;
                    }
                    let (mut logits, hc) = self.head_forward(&x);
                    let train_this = grad.is_some() && w > 0.0;
                    let sc = (w / wsum) / valid as f64;
                    sums[k] += Self::cross_entropy(&mut logits, targets, train_this.then_some(sc));
                    if train_this {
                        let g = grad.as_deref_mut().expect("grad present");
                        let dx = self.head_backward(&logits, &hc, g);
                        match &mut dx_exit[layer] {
                            Some(acc) => *acc += &dx,
                            slot => *slot = Some(dx),
                        }
                    }
                }
            }

            let Some(g) = grad.as_deref_mut() else { continue };
            let mut dx: Option<Array2<f64>> = None;
            for layer in (1..=top).rev() {
                if let Some(e) = dx_exit[layer].take() {
                    dx = Some(match dx {
                        Some(acc) => acc + e,
                        None => e,
                    });
                }
                if let Some(d) = dx.as_ref() {
                    dx = Some(self.block_backward(layer - 1, &caches[layer - 1], d, g));
                }
            }
            if let Some(d) = dx {
                let tok = self.layout.tok_emb;
                let pos = self.layout.pos_emb;
                for (i, &t) in input.iter().enumerate() {
                    let mut tr = mat_mut(g, tok);
                    let mut row = tr.row_mut(t as usize);
                    row += &d.row(i);
                    let mut pr = mat_mut(g, pos);
                    let mut row = pr.row_mut(i);
                    row += &d.row(i);
                }
            }
        }

        Ok(LossBreakdown {
            per_layer: exits
                .iter()
                .zip(sums)
                .map(|(&(l, _), s)| (l, s / valid as f64))
                .collect(),
            tokens: valid,
        })
    }

    fn head_backward(&self, dlogits: &Array2<f64>, hc: &HeadCache, grad: &mut [f64]) -> Array2<f64> {
        let p = &self.params;
        let l = &self.layout;
        add_at_b(grad, l.w_head, hc.z.view(), dlogits.view());
        add_row_sum(grad, l.b_head, dlogits);
        let dz = dlogits.dot(&mat(p, l.w_head).t());
        ln_backward(&dz, &hc.xhat, &hc.rstd, vec1(p, l.lnf_g), grad, l.lnf_g, l.lnf_b)
    }

    /// Hidden states of every position after layers `1..=stop_layer`, computed
    /// over the whole sequence without a cache.
    #[cfg(test)]
    pub(crate) fn full_hidden(&self, tokens: &[TokenId], stop_layer: usize) -> Vec<Array2<f64>> {
        let mut x = self.embed(tokens, 0);
        let mut out = Vec::with_capacity(stop_layer);
        for block in 0..stop_layer {
            x = self.block_forward(block, &x, false).0;
            out.push(x.clone());
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::super::ModelConfig;
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            d_model: 16,
            n_heads: 2,
            ffn_mult: 2,
            max_seq: 16,
            vocab_size: 32,
            seed: 11,
        }
    }

    /// Central differences on a random subset of coordinates. The weighted
    /// loss is recomputed from scratch with `exit_losses`, independent of the
    /// backward pass.
    #[test]
    fn gradient_matches_finite_differences() {
        let mut m = Transformer::new(tiny_cfg()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        // perturb LN gains/biases so their gradients are non-trivial
        for v in m.params_mut().iter_mut() {
            *v += rng.random_range(-0.05..0.05);
        }
        let blocks: Vec<Vec<TokenId>> = (0..2)
            .map(|_| (0..9).map(|_| rng.random_range(0..32)).collect())
            .collect();
        let exits = [(1usize, 0.7), (2usize, 0.3)];
        let mut grad = vec![0.0; m.param_count()];
        m.loss_and_grad(&blocks, &exits, &mut grad).unwrap();

        let weighted = |m: &Transformer| {
            let lb = m.exit_losses(&blocks, &[1, 2]).unwrap();
            (0.7 * lb.per_layer[0].1 + 0.3 * lb.per_layer[1].1) / 1.0
        };
        let h = 1e-5;
        let mut checked = 0;
        for _ in 0..300 {
            let i = rng.random_range(0..m.param_count());
            let orig = m.params()[i];
            m.params_mut()[i] = orig + h;
            let lp = weighted(&m);
            m.params_mut()[i] = orig - h;
            let lm = weighted(&m);
            m.params_mut()[i] = orig;
            let fd = (lp - lm) / (2.0 * h);
            let denom = fd.abs().max(grad[i].abs());
            if denom < 1e-7 {
                continue;
            }
            let rel = (fd - grad[i]).abs() / denom;
            assert!(rel < 1e-3, "param {i}: analytic {} vs fd {fd} (rel {rel})", grad[i]);
            checked += 1;
        }
        assert!(checked > 100);
    }

    #[test]
    fn pad_targets_are_masked() {
        let m = Transformer::new(tiny_cfg()).unwrap();
        let a = m.exit_losses(&[vec![1, 2, 3]], &[2]).unwrap();
        let mut cfg = tiny_cfg();
        cfg.vocab_size = 300;
        let m2 = Transformer::new(cfg).unwrap();
        let b = m2.exit_losses(&[vec![1, 2, 3, PAD, PAD]], &[2]).unwrap();
        assert_eq!(a.tokens, 2);
        assert_eq!(b.tokens, 2);
    }

    #[test]
    fn zero_weight_exit_gets_no_gradient_but_is_reported() {
        let m = Transformer::new(tiny_cfg()).unwrap();
        let blocks = vec![vec![1, 5, 7, 9, 2]];
        let mut g_only_final = vec![0.0; m.param_count()];
        let lb = m
            .loss_and_grad(&blocks, &[(1, 0.0), (2, 1.0)], &mut g_only_final)
            .unwrap();
        let mut g_final = vec![0.0; m.param_count()];
        let lb2 = m.loss_and_grad(&blocks, &[(2, 1.0)], &mut g_final).unwrap();
        assert_eq!(g_only_final, g_final);
        assert_eq!(lb.per_layer[1].1, lb2.per_layer[0].1);
        assert!(lb.per_layer[0].1 > 0.0);
    }
}
