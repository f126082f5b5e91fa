//! Inference loop that consults the exported exit policy at every non-final
//! exit point and stops as soon as the exit probability clears a threshold.

use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::corpus::{TokenId, EOS};
use crate::error::{Error, Result};
use crate::evalkit::{energy_proxy, EnergyCosts};
use crate::exitenv::Action;
use crate::lite::ExitSchedule;
use crate::model::{HiddenState, KVCache, Transformer};
use crate::ppo::{softmax2, ExitPolicy};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ControllerConfig {
    pub threshold: f64,
    pub softmax_temperature: f64,
    pub max_new: usize,
    pub kv_cache: bool,
    /// Stop once EOS is emitted (the EOS token is kept in the output).
    pub stop_at_eos: bool,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            threshold: 0.9,
            softmax_temperature: 1.0,
            max_new: 15,
            kv_cache: false,
            stop_at_eos: true,
        }
    }
}

impl ControllerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::config(format!("threshold {} outside (0, 1)", self.threshold)));
        }
        if !(self.softmax_temperature > 0.0 && self.softmax_temperature.is_finite()) {
            return Err(Error::config("softmax_temperature must be positive"));
        }
        if self.max_new == 0 {
            return Err(Error::config("max_new must be ≥ 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Decision {
    pub action: Action,
    pub p_exit: f64,
}

/// Exit iff `softmax(logits / temperature)[exit] >= threshold`.
pub fn decide(policy: &ExitPolicy, hidden: &[f64], cfg: &ControllerConfig) -> Result<Decision> {
    if hidden.iter().any(|v| !v.is_finite()) {
        return Err(Error::config("hidden state contains non-finite values"));
    }
    let z = policy.logits(hidden)?;
    let t = cfg.softmax_temperature;
    let p_exit = softmax2(&[z[0] / t, z[1] / t])[1];
    let action = if p_exit >= cfg.threshold {
        Action::Exit
    } else {
        Action::Continue
    };
    Ok(Decision { action, p_exit })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenTrace {
    pub token_id: TokenId,
    pub exit_layer: usize,
    /// Exit probability at each consulted exit point, shallowest first.
    pub p_exit: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationResult {
    pub context_len: usize,
    pub token_ids: Vec<TokenId>,
    pub per_token_exit_layer: Vec<usize>,
    pub layers_executed_total: u64,
    /// Policy consultations over all tokens.
    pub controller_checks: u64,
    /// Older positions recomputed to serve deeper attention (cache only).
    pub propagated_rows: u64,
    /// Wall-clock seconds for the whole generation.
    pub latency: f64,
    /// Wall-clock seconds spent inside policy evaluation and gating.
    pub controller_seconds: f64,
    pub energy_proxy: f64,
    pub tokens: Vec<TokenTrace>,
}

impl GenerationResult {
    pub fn write_trace(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_vec_pretty(self)?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn mean_exit_layer(&self) -> f64 {
        if self.per_token_exit_layer.is_empty() {
            return 0.0;
        }
        self.layers_executed_total as f64 / self.per_token_exit_layer.len() as f64
    }
}

fn check_context(model: &Transformer, context: &[TokenId], cfg: &ControllerConfig) -> Result<()> {
    cfg.validate()?;
    if context.is_empty() {
        return Err(Error::config("empty context"));
    }
    // the last generated token is never fed back
    let needed = context.len() + cfg.max_new - 1;
    if needed > model.config().max_seq {
        return Err(Error::ContextOverflow {
            len: needed,
            max_seq: model.config().max_seq,
        });
    }
    Ok(())
}

/// Shared decoding loop. `gate` is asked at every non-final schedule layer
/// and returns `(exit?, p_exit)`; it is timed as controller work.
fn run(
    model: &Transformer,
    schedule: &ExitSchedule,
    context: &[TokenId],
    cfg: &ControllerConfig,
    costs: &EnergyCosts,
    mut gate: impl FnMut(usize, &HiddenState) -> Result<Option<(bool, f64)>>,
) -> Result<GenerationResult> {
    check_context(model, context, cfg)?;
    if schedule.n_layers() != model.n_layers() {
        return Err(Error::config("schedule depth differs from model depth"));
    }
    let start = Instant::now();
    let n = model.n_layers();
    let mut cache = cfg.kv_cache.then(|| KVCache::new(model.config()));
    let mut seq = context.to_vec();
    let mut out = GenerationResult {
        context_len: context.len(),
        token_ids: Vec::new(),
        per_token_exit_layer: Vec::new(),
        layers_executed_total: 0,
        controller_checks: 0,
        propagated_rows: 0,
        latency: 0.0,
        controller_seconds: 0.0,
        energy_proxy: 0.0,
        tokens: Vec::new(),
    };
    let mut checks_per_token = Vec::new();
    for _ in 0..cfg.max_new {
        let mut pass = model.begin_pass(&seq, cache.as_mut())?;
        let mut p_trace = Vec::new();
        let h = loop {
            let h = pass.advance()?;
            let layer = pass.layers_done();
            if layer == n {
                break h;
            }
            if !schedule.contains(layer) {
                continue;
            }
            let t0 = Instant::now();
            let verdict = gate(layer, &h)?;
            out.controller_seconds += t0.elapsed().as_secs_f64();
            if let Some((exit, p)) = verdict {
                p_trace.push(p);
                if exit {
                    break h;
                }
            }
        };
        out.propagated_rows += pass.propagated_rows() as u64;
        drop(pass);
        if cache.as_ref().is_some_and(|c| !c.is_consistent()) {
            return Err(Error::Malformed {
                what: "kv cache",
                detail: format!("depth invariant broken after {} tokens", out.token_ids.len()),
            });
        }
        let exit_layer = h.layer_index;
        let token = model.predict(&h)?.token_id;
        out.controller_checks += p_trace.len() as u64;
        out.layers_executed_total += exit_layer as u64;
        checks_per_token.push(p_trace.len());
        out.per_token_exit_layer.push(exit_layer);
        out.token_ids.push(token);
        out.tokens.push(TokenTrace {
            token_id: token,
            exit_layer,
            p_exit: p_trace,
        });
        seq.push(token);
        if cfg.stop_at_eos && token == EOS {
            break;
        }
    }
    out.latency = start.elapsed().as_secs_f64();
    out.energy_proxy = energy_proxy(&out.per_token_exit_layer, &checks_per_token, costs);
    Ok(out)
}

/// Dynamic early-exit generation driven by the exported policy.
pub fn generate(
    model: &Transformer,
    schedule: &ExitSchedule,
    policy: &ExitPolicy,
    context: &[TokenId],
    cfg: &ControllerConfig,
) -> Result<GenerationResult> {
    generate_with_costs(model, schedule, policy, context, cfg, &EnergyCosts::default())
}

pub fn generate_with_costs(
    model: &Transformer,
    schedule: &ExitSchedule,
    policy: &ExitPolicy,
    context: &[TokenId],
    cfg: &ControllerConfig,
    costs: &EnergyCosts,
) -> Result<GenerationResult> {
    if policy.input_dim() != model.d_model() {
        return Err(Error::DimensionMismatch {
            expected: model.d_model(),
            got: policy.input_dim(),
        });
    }
    run(model, schedule, context, cfg, costs, |_, h| {
        let d = decide(policy, &h.values, cfg)?;
        Ok(Some((d.action == Action::Exit, d.p_exit)))
    })
}

/// Decodes every token at `exit_layer`; no policy involved.
pub fn fixed_exit_generate(
    model: &Transformer,
    schedule: &ExitSchedule,
    context: &[TokenId],
    exit_layer: usize,
    cfg: &ControllerConfig,
) -> Result<GenerationResult> {
    if !schedule.contains(exit_layer) {
        return Err(Error::NotAnExitLayer {
            layer: exit_layer,
            schedule: schedule.layers().to_vec(),
        });
    }
    run(model, schedule, context, cfg, &EnergyCosts::default(), |layer, _| {
        Ok((layer == exit_layer).then_some((true, 1.0)))
    })
}

/// Greedy generation through the final layer.
pub fn full_generate(
    model: &Transformer,
    schedule: &ExitSchedule,
    context: &[TokenId],
    cfg: &ControllerConfig,
) -> Result<GenerationResult> {
    fixed_exit_generate(model, schedule, context, schedule.n_layers(), cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn setup() -> (Transformer, ExitSchedule) {
        let m = Transformer::new(ModelConfig {
            n_layers: 6,
            d_model: 16,
            n_heads: 2,
            ffn_mult: 2,
            max_seq: 64,
            vocab_size: 259,
            seed: 11,
        })
        .unwrap();
        (m, ExitSchedule::build(6, 2, 1, 2).unwrap())
    }

    fn ctx() -> Vec<TokenId> {
        b"def add(a, b):\n    return".iter().map(|&b| TokenId::from(b)).collect()
    }

    fn cfg() -> ControllerConfig {
        ControllerConfig { stop_at_eos: false, ..Default::default() }
    }

    #[test]
    fn decide_rule() {
        let c = |t| ControllerConfig { threshold: t, ..Default::default() };
        let p95 = ExitPolicy::constant(4, 0.95);
        assert_eq!(decide(&p95, &[0.0; 4], &c(0.9)).unwrap().action, Action::Exit);
        let p50 = ExitPolicy::constant(4, 0.5);
        assert_eq!(decide(&p50, &[0.0; 4], &c(0.6)).unwrap().action, Action::Continue);
        assert_eq!(decide(&p50, &[0.0; 4], &c(0.5)).unwrap().action, Action::Exit);
        assert!(matches!(
            decide(&p50, &[0.0; 3], &c(0.5)),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn temperature_sharpens() {
        let p = ExitPolicy::constant(2, 0.8);
        let hot = ControllerConfig { softmax_temperature: 0.5, ..Default::default() };
        let d = decide(&p, &[0.0; 2], &hot).unwrap();
        assert!((d.p_exit - 16.0 / 17.0).abs() < 1e-9);
    }

    #[test]
    fn never_exit_equals_full_generation() {
        let (m, s) = setup();
        let never = ExitPolicy::constant(16, 0.0);
        let cfg = ControllerConfig { threshold: 1.0 - 1e-12, ..cfg() };
        let dynamic = generate(&m, &s, &never, &ctx(), &cfg).unwrap();
        let full = full_generate(&m, &s, &ctx(), &cfg).unwrap();
        assert_eq!(dynamic.token_ids, full.token_ids);
        assert!(dynamic.per_token_exit_layer.iter().all(|&l| l == 6));
        // schedule [2, 3, 5, 6]: three consulted points per token
        assert_eq!(dynamic.controller_checks, 15 * 3);
    }

    #[test]
    fn always_exit_uses_earliest_layer() {
        let (m, s) = setup();
        let always = ExitPolicy::constant(16, 1.0);
        for kv_cache in [false, true] {
            let r = generate(&m, &s, &always, &ctx(), &ControllerConfig { kv_cache, ..cfg() }).unwrap();
            assert!(r.per_token_exit_layer.iter().all(|&l| l == 2));
            assert_eq!(r.layers_executed_total, 2 * 15);
            assert_eq!(r.controller_checks, 15);
            assert_eq!(r.per_token_exit_layer.len(), r.token_ids.len());
        }
    }

    #[test]
    fn layer_total_is_sum_of_exit_layers() {
        let (m, s) = setup();
        let half = ExitPolicy::constant(16, 0.5);
        for t in [0.3, 0.5, 0.7] {
            let r = generate(&m, &s, &half, &ctx(), &ControllerConfig { threshold: t, ..cfg() }).unwrap();
            let sum: usize = r.per_token_exit_layer.iter().sum();
            assert_eq!(r.layers_executed_total, sum as u64);
            assert!(r.per_token_exit_layer.iter().all(|l| s.contains(*l)));
        }
    }

    #[test]
    fn fixed_exit_contract() {
        let (m, s) = setup();
        let fin = fixed_exit_generate(&m, &s, &ctx(), 6, &cfg()).unwrap();
        let full = full_generate(&m, &s, &ctx(), &cfg()).unwrap();
        assert_eq!(fin.token_ids, full.token_ids);
        let early = fixed_exit_generate(&m, &s, &ctx(), 2, &cfg()).unwrap();
        assert!(early.per_token_exit_layer.iter().all(|&l| l == 2));
        assert!(matches!(
            fixed_exit_generate(&m, &s, &ctx(), 1, &cfg()),
            Err(Error::NotAnExitLayer { .. })
        ));
        let mut last = 0.0;
        for &l in s.layers() {
            let e = fixed_exit_generate(&m, &s, &ctx(), l, &cfg()).unwrap().energy_proxy;
            assert!(e > last);
            last = e;
        }
    }

    #[test]
    fn cached_matches_uncached_without_exits() {
        let (m, s) = setup();
        let a = full_generate(&m, &s, &ctx(), &cfg()).unwrap();
        let b = full_generate(&m, &s, &ctx(), &ControllerConfig { kv_cache: true, ..cfg() }).unwrap();
        assert_eq!(a.token_ids, b.token_ids);
    }

    #[test]
    fn overflow_and_empty_context() {
        let (m, s) = setup();
        let long = vec![1; 60];
        assert!(matches!(
            full_generate(&m, &s, &long, &cfg()),
            Err(Error::ContextOverflow { .. })
        ));
        assert!(full_generate(&m, &s, &[], &cfg()).is_err());
        let bad = ExitPolicy::constant(8, 0.5);
        assert!(matches!(
            generate(&m, &s, &bad, &ctx(), &cfg()),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn trace_file() {
        let (m, s) = setup();
        let r = full_generate(&m, &s, &ctx(), &cfg()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("gen.json");
        r.write_trace(&p).unwrap();
        let v: serde_json::Value = serde_json::from_slice(&fs::read(&p).unwrap()).unwrap();
        assert_eq!(v["context_len"], ctx().len());
        assert_eq!(v["per_token_exit_layer"].as_array().unwrap().len(), 15);
    }
}
