use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use earlyexit_core::controller::{self, ControllerConfig};
use earlyexit_core::corpus::{TokenId, VOCAB_SIZE};
use earlyexit_core::evalkit::{bleu, code_tokens, rouge_l};
use earlyexit_core::exitenv::{PlantedEnvConfig, PlantedExitEnv, RewardConfig};
use earlyexit_core::lite::ExitSchedule;
use earlyexit_core::model::{ModelConfig, Transformer};
use earlyexit_core::optim::Adam;
use earlyexit_core::ppo::{self, export_policy, ExitPolicy, PPOConfig, PolicyNetwork, RolloutState};

fn desk_model() -> (Transformer, ExitSchedule) {
    let model = Transformer::new(ModelConfig {
        n_layers: 6,
        d_model: 64,
        n_heads: 4,
        ffn_mult: 4,
        max_seq: 256,
        vocab_size: VOCAB_SIZE,
        seed: 0,
    })
    .unwrap();
    (model, ExitSchedule::build(6, 2, 1, 1).unwrap())
}

fn context(n: usize) -> Vec<TokenId> {
    b"def compute_totals(items, price):\n    result = 0\n    for item in items:\n        result = result + item * price\n    return result\n"
        .iter()
        .cycle()
        .take(n)
        .map(|&b| b as TokenId)
        .collect()
}

fn forward(c: &mut Criterion) {
    let (model, schedule) = desk_model();
    let ctx = context(64);
    let mut g = c.benchmark_group("forward_to_layer");
    for &layer in schedule.layers() {
        g.bench_with_input(BenchmarkId::from_parameter(layer), &layer, |b, &l| {
            b.iter(|| model.forward_to_layer(black_box(&ctx), l, None).unwrap())
        });
    }
    g.finish();
}

fn generation(c: &mut Criterion) {
    let (model, schedule) = desk_model();
    let ctx = context(64);
    let eager = ExitPolicy::constant(model.d_model(), 0.95);
    let mut g = c.benchmark_group("generate_8_tokens");
    g.sample_size(20);
    for kv_cache in [false, true] {
        let cfg = ControllerConfig { max_new: 8, kv_cache, stop_at_eos: false, ..Default::default() };
        let tag = if kv_cache { "cached" } else { "uncached" };
        g.bench_function(format!("full/{tag}"), |b| {
            b.iter(|| controller::full_generate(&model, &schedule, &ctx, &cfg).unwrap())
        });
        g.bench_function(format!("dynamic/{tag}"), |b| {
            b.iter(|| controller::generate(&model, &schedule, &eager, &ctx, &cfg).unwrap())
        });
    }
    g.finish();
}

fn controller_decision(c: &mut Criterion) {
    let policy = ExitPolicy::from_artifact(&export_policy(&PolicyNetwork::new(64, 2, 64, 0))).unwrap();
    let hidden: Vec<f64> = (0..64).map(|i| (i as f64 * 0.37).sin()).collect();
    let cfg = ControllerConfig::default();
    c.bench_function("controller_decide", |b| {
        b.iter(|| controller::decide(&policy, black_box(&hidden), &cfg).unwrap())
    });
}

fn metrics(c: &mut Criterion) {
    let reference = code_tokens(&String::from_utf8(context(400).iter().map(|&t| t as u8).collect()).unwrap());
    let mut candidate = reference.clone();
    candidate.truncate(candidate.len() * 3 / 4);
    candidate.reverse();
    c.bench_function("rouge_l", |b| b.iter(|| rouge_l(black_box(&candidate), &reference)));
    c.bench_function("bleu4", |b| b.iter(|| bleu(black_box(&candidate), &[&reference], 4)));
}

fn ppo_update(c: &mut Criterion) {
    let mut env = PlantedExitEnv::new(PlantedEnvConfig::default(), RewardConfig::default()).unwrap();
    let cfg = PPOConfig::small();
    let policy = PolicyNetwork::new(16, cfg.hidden_layers, cfg.hidden_units, 0);
    let mut state = RolloutState::new(0);
    let mut buf = ppo::collect_rollout(&mut env, &policy, cfg.rollout_buffer_size, &mut state).unwrap();
    buf.compute_advantages(0.0, cfg.discount, cfg.gae_lambda);
    c.bench_function("ppo_update_small", |b| {
        b.iter_batched(
            || (policy.clone(), Adam::with_eps(policy.param_count(), 1e-5), rand_seed()),
            |(mut p, mut opt, mut rng)| ppo::ppo_update(&mut p, &buf, &cfg, &mut opt, cfg.learning_rate, &mut rng).unwrap(),
            criterion::BatchSize::SmallInput,
        )
    });
}

fn rand_seed() -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    rand_chacha::ChaCha8Rng::seed_from_u64(1)
}

criterion_group!(benches, forward, generation, controller_decision, metrics, ppo_update);
criterion_main!(benches);
