use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use earlyexit_core::corpus::{self, Corpus, IngestOptions, Split, SplitRatios, TokenId, VOCAB_SIZE};
use earlyexit_core::evalkit::{self, EvalConfig, EvalSample};
use earlyexit_core::exitenv::{self, Action, EpisodeConfig, Environment, LmExitEnv, RewardConfig};
use earlyexit_core::lite::{self, Budgets, ExitSchedule, TrainConfig, WeightSchedule};
use earlyexit_core::model::{Checkpoint, CheckpointKind, ModelConfig, Transformer};
use earlyexit_core::ppo::{self, ExitPolicy, PPOConfig, PolicyArtifact, PolicyNetwork};
use earlyexit_core::serve::{self, ServiceConfig};
use earlyexit_core::synth;
use tracing::info;

use crate::args::*;
use crate::CliError;

const MANIFEST: &str = "artifacts/manifest.json";
const LITE_CKPT: &str = "artifacts/lite.ckpt";
const POLICY_CKPT: &str = "artifacts/policy.ckpt.json";
const POLICY: &str = "artifacts/policy.json";

fn path_or(p: Option<PathBuf>, default: &str) -> PathBuf {
    p.unwrap_or_else(|| PathBuf::from(default))
}

fn ensure_parent(path: &Path) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)
            .map_err(|e| CliError::Usage(format!("cannot create {}: {e}", dir.display())))?;
    }
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    ensure_parent(path)?;
    fs::write(path, text).map_err(|e| CliError::Usage(format!("cannot write {}: {e}", path.display())))
}

fn triple(v: &[f64], what: &str) -> Result<[f64; 3], CliError> {
    v.try_into()
        .map_err(|_| CliError::Usage(format!("{what} takes exactly three comma-separated values, got {}", v.len())))
}

pub fn synth_corpus(a: SynthCorpusArgs) -> Result<(), CliError> {
    let out = path_or(a.out, "corpus");
    let files = a.files.unwrap_or(200);
    synth::write_corpus(&out, files, a.seed.unwrap_or(1))?;
    info!(dir = %out.display(), files, "synthetic corpus written");
    Ok(())
}

pub fn ingest(a: IngestArgs) -> Result<(), CliError> {
    let dir = a
        .corpus_dir
        .ok_or_else(|| CliError::Usage("--corpus-dir (or ingest.corpus_dir) is required".into()))?;
    let d = IngestOptions::default();
    let ratios = match a.split_ratios {
        Some(v) => {
            let [tr, va, te] = triple(&v, "--split-ratios")?;
            SplitRatios::new(tr, va, te)?
        }
        None => d.ratios,
    };
    let opts = IngestOptions {
        extensions: a.extensions.unwrap_or(d.extensions),
        ratios,
        seed: a.seed.unwrap_or(d.seed),
        min_tokens: a.min_tokens.unwrap_or(d.min_tokens),
    };
    let c = corpus::ingest(&dir, &opts)?;
    let manifest = path_or(a.manifest, MANIFEST);
    ensure_parent(&manifest)?;
    c.manifest().write(&manifest)?;
    info!(
        manifest = %manifest.display(),
        train = c.count(Split::Train),
        validation = c.count(Split::Validation),
        test = c.count(Split::Test),
        dropped = c.dropped,
        "ingested"
    );
    Ok(())
}

fn blocks(c: &Corpus, split: Split, block_len: usize) -> Result<Vec<Vec<TokenId>>, CliError> {
    let ids = c.split(split).into_iter().map(|s| s.token_ids.as_slice());
    Ok(corpus::pack_training_blocks(ids, block_len)?)
}

pub fn train_lite(a: TrainLiteArgs) -> Result<(), CliError> {
    let corpus = Corpus::load(&path_or(a.manifest, MANIFEST))?;
    let seed = a.seed.unwrap_or(0);
    let dm = ModelConfig::default();
    let mcfg = ModelConfig {
        n_layers: a.n_layers.unwrap_or(dm.n_layers),
        d_model: a.d_model.unwrap_or(dm.d_model),
        n_heads: a.n_heads.unwrap_or(dm.n_heads),
        ffn_mult: a.ffn_mult.unwrap_or(dm.ffn_mult),
        max_seq: a.max_seq.unwrap_or(dm.max_seq),
        vocab_size: VOCAB_SIZE,
        seed,
    };
    let schedule = ExitSchedule::build(
        mcfg.n_layers,
        a.earliest_exit.unwrap_or(2),
        a.first_half_stride.unwrap_or(2),
        a.second_half_stride.unwrap_or(2),
    )?;
    let base = a.base.unwrap_or(false);
    let budgets = match (base, a.budgets) {
        (true, Some(_)) => return Err(CliError::Usage("--base and --budgets are mutually exclusive".into())),
        (true, None) => Budgets::final_only(),
        (false, Some(v)) => {
            let [first_half, second_half, final_layer] = triple(&v, "--budgets")?;
            Budgets { first_half, second_half, final_layer }
        }
        (false, None) => Budgets::default(),
    };
    let weights = WeightSchedule::build(&schedule, budgets, a.decay.unwrap_or(0.9))?;
    let dt = TrainConfig::default();
    let tcfg = TrainConfig {
        learning_rate: a.learning_rate.unwrap_or(dt.learning_rate),
        batch_size: a.batch_size.unwrap_or(dt.batch_size),
        grad_accum_steps: a.grad_accum_steps.unwrap_or(dt.grad_accum_steps),
        epochs: a.epochs.unwrap_or(dt.epochs),
        max_steps: a.max_steps.or(dt.max_steps),
        block_len: a.block_len.unwrap_or(dt.block_len.min(mcfg.max_seq + 1)),
        grad_clip: a.grad_clip.unwrap_or(dt.grad_clip),
        seed,
    };
    let train_blocks = blocks(&corpus, Split::Train, tcfg.block_len)?;
    let mut model = Transformer::new(mcfg)?;
    info!(
        params = model.param_count(),
        schedule = ?schedule.layers(),
        blocks = train_blocks.len(),
        base,
        "training"
    );
    let every = a.log_every.unwrap_or(10).max(1);
    let history = lite::train_lite(&mut model, &train_blocks, &schedule, &weights, &tcfg, |r| {
        if r.step % every == 0 {
            info!(step = r.step, aggregated_loss = r.aggregated_loss, "step");
        }
    })?;
    let val = blocks(&corpus, Split::Validation, tcfg.block_len)?;
    if !val.is_empty() {
        let losses = lite::evaluate_exit_losses(&model, &val, &schedule)?;
        info!(per_layer = ?losses, "validation loss");
    }
    let loss_path = path_or(a.loss_history, "artifacts/loss_history.csv");
    ensure_parent(&loss_path)?;
    lite::write_loss_history(&loss_path, &history)?;
    let out = path_or(a.out, LITE_CKPT);
    ensure_parent(&out)?;
    let kind = if base { CheckpointKind::Base } else { CheckpointKind::Lite };
    Checkpoint { kind, model, schedule, weights }.save(&out)?;
    info!(checkpoint = %out.display(), steps = history.len(), "saved");
    Ok(())
}

pub fn train_rl(a: TrainRlArgs) -> Result<(), CliError> {
    let ck = Checkpoint::load(&path_or(a.checkpoint, LITE_CKPT))?;
    let corpus = Corpus::load(&path_or(a.manifest, MANIFEST))?;
    let seed = a.seed.unwrap_or(0);
    let p = match a.preset.unwrap_or(Preset::Large) {
        Preset::Large => PPOConfig::large(),
        Preset::Small => PPOConfig::small(),
    };
    let pcfg = PPOConfig {
        total_steps: a.total_steps.unwrap_or(p.total_steps),
        rollout_buffer_size: a.rollout_buffer_size.unwrap_or(p.rollout_buffer_size),
        minibatch_size: a.minibatch_size.unwrap_or(p.minibatch_size),
        epochs_per_update: a.epochs_per_update.unwrap_or(p.epochs_per_update),
        learning_rate: a.learning_rate.unwrap_or(p.learning_rate),
        hidden_layers: a.hidden_layers.unwrap_or(p.hidden_layers),
        hidden_units: a.hidden_units.unwrap_or(p.hidden_units),
        seed,
        ..p
    };
    let de = EpisodeConfig::default();
    let ep = EpisodeConfig {
        tokens_per_episode: a.tokens_per_episode.unwrap_or(de.tokens_per_episode),
        max_context: a.max_context.unwrap_or(de.max_context),
        ..de
    };
    let dr = RewardConfig::default();
    let rewards = RewardConfig {
        alpha: a.alpha.unwrap_or(dr.alpha),
        beta: a.beta.unwrap_or(dr.beta),
        gamma: a.gamma.unwrap_or(dr.gamma),
        epsilon: a.epsilon.unwrap_or(dr.epsilon),
    };
    let samples: Vec<Vec<TokenId>> = corpus.split(Split::Train).iter().map(|s| s.token_ids.clone()).collect();
    let model = Arc::new(ck.model);
    let mut env = LmExitEnv::new(model, ck.schedule, samples, ep, rewards, seed)?;
    info!(config = ?pcfg, "training policy");
    let out = ppo::train(&mut env, &pcfg, |steps, d, c| {
        info!(
            steps,
            policy_loss = d.policy_loss,
            value_loss = d.value_loss,
            entropy = d.entropy,
            clip_fraction = d.clip_fraction,
            moving_average = c.map(|c| c.moving_average),
            "update"
        );
    })?;
    info!(opt_histogram = ?env.opt_histogram(), best_moving_average = out.best_moving_average, "finished");

    let policy = match a.keep.unwrap_or(Keep::Best) {
        Keep::Best => &out.best,
        Keep::Last => &out.last,
    };
    let dest = path_or(a.out, POLICY_CKPT);
    ensure_parent(&dest)?;
    policy.save(&dest)?;
    let curve = path_or(a.reward_curve, "artifacts/reward_curve.csv");
    ensure_parent(&curve)?;
    ppo::write_reward_curve(&curve, &out.curve)?;

    let mut trace = Vec::new();
    for _ in 0..a.trace_episodes.unwrap_or(1) {
        let mut obs = env.reset()?;
        loop {
            let p = policy.action_probs(&obs.hidden);
            let action = if p[1] >= 0.5 { Action::Exit } else { Action::Continue };
            let step = env.step(action)?;
            obs = step.observation;
            if step.done {
                break;
            }
        }
        if let Some(c) = env.cursor() {
            trace.extend_from_slice(c.trace());
        }
    }
    let trace_path = path_or(a.trace, "artifacts/episode_trace.jsonl");
    ensure_parent(&trace_path)?;
    exitenv::write_trace(&trace_path, &trace)?;
    info!(policy = %dest.display(), curve = %curve.display(), "saved");
    Ok(())
}

pub fn export_policy(a: ExportPolicyArgs) -> Result<(), CliError> {
    let net = PolicyNetwork::load(&path_or(a.policy_checkpoint, POLICY_CKPT))?;
    let out = path_or(a.out, POLICY);
    ensure_parent(&out)?;
    ppo::export_policy(&net).save(&out)?;
    info!(artifact = %out.display(), input_dim = net.input_dim(), "exported");
    Ok(())
}

struct Prepared {
    ck: Checkpoint,
    samples: Vec<EvalSample>,
    cfg: EvalConfig,
    keywords: HashSet<String>,
    svg: bool,
}

fn prepare(c: SampleArgs, cfg: EvalConfig) -> Result<Prepared, CliError> {
    let ck = Checkpoint::load(&path_or(c.checkpoint, LITE_CKPT))?;
    let corpus = Corpus::load(&path_or(c.manifest, MANIFEST))?;
    let d = EvalConfig::default();
    let cfg = EvalConfig {
        n_samples: c.n_samples.unwrap_or(d.n_samples),
        context_fraction: c.context_fraction.unwrap_or(d.context_fraction),
        max_new: c.max_new.unwrap_or(d.max_new),
        max_context: c.max_context.unwrap_or(d.max_context),
        kv_cache: c.kv_cache.unwrap_or(d.kv_cache),
        keyword_weight: c.keyword_weight.unwrap_or(d.keyword_weight),
        seed: c.seed.unwrap_or(d.seed),
        ..cfg
    };
    let split = match c.split.unwrap_or(EvalSplit::Test) {
        EvalSplit::Test => Split::Test,
        EvalSplit::Validation => Split::Validation,
    };
    let pool = corpus.split(split);
    let samples = evalkit::build_eval_samples(&pool, &cfg, ck.model.config().max_seq)?;
    if samples.is_empty() {
        return Err(CliError::Usage(format!("no usable samples in the {split:?} split")));
    }
    let keywords = match &c.keywords {
        Some(p) => evalkit::load_keywords(p)?,
        None => evalkit::python_keywords(),
    };
    info!(samples = samples.len(), schedule = ?ck.schedule.layers(), "prepared");
    Ok(Prepared { ck, samples, cfg, keywords, svg: c.svg.unwrap_or(false) })
}

pub fn eval(a: EvalArgs) -> Result<(), CliError> {
    let d = EvalConfig::default();
    let base_cfg = EvalConfig {
        thresholds: a.thresholds.unwrap_or(d.thresholds.clone()),
        warmup: a.warmup.unwrap_or(d.warmup),
        ..d
    };
    let p = prepare(a.common, base_cfg)?;
    let policy = ExitPolicy::from_artifact(&PolicyArtifact::load(&path_or(a.policy, POLICY))?)?;
    let base = match &a.base_checkpoint {
        Some(path) => {
            let b = Checkpoint::load(path)?;
            if b.kind != CheckpointKind::Base {
                tracing::warn!(path = %path.display(), "base checkpoint was trained with intermediate exit losses");
            }
            Some(b.model)
        }
        None => {
            tracing::warn!("no --base-checkpoint given; the base-full row is omitted");
            None
        }
    };
    let report = evalkit::run_benchmark(
        &p.ck.model,
        base.as_ref(),
        &p.ck.schedule,
        &policy,
        &p.samples,
        &p.cfg,
        &p.keywords,
    )?;
    let stem = path_or(a.out, "artifacts/report");
    ensure_parent(&stem)?;
    report.write(&stem)?;
    if p.svg {
        write_text(&stem.with_extension("svg"), &report.threshold_svg())?;
    }
    if a.overhead.unwrap_or(false) {
        let units = evalkit::measure_unit_times(&p.ck.model, &policy, &p.samples, &p.cfg)?;
        let rows = evalkit::overhead_harness(&p.ck.model, &p.ck.schedule, &policy, &p.samples, &p.cfg, &units)?;
        let name = format!("{}_overhead.csv", stem.file_name().map_or("report".into(), |n| n.to_string_lossy()));
        write_text(&stem.with_file_name(name), &evalkit::overhead_csv(&rows))?;
        info!(units = ?units, "overhead written");
    }
    print!("{}", report.to_csv());
    info!(report = %stem.display(), rows = report.rows.len(), "evaluated");
    Ok(())
}

pub fn fixed_exit_sweep(a: SweepArgs) -> Result<(), CliError> {
    let p = prepare(a.common, EvalConfig::default())?;
    let sweep = evalkit::fixed_exit_sweep(&p.ck.model, &p.ck.schedule, &p.samples, &p.cfg, &p.keywords)?;
    let out = path_or(a.out, "artifacts/sweep.csv");
    write_text(&out, &sweep.to_csv())?;
    let json = serde_json::to_string_pretty(&sweep).map_err(earlyexit_core::Error::from)?;
    write_text(&out.with_extension("json"), &json)?;
    if p.svg {
        write_text(&out.with_extension("svg"), &sweep.svg())?;
    }
    print!("{}", sweep.to_csv());
    info!(out = %out.display(), proxy_wall_spearman = sweep.proxy_wall_spearman, "sweep written");
    Ok(())
}

pub fn serve(a: ServeArgs) -> Result<(), CliError> {
    let d = ServiceConfig::default();
    let cfg = ServiceConfig {
        bind: a.bind.unwrap_or(d.bind),
        checkpoint: a.checkpoint.unwrap_or(d.checkpoint),
        policy: a.policy.unwrap_or(d.policy),
        default_threshold: a.default_threshold.unwrap_or(d.default_threshold),
        request_timeout_secs: a.request_timeout_secs.unwrap_or(d.request_timeout_secs),
        max_concurrent: a.max_concurrent.unwrap_or(d.max_concurrent),
        default_max_new_tokens: a.default_max_new_tokens.unwrap_or(d.default_max_new_tokens),
        kv_cache: a.kv_cache.unwrap_or(d.kv_cache),
    };
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| CliError::Usage(format!("cannot start runtime: {e}")))?;
    rt.block_on(serve::run(cfg))?;
    Ok(())
}

