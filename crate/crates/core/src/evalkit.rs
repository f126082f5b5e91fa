//! Corpus-level evaluation: ROUGE-L, BLEU and a reduced CodeBLEU, the
//! layer-cost energy proxy, threshold and fixed-exit sweeps, optimal-exit
//! histograms and the controller-overhead harness.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::hash::Hash;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::controller::{self, ControllerConfig, GenerationResult};
use crate::corpus::{make_context_target, CodeSample, TokenId, Tokenizer};
use crate::error::{Error, Result};
use crate::exitenv::exit_point_records;
use crate::lite::ExitSchedule;
use crate::model::Transformer;
use crate::ppo::ExitPolicy;

/// Splits source text into metric tokens: identifier/number runs, single
/// punctuation characters, and one token per whitespace run (`"\n"` when
/// the run contains a newline, `" "` otherwise).
pub fn code_tokens(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut chars = text.chars().peekable();
    while let Some(&c) = chars.peek() {
        if c.is_alphanumeric() || c == '_' {
            let mut word = String::new();
            while let Some(&c) = chars.peek() {
                if c.is_alphanumeric() || c == '_' {
                    word.push(c);
                    chars.next();
                } else {
                    break;
                }
            }
            out.push(word);
        } else if c.is_whitespace() {
            let mut newline = false;
            while let Some(&c) = chars.peek() {
                if c.is_whitespace() {
                    newline |= c == '\n';
                    chars.next();
                } else {
                    break;
                }
            }
            out.push(if newline { "\n".into() } else { " ".into() });
        } else {
            out.push(c.to_string());
            chars.next();
        }
    }
    out
}

fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS-based F1. An empty candidate or reference scores 0.
pub fn rouge_l<T: PartialEq>(candidate: &[T], reference: &[T]) -> f64 {
    if candidate.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let l = lcs_len(candidate, reference) as f64;
    if l == 0.0 {
        return 0.0;
    }
    let p = l / candidate.len() as f64;
    let r = l / reference.len() as f64;
    2.0 * p * r / (p + r)
}

fn ngram_counts<T: Eq + Hash + Clone>(xs: &[T], n: usize) -> HashMap<Vec<T>, usize> {
    let mut m = HashMap::new();
    if xs.len() >= n {
        for w in xs.windows(n) {
            *m.entry(w.to_vec()).or_insert(0) += 1;
        }
    }
    m
}

/// Closest reference length, ties going to the shorter one.
fn closest_ref_len<T>(c: usize, references: &[&[T]]) -> usize {
    references
        .iter()
        .map(|r| r.len())
        .min_by_key(|&r| (r.abs_diff(c), r))
        .unwrap_or(0)
}

/// Clipped n-gram precision as (numerator, denominator); unigrams are
/// weighted by `weight`.
fn clipped_precision<T: Eq + Hash + Clone>(
    candidate: &[T],
    references: &[&[T]],
    n: usize,
    weight: &dyn Fn(&[T]) -> f64,
) -> (f64, f64) {
    let cand = ngram_counts(candidate, n);
    let mut max_ref: HashMap<Vec<T>, usize> = HashMap::new();
    for r in references {
        for (g, c) in ngram_counts(r, n) {
            let e = max_ref.entry(g).or_insert(0);
            *e = (*e).max(c);
        }
    }
    let (mut num, mut den) = (0.0, 0.0);
    for (g, c) in &cand {
        let w = weight(g);
        num += w * (*c).min(max_ref.get(g).copied().unwrap_or(0)) as f64;
        den += w * *c as f64;
    }
    (num, den)
}

fn bleu_core<T: Eq + Hash + Clone>(
    candidate: &[T],
    references: &[&[T]],
    max_n: usize,
    unigram_weight: &dyn Fn(&[T]) -> f64,
) -> f64 {
    if candidate.is_empty() || references.is_empty() || max_n == 0 {
        return 0.0;
    }
    let unit = |_: &[T]| 1.0;
    let mut log_sum = 0.0;
    for n in 1..=max_n {
        let w: &dyn Fn(&[T]) -> f64 = if n == 1 { unigram_weight } else { &unit };
        let (num, den) = clipped_precision(candidate, references, n, w);
        let p = if n == 1 {
            if num == 0.0 {
                return 0.0;
            }
            num / den
        } else if num == 0.0 {
            // add-one smoothing for empty higher-order matches
            1.0 / (den + 1.0)
        } else {
            num / den
        };
        log_sum += p.ln();
    }
    let c = candidate.len() as f64;
    let r = closest_ref_len(candidate.len(), references) as f64;
    let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
    bp * (log_sum / max_n as f64).exp()
}

/// Sentence BLEU with uniform weights, clipped counts against the maximum
/// reference count, brevity penalty against the closest reference length,
/// and add-one smoothing when an order n ≥ 2 has no matches:
/// `p_n = 1 / (candidate n-grams + 1)`.
pub fn bleu<T: Eq + Hash + Clone>(candidate: &[T], references: &[&[T]], max_n: usize) -> f64 {
    bleu_core(candidate, references, max_n, &|_| 1.0)
}

pub const CODEBLEU_LITE_VERSION: &str = "codebleu-lite/1";

pub const PYTHON_KEYWORDS: &[&str] = &[
    "False", "None", "True", "and", "as", "assert", "async", "await", "break", "class", "continue",
    "def", "del", "elif", "else", "except", "finally", "for", "from", "global", "if", "import",
    "in", "is", "lambda", "nonlocal", "not", "or", "pass", "raise", "return", "try", "while",
    "with", "yield",
];

pub fn python_keywords() -> HashSet<String> {
    PYTHON_KEYWORDS.iter().map(|s| s.to_string()).collect()
}

/// One keyword per line; blank lines and `#` comments ignored.
pub fn load_keywords(path: &Path) -> Result<HashSet<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(String::from)
        .collect())
}

/// `0.5 · BLEU + 0.5 · keyword-weighted BLEU`, where the weighted variant
/// counts keyword unigrams `keyword_weight` times. Syntax and dataflow
/// matching are not part of this score.
pub fn codebleu_lite(
    candidate: &[String],
    reference: &[String],
    keywords: &HashSet<String>,
    keyword_weight: f64,
) -> f64 {
    let refs = [reference];
    let plain = bleu(candidate, &refs, 4);
    if keywords.is_empty() {
        tracing::warn!("empty keyword set; codebleu_lite falls back to bleu");
        return plain;
    }
    let weight = |g: &[String]| {
        if keywords.contains(&g[0]) {
            keyword_weight
        } else {
            1.0
        }
    };
    let weighted = bleu_core(candidate, &refs, 4, &weight);
    0.5 * plain + 0.5 * weighted
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnergyCosts {
    pub per_layer: f64,
    pub head: f64,
    pub controller: f64,
}

impl Default for EnergyCosts {
    fn default() -> Self {
        Self {
            per_layer: 1.0,
            head: 1.0,
            controller: 0.01,
        }
    }
}

/// `Σ_tokens exit_layer·per_layer + head + checks·controller`.
pub fn energy_proxy(exit_layers: &[usize], checks: &[usize], costs: &EnergyCosts) -> f64 {
    exit_layers
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            let c = checks.get(i).copied().unwrap_or(0);
            l as f64 * costs.per_layer + costs.head + c as f64 * costs.controller
        })
        .sum()
}

fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut r = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            r[idx[k]] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let (rx, ry) = (ranks(xs), ranks(ys));
    let n = xs.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        return 0.0;
    }
    cov / (vx * vy).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub n_samples: usize,
    pub context_fraction: f64,
    pub max_new: usize,
    pub max_context: usize,
    pub thresholds: Vec<f64>,
    pub kv_cache: bool,
    pub warmup: usize,
    pub keyword_weight: f64,
    pub costs: EnergyCosts,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_samples: 200,
            context_fraction: 0.2,
            max_new: 15,
            max_context: crate::corpus::DEFAULT_MAX_CONTEXT,
            thresholds: vec![0.6, 0.8, 0.9, 0.91, 0.92],
            kv_cache: false,
            warmup: 3,
            keyword_weight: 5.0,
            costs: EnergyCosts::default(),
            seed: 0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.context_fraction > 0.0 && self.context_fraction < 1.0) {
            return Err(Error::config(format!(
                "context_fraction {} outside (0, 1)",
                self.context_fraction
            )));
        }
        if self.n_samples == 0 || self.max_new == 0 {
            return Err(Error::config("n_samples and max_new must be ≥ 1"));
        }
        if let Some(t) = self.thresholds.iter().find(|t| !(**t > 0.0 && **t < 1.0)) {
            return Err(Error::config(format!("threshold {t} outside (0, 1)")));
        }
        Ok(())
    }

    fn controller(&self, threshold: f64) -> ControllerConfig {
        ControllerConfig {
            threshold,
            max_new: self.max_new,
            kv_cache: self.kv_cache,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSample {
    pub source: PathBuf,
    pub context: Vec<TokenId>,
    pub reference: Vec<TokenId>,
}

/// Deterministically picks up to `n_samples` context/reference pairs;
/// files too short for the context fraction are skipped.
pub fn build_eval_samples(samples: &[&CodeSample], cfg: &EvalConfig, model_max_seq: usize) -> Result<Vec<EvalSample>> {
    cfg.validate()?;
    let max_context = cfg.max_context.min(model_max_seq.saturating_sub(cfg.max_new - 1));
    if max_context == 0 {
        return Err(Error::config("max_new leaves no room for context"));
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
    let mut out = Vec::new();
    for i in order {
        if out.len() == cfg.n_samples {
            break;
        }
        let s = samples[i];
        if let Ok(ct) = make_context_target(&s.token_ids, cfg.context_fraction, cfg.max_new, max_context) {
            out.push(EvalSample {
                source: s.source_path.clone(),
                context: ct.context,
                reference: ct.target,
            });
        }
    }
    if out.is_empty() {
        return Err(Error::config("no usable evaluation samples"));
    }
    Ok(out)
}

fn text_tokens(ids: &[TokenId]) -> Vec<String> {
    code_tokens(&Tokenizer.decode_lossy(ids))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub rouge_l: f64,
    pub bleu: f64,
    pub codebleu_lite: f64,
}

pub fn score_pair(generated: &[TokenId], reference: &[TokenId], keywords: &HashSet<String>, keyword_weight: f64) -> Scores {
    let c = text_tokens(generated);
    let r = text_tokens(reference);
    Scores {
        rouge_l: rouge_l(&c, &r),
        bleu: bleu(&c, &[&r], 4),
        codebleu_lite: codebleu_lite(&c, &r, keywords, keyword_weight),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub name: String,
    pub threshold: Option<f64>,
    pub rouge_l: f64,
    pub bleu: f64,
    pub codebleu_lite: f64,
    pub energy_proxy_total: f64,
    /// Joules from a host energy counter, when one is readable.
    pub wall_energy: Option<f64>,
    pub latency_mean: f64,
    /// Mean over requests of generated tokens per second.
    pub throughput: f64,
    pub mean_layers_used: f64,
    pub layers_skipped_fraction: f64,
    pub layers_executed_total: u64,
    pub tokens: usize,
    pub controller_checks: u64,
    pub n_samples: usize,
}

/// Reads a cumulative energy counter in microjoules if the host exposes one.
fn read_energy_uj() -> Option<u64> {
    let p = Path::new("/sys/class/powercap/intel-rapl:0/energy_uj");
    fs::read_to_string(p).ok()?.trim().parse().ok()
}

/// Runs `gen` over every sample (after `warmup` untimed runs) and
/// aggregates scores and efficiency metrics into one row.
pub fn evaluate_rows(
    name: &str,
    threshold: Option<f64>,
    n_layers: usize,
    samples: &[EvalSample],
    cfg: &EvalConfig,
    keywords: &HashSet<String>,
    mut gen: impl FnMut(&EvalSample) -> Result<GenerationResult>,
) -> Result<(ReportRow, Vec<GenerationResult>)> {
    for s in samples.iter().take(cfg.warmup) {
        gen(s)?;
    }
    let e0 = read_energy_uj();
    let mut results = Vec::with_capacity(samples.len());
    let mut sums = Scores::default();
    let (mut energy, mut latency, mut tput, mut layers, mut tokens, mut checks) = (0.0, 0.0, 0.0, 0u64, 0usize, 0u64);
    for s in samples {
        let r = gen(s)?;
        let sc = score_pair(&r.token_ids, &s.reference, keywords, cfg.keyword_weight);
        sums.rouge_l += sc.rouge_l;
        sums.bleu += sc.bleu;
        sums.codebleu_lite += sc.codebleu_lite;
        energy += r.energy_proxy;
        latency += r.latency;
        tput += r.token_ids.len() as f64 / r.latency.max(1e-12);
        layers += r.layers_executed_total;
        tokens += r.token_ids.len();
        checks += r.controller_checks;
        results.push(r);
    }
    let wall_energy = match (e0, read_energy_uj()) {
        (Some(a), Some(b)) if b >= a => Some((b - a) as f64 * 1e-6),
        _ => None,
    };
    let n = samples.len() as f64;
    let mean_layers = layers as f64 / tokens.max(1) as f64;
    Ok((
        ReportRow {
            name: name.into(),
            threshold,
            rouge_l: sums.rouge_l / n,
            bleu: sums.bleu / n,
            codebleu_lite: sums.codebleu_lite / n,
            energy_proxy_total: energy,
            wall_energy,
            latency_mean: latency / n,
            throughput: tput / n,
            mean_layers_used: mean_layers,
            layers_skipped_fraction: (1.0 - mean_layers / n_layers as f64).max(0.0),
            layers_executed_total: layers,
            tokens,
            controller_checks: checks,
            n_samples: samples.len(),
        },
        results,
    ))
}

pub const REPORT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub report_version: u32,
    pub codebleu_lite: String,
    pub config: EvalConfig,
    pub schedule: Vec<usize>,
    pub rows: Vec<ReportRow>,
}

/// Baselines (the base model when given, then the full LITE model) followed
/// by one dynamic row per threshold.
pub fn run_benchmark(
    lite: &Transformer,
    base: Option<&Transformer>,
    schedule: &ExitSchedule,
    policy: &ExitPolicy,
    samples: &[EvalSample],
    cfg: &EvalConfig,
    keywords: &HashSet<String>,
) -> Result<EvalReport> {
    cfg.validate()?;
    let n = lite.n_layers();
    let mut rows = Vec::new();
    let full_cfg = cfg.controller(0.5);
    if let Some(base) = base {
        let (row, _) = evaluate_rows("base-full", None, n, samples, cfg, keywords, |s| {
            controller::full_generate(base, schedule, &s.context, &full_cfg)
        })?;
        rows.push(row);
    }
    let (row, _) = evaluate_rows("lite-full", None, n, samples, cfg, keywords, |s| {
        controller::full_generate(lite, schedule, &s.context, &full_cfg)
    })?;
    rows.push(row);
    for &t in &cfg.thresholds {
        let c = cfg.controller(t);
        let (row, _) = evaluate_rows(&format!("dynamic@{t}"), Some(t), n, samples, cfg, keywords, |s| {
            controller::generate_with_costs(lite, schedule, policy, &s.context, &c, &cfg.costs)
        })?;
        rows.push(row);
    }
    Ok(EvalReport {
        report_version: REPORT_VERSION,
        codebleu_lite: CODEBLEU_LITE_VERSION.into(),
        config: cfg.clone(),
        schedule: schedule.layers().to_vec(),
        rows,
    })
}

const REPORT_COLUMNS: &str = "name,threshold,rouge_l,bleu,codebleu_lite,energy_proxy_total,wall_energy,latency_mean,throughput,mean_layers_used,layers_skipped_fraction,layers_executed_total,tokens,controller_checks,n_samples";

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{REPORT_COLUMNS}\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{:.6},{:.6},{:.6},{:.3},{},{:.6},{:.3},{:.4},{:.4},{},{},{},{}",
                r.name,
                opt(r.threshold),
                r.rouge_l,
                r.bleu,
                r.codebleu_lite,
                r.energy_proxy_total,
                opt(r.wall_energy),
                r.latency_mean,
                r.throughput,
                r.mean_layers_used,
                r.layers_skipped_fraction,
                r.layers_executed_total,
                r.tokens,
                r.controller_checks,
                r.n_samples
            );
        }
        s
    }

    /// Writes `<stem>.csv` and `<stem>.json`.
    pub fn write(&self, stem: &Path) -> Result<()> {
        let csv = stem.with_extension("csv");
        fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))?;
        let json = stem.with_extension("json");
        fs::write(&json, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(&json, e))
    }

    /// Score-vs-threshold and energy-vs-threshold panels over the dynamic rows.
    pub fn threshold_svg(&self) -> String {
        let pts: Vec<&ReportRow> = self.rows.iter().filter(|r| r.threshold.is_some()).collect();
        let xs: Vec<f64> = pts.iter().map(|r| r.threshold.unwrap_or(0.0)).collect();
        let score: Vec<f64> = pts.iter().map(|r| r.rouge_l).collect();
        let energy: Vec<f64> = pts.iter().map(|r| r.energy_proxy_total).collect();
        svg_panels(
            "threshold",
            &xs,
            &[("ROUGE-L", &score), ("energy proxy", &energy)],
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub exit_layer: usize,
    pub rouge_l: f64,
    pub bleu: f64,
    pub codebleu_lite: f64,
    pub energy_proxy_total: f64,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    /// Rank correlation between the energy proxy and wall-clock time.
    pub proxy_wall_spearman: f64,
}

/// Decodes every sample at each schedule layer in turn.
pub fn fixed_exit_sweep(
    model: &Transformer,
    schedule: &ExitSchedule,
    samples: &[EvalSample],
    cfg: &EvalConfig,
    keywords: &HashSet<String>,
) -> Result<SweepReport> {
    let c = cfg.controller(0.5);
    let mut rows = Vec::new();
    for &layer in schedule.layers() {
        let t0 = Instant::now();
        let (row, _) = evaluate_rows(&format!("fixed@{layer}"), None, model.n_layers(), samples, cfg, keywords, |s| {
            controller::fixed_exit_generate(model, schedule, &s.context, layer, &c)
        })?;
        rows.push(SweepRow {
            exit_layer: layer,
            rouge_l: row.rouge_l,
            bleu: row.bleu,
            codebleu_lite: row.codebleu_lite,
            energy_proxy_total: row.energy_proxy_total,
            wall_seconds: t0.elapsed().as_secs_f64(),
        });
    }
    let e: Vec<f64> = rows.iter().map(|r| r.energy_proxy_total).collect();
    let w: Vec<f64> = rows.iter().map(|r| r.wall_seconds).collect();
    Ok(SweepReport {
        proxy_wall_spearman: spearman(&e, &w),
        rows,
    })
}

impl SweepReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("exit_layer,rouge_l,bleu,codebleu_lite,energy_proxy_total,wall_seconds\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{:.6},{:.6},{:.6},{:.3},{:.4}",
                r.exit_layer, r.rouge_l, r.bleu, r.codebleu_lite, r.energy_proxy_total, r.wall_seconds
            );
        }
        s
    }

    pub fn svg(&self) -> String {
        let xs: Vec<f64> = self.rows.iter().map(|r| r.exit_layer as f64).collect();
        let score: Vec<f64> = self.rows.iter().map(|r| r.rouge_l).collect();
        let energy: Vec<f64> = self.rows.iter().map(|r| r.energy_proxy_total).collect();
        svg_panels("exit layer", &xs, &[("ROUGE-L", &score), ("energy proxy", &energy)])
    }
}

/// Counts of optimal exit indices over the full model's greedy tokens.
pub fn optimal_exit_histogram(
    model: &Transformer,
    schedule: &ExitSchedule,
    samples: &[EvalSample],
    max_new: usize,
) -> Result<Vec<u64>> {
    let mut hist = vec![0u64; schedule.n_exit_points()];
    for s in samples {
        for rec in exit_point_records(model, schedule, &s.context, max_new)? {
            hist[rec.opt_idx] += 1;
        }
    }
    Ok(hist)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UnitTimes {
    /// Seconds per transformer layer at the typical sequence length.
    pub layer: f64,
    pub head: f64,
    /// Seconds per policy evaluation plus gating.
    pub controller: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverheadRow {
    pub threshold: f64,
    pub tokens: usize,
    pub layers: u64,
    pub checks: u64,
    /// Controller share of generation time from isolated unit timings.
    pub controller_time_fraction: f64,
    /// Controller share of the energy proxy.
    pub controller_energy_fraction: f64,
    /// Controller share measured in-line during the same runs.
    pub measured_time_fraction: f64,
}

fn median_secs(reps: usize, mut f: impl FnMut()) -> f64 {
    let mut v: Vec<f64> = (0..reps)
        .map(|_| {
            let t = Instant::now();
            f();
            t.elapsed().as_secs_f64()
        })
        .collect();
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

/// Times one layer, one head decode and one controller decision in
/// isolation, at the samples' mean generation length.
pub fn measure_unit_times(
    model: &Transformer,
    policy: &ExitPolicy,
    samples: &[EvalSample],
    cfg: &EvalConfig,
) -> Result<UnitTimes> {
    let mean_len = samples.iter().map(|s| s.context.len()).sum::<usize>() / samples.len().max(1)
        + cfg.max_new / 2;
    let probe = &samples[0];
    let mut seq = probe.context.clone();
    seq.resize(mean_len.clamp(1, model.config().max_seq), b' ' as TokenId);
    let reps = 7.max(cfg.warmup);
    let n = model.n_layers();
    let layer = if cfg.kv_cache {
        // one new position over a prefilled cache
        let mut v = Vec::with_capacity(reps);
        for _ in 0..reps {
            let mut cache = crate::model::KVCache::new(model.config());
            model.forward_to_layer(&seq[..seq.len() - 1], n, Some(&mut cache))?;
            let t = Instant::now();
            model.forward_to_layer(&seq, n, Some(&mut cache))?;
            v.push(t.elapsed().as_secs_f64());
        }
        v.sort_by(f64::total_cmp);
        v[v.len() / 2]
    } else {
        median_secs(reps, || {
            std::hint::black_box(model.forward_to_layer(&seq, n, None).expect("valid probe"));
        })
    } / n as f64;
    let h = model.forward_to_layer(&seq, n, None)?.pop().expect("one state per layer");
    let calls = 200;
    let head = median_secs(reps, || {
        for _ in 0..calls {
            std::hint::black_box(model.predict(&h).expect("finite state"));
        }
    }) / calls as f64;
    let ccfg = cfg.controller(0.5);
    let controller = median_secs(reps, || {
        for _ in 0..calls {
            std::hint::black_box(controller::decide(policy, &h.values, &ccfg).expect("matching dims"));
        }
    }) / calls as f64;
    Ok(UnitTimes { layer, head, controller })
}

/// Per threshold: generation counts, then controller time share from the
/// isolated unit costs and the in-line measurement.
pub fn overhead_harness(
    model: &Transformer,
    schedule: &ExitSchedule,
    policy: &ExitPolicy,
    samples: &[EvalSample],
    cfg: &EvalConfig,
    units: &UnitTimes,
) -> Result<Vec<OverheadRow>> {
    let mut rows = Vec::new();
    for &t in &cfg.thresholds {
        let c = cfg.controller(t);
        for s in samples.iter().take(cfg.warmup) {
            controller::generate_with_costs(model, schedule, policy, &s.context, &c, &cfg.costs)?;
        }
        let (mut tokens, mut layers, mut checks, mut energy, mut ctrl_s, mut total_s) = (0, 0u64, 0u64, 0.0, 0.0, 0.0);
        for s in samples {
            let r = controller::generate_with_costs(model, schedule, policy, &s.context, &c, &cfg.costs)?;
            tokens += r.token_ids.len();
            layers += r.layers_executed_total;
            checks += r.controller_checks;
            energy += r.energy_proxy;
            ctrl_s += r.controller_seconds;
            total_s += r.latency;
        }
        let ctrl = checks as f64 * units.controller;
        let total = layers as f64 * units.layer + tokens as f64 * units.head + ctrl;
        rows.push(OverheadRow {
            threshold: t,
            tokens,
            layers,
            checks,
            controller_time_fraction: ctrl / total,
            controller_energy_fraction: checks as f64 * cfg.costs.controller / energy,
            measured_time_fraction: ctrl_s / total_s,
        });
    }
    Ok(rows)
}

pub fn overhead_csv(rows: &[OverheadRow]) -> String {
    let mut s = String::from(
        "threshold,tokens,layers,checks,controller_time_fraction,controller_energy_fraction,measured_time_fraction\n",
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{:.6},{:.6},{:.6}",
            r.threshold,
            r.tokens,
            r.layers,
            r.checks,
            r.controller_time_fraction,
            r.controller_energy_fraction,
            r.measured_time_fraction
        );
    }
    s
}

/// Stacked line charts sharing one x axis.
pub fn svg_panels(x_label: &str, xs: &[f64], series: &[(&str, &[f64])]) -> String {
    let (w, ph, pad) = (480.0, 200.0, 40.0);
    let h = ph * series.len() as f64;
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"11\">\n"
    );
    let (xmin, xmax) = bounds(xs);
    for (i, (label, ys)) in series.iter().enumerate() {
        let top = i as f64 * ph;
        let (ymin, ymax) = bounds(ys);
        let px = |x: f64| pad + (x - xmin) / (xmax - xmin) * (w - 2.0 * pad);
        let py = |y: f64| top + ph - pad + -(y - ymin) / (ymax - ymin) * (ph - 2.0 * pad);
        let _ = writeln!(
            s,
            "<rect x=\"{pad}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"#999\"/>",
            top + pad,
            w - 2.0 * pad,
            ph - 2.0 * pad
        );
        let _ = writeln!(s, "<text x=\"{pad}\" y=\"{}\">{label} [{ymin:.3}, {ymax:.3}]</text>", top + pad - 6.0);
        let pts: Vec<String> = xs.iter().zip(*ys).map(|(&x, &y)| format!("{:.1},{:.1}", px(x), py(y))).collect();
        let _ = writeln!(s, "<polyline fill=\"none\" stroke=\"#1f77b4\" stroke-width=\"2\" points=\"{}\"/>", pts.join(" "));
        for (&x, &y) in xs.iter().zip(*ys) {
            let _ = writeln!(s, "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"3\" fill=\"#1f77b4\"/>", px(x), py(y));
        }
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{x_label} [{xmin}, {xmax}]</text>",
            w / 2.0,
            top + ph - 8.0
        );
    }
    s.push_str("</svg>\n");
    s
}

fn bounds(v: &[f64]) -> (f64, f64) {
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !lo.is_finite() || !hi.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn rouge_examples() {
        assert_eq!(rouge_l(&toks("a b c"), &toks("a b c")), 1.0);
        assert_eq!(rouge_l(&toks("a b"), &toks("c d")), 0.0);
        assert!((rouge_l(&toks("a b c d"), &toks("a c d")) - 6.0 / 7.0).abs() < 1e-12);
        assert_eq!(rouge_l(&toks(""), &toks("a")), 0.0);
    }

    #[test]
    fn bleu_published_example() {
        let hyp = toks("It is a guide to action which ensures that the military always obeys the commands of the party");
        let r1 = toks("It is a guide to action that ensures that the military will forever heed Party commands");
        let r2 = toks("It is the guiding principle which guarantees the military forces always being under the command of the Party");
        let r3 = toks("It is the practical guide for the army always to heed the directions of the party");
        let b = bleu(&hyp, &[&r1, &r2, &r3], 4);
        assert!((b - 0.5045666840058485).abs() < 1e-9, "{b}");
    }

    #[test]
    fn bleu_basics() {
        let a = toks("x = foo ( y )");
        assert!((bleu(&a, &[&a], 4) - 1.0).abs() < 1e-12);
        assert_eq!(bleu(&toks("p q"), &[&toks("r s")], 4), 0.0);
        assert_eq!(bleu(&[] as &[String], &[&a], 4), 0.0);
        // the-the-the: clipped unigram precision 2/7, no higher matches
        let c = toks("the the the the the the the");
        let r = toks("the cat is on the mat");
        let expect = ((2.0f64 / 7.0).ln() + (1.0f64 / 7.0).ln() + (1.0f64 / 6.0).ln() + (1.0f64 / 5.0).ln()) / 4.0;
        assert!((bleu(&c, &[&r], 4) - expect.exp()).abs() < 1e-12);
    }

    #[test]
    fn codebleu_properties() {
        let kw = python_keywords();
        let r = toks("return total + value");
        assert!((codebleu_lite(&r, &r, &kw, 5.0) - 1.0).abs() < 1e-12);
        let c = toks("return total - valve");
        assert!((codebleu_lite(&c, &r, &kw, 1.0) - bleu(&c, &[&r], 4)).abs() < 1e-15);
        // same mismatch position, keyword vs identifier
        let kw_ref = toks("return value + 1");
        let kw_miss = toks("yield value + 1");
        let id_ref = toks("result value + 1");
        let id_miss = toks("output value + 1");
        assert_eq!(bleu(&kw_miss, &[&kw_ref], 4), bleu(&id_miss, &[&id_ref], 4));
        assert!(codebleu_lite(&kw_miss, &kw_ref, &kw, 5.0) < codebleu_lite(&id_miss, &id_ref, &kw, 5.0));
        assert_eq!(codebleu_lite(&c, &r, &HashSet::new(), 5.0), bleu(&c, &[&r], 4));
    }

    #[test]
    fn lexer() {
        assert_eq!(
            code_tokens("def f(x):\n    return x_1+2"),
            vec!["def", " ", "f", "(", "x", ")", ":", "\n", "return", " ", "x_1", "+", "2"]
        );
    }

    #[test]
    fn energy_examples() {
        let c = EnergyCosts { per_layer: 1.0, head: 1.0, controller: 0.0 };
        assert_eq!(energy_proxy(&[8; 10], &[7; 10], &c), 90.0);
        let layer_only = EnergyCosts { head: 0.0, ..c };
        assert_eq!(
            energy_proxy(&[4; 10], &[], &layer_only) * 2.0,
            energy_proxy(&[8; 10], &[], &layer_only)
        );
    }

    #[test]
    fn spearman_ties_and_order() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]) - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
        assert_eq!(ranks(&[5.0, 1.0, 5.0]), vec![2.5, 1.0, 2.5]);
    }

    #[test]
    fn svg_is_well_formed_enough() {
        let s = svg_panels("t", &[0.6, 0.9], &[("a", &[0.1, 0.2]), ("b", &[1.0, 1.0])]);
        assert!(s.starts_with("<svg") && s.trim_end().ends_with("</svg>"));
        assert_eq!(s.matches("<polyline").count(), 2);
    }

    proptest! {
        #[test]
        fn scores_in_unit_interval(
            a in proptest::collection::vec(0u8..6, 0..12),
            b in proptest::collection::vec(0u8..6, 1..12),
        ) {
            let r = rouge_l(&a, &b);
            let bl = bleu(&a, &[&b], 4);
            prop_assert!((0.0..=1.0).contains(&r));
            prop_assert!((0.0..=1.0 + 1e-12).contains(&bl));
        }

        #[test]
        fn energy_is_additive(a in proptest::collection::vec(1usize..9, 0..20), b in proptest::collection::vec(1usize..9, 0..20)) {
            let c = EnergyCosts::default();
            let joined: Vec<usize> = a.iter().chain(&b).copied().collect();
            let lhs = energy_proxy(&joined, &[], &c);
            let rhs = energy_proxy(&a, &[], &c) + energy_proxy(&b, &[], &c);
            prop_assert!((lhs - rhs).abs() < 1e-9);
        }
    }
}
