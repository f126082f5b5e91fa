//! Source-file corpus: byte-level tokenization, deterministic splits,
//! context/target extraction and packing into fixed training blocks.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const BOS: TokenId = 256;
pub const EOS: TokenId = 257;
pub const PAD: TokenId = 258;
pub const VOCAB_SIZE: usize = 259;

pub const DEFAULT_MIN_TOKENS: usize = 32;
pub const DEFAULT_MAX_CONTEXT: usize = 512;

/// Byte-level tokenizer: ids 0..=255 are raw bytes, followed by BOS, EOS, PAD.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Tokenizer;

impl Tokenizer {
    pub fn vocab_size(&self) -> usize {
        VOCAB_SIZE
    }

    pub fn encode(&self, bytes: &[u8]) -> Vec<TokenId> {
        bytes.iter().map(|&b| TokenId::from(b)).collect()
    }

    /// Special tokens are dropped from the output.
    pub fn decode(&self, ids: &[TokenId]) -> Vec<u8> {
        ids.iter()
            .filter(|&&id| id < 256)
            .map(|&id| id as u8)
            .collect()
    }

    pub fn decode_lossy(&self, ids: &[TokenId]) -> String {
        String::from_utf8_lossy(&self.decode(ids)).into_owned()
    }

    pub fn is_special(id: TokenId) -> bool {
        id >= 256
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodeSample {
    pub source_path: PathBuf,
    pub token_ids: Vec<TokenId>,
    pub split: Split,
}

/// A prompt and its ground-truth continuation, cut from one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextTarget {
    pub context: Vec<TokenId>,
    pub target: Vec<TokenId>,
    pub context_fraction: f64,
    /// Offset of the first context token inside the originating sample.
    pub start: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
}

impl SplitRatios {
    pub fn new(train: f64, validation: f64, test: f64) -> Result<Self> {
        let r = Self {
            train,
            validation,
            test,
        };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.train, self.validation, self.test];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::config(format!("split ratios must be non-negative: {all:?}")));
        }
        let sum: f64 = all.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!("split ratios sum to {sum}, expected 1")));
        }
        Ok(())
    }
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.8,
            validation: 0.1,
            test: 0.1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct IngestOptions {
    pub extensions: Vec<String>,
    pub ratios: SplitRatios,
    pub seed: u64,
    pub min_tokens: usize,
}

impl Default for IngestOptions {
    fn default() -> Self {
        Self {
            extensions: vec!["py".into(), "rs".into(), "java".into()],
            ratios: SplitRatios::default(),
            seed: 7,
            min_tokens: DEFAULT_MIN_TOKENS,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub root: PathBuf,
    pub samples: Vec<CodeSample>,
    /// Files that matched the extension filter but were shorter than `min_tokens`.
    pub dropped: usize,
    pub options: IngestOptions,
}

fn normalize_ext(ext: &str) -> String {
    ext.trim().trim_start_matches('.').to_ascii_lowercase()
}

/// Reads every matching file under `dir`, drops short files and assigns splits.
pub fn ingest(dir: &Path, opts: &IngestOptions) -> Result<Corpus> {
    opts.ratios.validate()?;
    if !dir.is_dir() {
        return Err(Error::MissingArtifact {
            path: dir.to_path_buf(),
            hint: "corpus directory does not exist".into(),
        });
    }
    let wanted: BTreeSet<String> = opts.extensions.iter().map(|e| normalize_ext(e)).collect();

    let mut paths = Vec::new();
    for entry in walkdir::WalkDir::new(dir).follow_links(false) {
        let entry = entry.map_err(|e| {
            let path = e.path().map(Path::to_path_buf).unwrap_or_else(|| dir.to_path_buf());
            Error::io(path, e.into())
        })?;
        if !entry.file_type().is_file() {
            continue;
        }
        let matches = entry
            .path()
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| wanted.contains(&normalize_ext(e)));
        if matches {
            paths.push(entry.into_path());
        }
    }
    paths.sort();

    let tok = Tokenizer;
    let mut kept = Vec::new();
    let mut dropped = 0;
    for path in paths {
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if bytes.len() < opts.min_tokens {
            dropped += 1;
            continue;
        }
        let rel = path.strip_prefix(dir).unwrap_or(&path).to_path_buf();
        kept.push((rel, tok.encode(&bytes)));
    }
    if kept.is_empty() {
        return Err(Error::EmptyCorpus {
            dir: dir.to_path_buf(),
            extensions: wanted.into_iter().collect(),
            min_tokens: opts.min_tokens,
        });
    }

    let splits = assign_splits(kept.len(), &opts.ratios, opts.seed);
    let samples = kept
        .into_iter()
        .zip(splits)
        .map(|((source_path, token_ids), split)| CodeSample {
            source_path,
            token_ids,
            split,
        })
        .collect();

    Ok(Corpus {
        root: dir.to_path_buf(),
        samples,
        dropped,
        options: opts.clone(),
    })
}

/// Split assignment for `n` items in sorted-path order.
pub fn assign_splits(n: usize, ratios: &SplitRatios, seed: u64) -> Vec<Split> {
    let n_train = ((ratios.train * n as f64).round() as usize).min(n);
    let n_val = ((ratios.validation * n as f64).round() as usize).min(n - n_train);

    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);

    let mut splits = vec![Split::Test; n];
    for (rank, &idx) in order.iter().enumerate() {
        splits[idx] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Validation
        } else {
            Split::Test
        };
    }
    splits
}

impl Corpus {
    pub fn split(&self, split: Split) -> Vec<&CodeSample> {
        self.samples.iter().filter(|s| s.split == split).collect()
    }

    pub fn count(&self, split: Split) -> usize {
        self.samples.iter().filter(|s| s.split == split).count()
    }

    pub fn manifest(&self) -> Manifest {
        Manifest {
            version: MANIFEST_VERSION,
            root: self.root.clone(),
            seed: self.options.seed,
            extensions: self.options.extensions.clone(),
            split_ratios: self.options.ratios,
            min_tokens: self.options.min_tokens,
            dropped: self.dropped,
            files: self
                .samples
                .iter()
                .map(|s| ManifestEntry {
                    path: s.source_path.clone(),
                    split: s.split,
                    token_count: s.token_ids.len(),
                })
                .collect(),
        }
    }

    /// Re-reads the files listed in a manifest. Token counts must still match.
    pub fn from_manifest(manifest: &Manifest) -> Result<Self> {
        if manifest.version != MANIFEST_VERSION {
            return Err(Error::UnsupportedVersion {
                what: "corpus manifest",
                found: manifest.version,
                expected: MANIFEST_VERSION,
            });
        }
        let tok = Tokenizer;
        let mut samples = Vec::with_capacity(manifest.files.len());
        for entry in &manifest.files {
            let path = manifest.root.join(&entry.path);
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            if bytes.len() != entry.token_count {
                return Err(Error::Malformed {
                    what: "corpus manifest",
                    detail: format!(
                        "{} has {} tokens, manifest says {}",
                        path.display(),
                        bytes.len(),
                        entry.token_count
                    ),
                });
            }
            samples.push(CodeSample {
                source_path: entry.path.clone(),
                token_ids: tok.encode(&bytes),
                split: entry.split,
            });
        }
        Ok(Self {
            root: manifest.root.clone(),
            samples,
            dropped: manifest.dropped,
            options: IngestOptions {
                extensions: manifest.extensions.clone(),
                ratios: manifest.split_ratios,
                seed: manifest.seed,
                min_tokens: manifest.min_tokens,
            },
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_manifest(&Manifest::read(path)?)
    }
}

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub split: Split,
    pub token_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub root: PathBuf,
    pub seed: u64,
    pub extensions: Vec<String>,
    pub split_ratios: SplitRatios,
    pub min_tokens: usize,
    pub dropped: usize,
    pub files: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn write(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Prompt = first ⌊fraction·len⌋ tokens (keeping the rightmost `max_context`),
/// target = up to `max_new` tokens that follow.
pub fn make_context_target(
    sample: &[TokenId],
    fraction: f64,
    max_new: usize,
    max_context: usize,
) -> Result<ContextTarget> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::config(format!("context fraction {fraction} not in (0,1)")));
    }
    if max_new == 0 || max_context == 0 {
        return Err(Error::config("max_new and max_context must be positive"));
    }
    let len = sample.len();
    // The epsilon absorbs products like 0.29 * 100 = 28.999999999999996.
    let ctx_end = (fraction * len as f64 + 1e-9).floor() as usize;
    if ctx_end == 0 || ctx_end >= len {
        return Err(Error::InsufficientTokens {
            len,
            needed: ((1.0 / fraction).ceil() as usize).max(2),
        });
    }
    let start = ctx_end.saturating_sub(max_context);
    let tgt_end = (ctx_end + max_new).min(len);
    Ok(ContextTarget {
        context: sample[start..ctx_end].to_vec(),
        target: sample[ctx_end..tgt_end].to_vec(),
        context_fraction: fraction,
        start,
    })
}

/// Concatenates samples with EOS separators and cuts the stream into blocks of
/// `block_len`; the last partial block is PAD-filled.
pub fn pack_training_blocks<'a, I>(samples: I, block_len: usize) -> Result<Vec<Vec<TokenId>>>
where
    I: IntoIterator<Item = &'a [TokenId]>,
{
    if block_len < 2 {
        return Err(Error::config(format!("block_len {block_len} < 2")));
    }
    let mut stream = Vec::new();
    for s in samples {
        stream.extend_from_slice(s);
        stream.push(EOS);
    }
    let mut blocks: Vec<Vec<TokenId>> = stream.chunks(block_len).map(<[TokenId]>::to_vec).collect();
    if let Some(last) = blocks.last_mut() {
        last.resize(block_len, PAD);
    }
    Ok(blocks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn write_files(dir: &Path, n: usize, len: usize) {
        for i in 0..n {
            let body: String = (0..len).map(|j| (b'a' + ((i + j) % 26) as u8) as char).collect();
            fs::write(dir.join(format!("f{i:02}.py")), body).unwrap();
        }
    }

    #[test]
    fn ten_files_split_eight_one_one() {
        let dir = tempfile::tempdir().unwrap();
        write_files(dir.path(), 10, 64);
        let c = ingest(dir.path(), &IngestOptions { seed: 7, ..Default::default() }).unwrap();
        assert_eq!(
            (c.count(Split::Train), c.count(Split::Validation), c.count(Split::Test)),
            (8, 1, 1)
        );
    }

    #[test]
    fn empty_dir_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("notes.txt"), "x".repeat(100)).unwrap();
        let err = ingest(dir.path(), &IngestOptions::default()).unwrap_err();
        assert!(matches!(err, Error::EmptyCorpus { .. }));
        assert!(err.to_string().contains("empty corpus"));
    }

    #[test]
    fn short_files_dropped_and_counted() {
        let dir = tempfile::tempdir().unwrap();
        write_files(dir.path(), 3, 64);
        fs::write(dir.path().join("tiny.py"), "x = 1\n").unwrap();
        let c = ingest(dir.path(), &IngestOptions::default()).unwrap();
        assert_eq!(c.samples.len(), 3);
        assert_eq!(c.dropped, 1);
    }

    #[test]
    fn split_is_deterministic_and_manifest_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir(dir.path().join("sub")).unwrap();
        write_files(dir.path(), 12, 40);
        write_files(&dir.path().join("sub"), 5, 50);
        let opts = IngestOptions { seed: 99, ..Default::default() };
        let a = ingest(dir.path(), &opts).unwrap();
        let b = ingest(dir.path(), &opts).unwrap();
        let ma = serde_json::to_vec(&a.manifest()).unwrap();
        let mb = serde_json::to_vec(&b.manifest()).unwrap();
        assert_eq!(ma, mb);

        let path = dir.path().join("manifest.json");
        a.manifest().write(&path).unwrap();
        let c = Corpus::load(&path).unwrap();
        assert_eq!(c.samples, a.samples);
        for s in &c.samples {
            let raw = fs::read(dir.path().join(&s.source_path)).unwrap();
            assert_eq!(Tokenizer.decode(&s.token_ids), raw);
        }
    }

    #[test]
    fn bad_ratios_rejected() {
        assert!(SplitRatios::new(0.8, 0.1, 0.2).is_err());
        assert!(SplitRatios::new(0.8, 0.1, 0.1).is_ok());
    }

    #[test]
    fn context_target_basic() {
        let s: Vec<TokenId> = (0..100).collect();
        let ct = make_context_target(&s, 0.2, 15, 512).unwrap();
        assert_eq!(ct.context, (0..20).collect::<Vec<_>>());
        assert_eq!(ct.target, (20..35).collect::<Vec<_>>());
    }

    #[test]
    fn context_target_clamps_at_sample_end() {
        let s: Vec<TokenId> = (0..10).collect();
        let ct = make_context_target(&s, 0.2, 15, 512).unwrap();
        assert_eq!(ct.context, vec![0, 1]);
        assert_eq!(ct.target, (2..10).collect::<Vec<_>>());
    }

    #[test]
    fn context_left_truncated() {
        let s: Vec<TokenId> = (0..4000).map(|i| i % 256).collect();
        let ct = make_context_target(&s, 0.5, 15, 512).unwrap();
        // ctx_end = 2000, keep the last 512 tokens: [1488, 2000)
        assert_eq!(ct.start, 1488);
        assert_eq!(ct.context.len(), 512);
        assert_eq!(ct.context[..], s[1488..2000]);
    }

    #[test]
    fn too_short_sample() {
        let s: Vec<TokenId> = vec![1, 2, 3];
        assert!(matches!(
            make_context_target(&s, 0.2, 15, 512),
            Err(Error::InsufficientTokens { .. })
        ));
    }

    #[test]
    fn packing_exact_fit() {
        let a: Vec<TokenId> = vec![1; 5];
        let b: Vec<TokenId> = vec![2; 5];
        let blocks = pack_training_blocks([a.as_slice(), b.as_slice()], 12).unwrap();
        assert_eq!(blocks.len(), 1);
        let mut want = vec![1; 5];
        want.push(EOS);
        want.extend([2; 5]);
        want.push(EOS);
        assert_eq!(blocks[0], want);
    }

    #[test]
    fn packing_pads_last_block() {
        let a: Vec<TokenId> = vec![7; 3];
        let blocks = pack_training_blocks([a.as_slice()], 8).unwrap();
        assert_eq!(blocks.len(), 1);
        assert_eq!(blocks[0].iter().filter(|&&t| t == PAD).count(), 4);
    }

    #[test]
    fn packing_thousand_tokens() {
        // one 999-token sample + 1 separator = 1000 stream tokens -> ceil(1000/256) = 4
        let a: Vec<TokenId> = vec![3; 999];
        let blocks = pack_training_blocks([a.as_slice()], 256).unwrap();
        assert_eq!(blocks.len(), 4);
        assert_eq!(*blocks[3].last().unwrap(), PAD);
        assert!(pack_training_blocks([a.as_slice()], 1).is_err());
    }

    proptest! {
        #[test]
        fn bytes_roundtrip(bytes in proptest::collection::vec(any::<u8>(), 0..200)) {
            let t = Tokenizer;
            prop_assert_eq!(t.decode(&t.encode(&bytes)), bytes);
        }

        #[test]
        fn ids_roundtrip(ids in proptest::collection::vec(0u32..256, 0..200)) {
            let t = Tokenizer;
            prop_assert_eq!(t.encode(&t.decode(&ids)), ids);
        }

        #[test]
        fn packing_conserves_tokens(
            lens in proptest::collection::vec(1usize..60, 1..8),
            block_len in 2usize..40,
        ) {
            let samples: Vec<Vec<TokenId>> = lens.iter().map(|&n| vec![5; n]).collect();
            let blocks = pack_training_blocks(samples.iter().map(Vec::as_slice), block_len).unwrap();
            let non_pad: usize = blocks.iter().flatten().filter(|&&t| t != PAD).count();
            prop_assert_eq!(non_pad, lens.iter().sum::<usize>() + lens.len());
            prop_assert!(blocks.iter().all(|b| b.len() == block_len));
        }

        #[test]
        fn context_target_is_contiguous(
            len in 2usize..3000,
            fraction in 0.05f64..0.95,
            max_new in 1usize..30,
            max_ctx in 1usize..600,
        ) {
            let s: Vec<TokenId> = (0..len as u32).collect();
            if let Ok(ct) = make_context_target(&s, fraction, max_new, max_ctx) {
                prop_assert!(!ct.context.is_empty() && ct.context.len() <= max_ctx);
                let joined: Vec<TokenId> = ct.context.iter().chain(&ct.target).copied().collect();
                prop_assert_eq!(&joined[..], &s[ct.start..ct.start + joined.len()]);
            }
        }
    }
}
