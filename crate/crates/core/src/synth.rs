//! Deterministic generator of small Python-like source trees, used for
//! tests, benches and offline demos when no real corpus is at hand.

use std::fs;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

const NOUNS: &[&str] = &[
    "item", "value", "count", "total", "name", "record", "node", "entry", "key", "price", "score",
    "line", "path", "token", "user", "order", "size", "index", "buffer", "message",
];
const VERBS: &[&str] = &[
    "compute", "load", "parse", "update", "build", "find", "merge", "check", "format", "collect",
    "scale", "filter", "count", "render", "apply",
];
const CLASSES: &[&str] = &[
    "Parser", "Cache", "Counter", "Registry", "Queue", "Matrix", "Account", "Graph", "Reader",
    "Session",
];
const OPS: &[&str] = &["+", "-", "*"];

fn pick<'a>(rng: &mut ChaCha8Rng, xs: &'a [&'a str]) -> &'a str {
    xs.choose(rng).expect("non-empty list")
}

fn plural(n: &str) -> String {
    if n.ends_with('x') || n.ends_with('s') {
        format!("{n}es")
    } else {
        format!("{n}s")
    }
}

fn function(rng: &mut ChaCha8Rng) -> String {
    let verb = pick(rng, VERBS);
    let noun = pick(rng, NOUNS);
    let other = pick(rng, NOUNS);
    let op = pick(rng, OPS);
    let k = rng.random_range(1..10);
    let items = plural(noun);
    match rng.random_range(0..6) {
        0 => format!(
            "def {verb}_{items}({items}, {other}):\n    result = 0\n    for {noun} in {items}:\n        result = result {op} {noun} * {other}\n    return result\n"
        ),
        1 => format!(
            "def {verb}_{noun}({noun}):\n    if {noun} is None:\n        return None\n    if {noun} > {k}:\n        return {noun} {op} {k}\n    return {noun}\n"
        ),
        2 => format!(
            "def {verb}_{items}({items}):\n    result = []\n    for {noun} in {items}:\n        if {noun}.{other}:\n            result.append({noun})\n    return result\n"
        ),
        3 => format!(
            "def {verb}_{noun}_{other}(data):\n    {noun} = data.get(\"{noun}\", {k})\n    {other} = data.get(\"{other}\", 0)\n    return {noun} {op} {other}\n"
        ),
        4 => format!(
            "def {verb}_{noun}({noun}, {other}={k}):\n    while {noun} < {other}:\n        {noun} = {noun} {op} 1\n    return {noun}\n"
        ),
        _ => format!(
            "def {verb}_{items}(path):\n    {items} = {{}}\n    with open(path) as handle:\n        for line in handle:\n            {noun} = line.strip()\n            {items}[{noun}] = len({noun})\n    return {items}\n"
        ),
    }
}

fn class(rng: &mut ChaCha8Rng) -> String {
    let name = pick(rng, CLASSES);
    let a = pick(rng, NOUNS);
    let b = pick(rng, NOUNS);
    let verb = pick(rng, VERBS);
    let op = pick(rng, OPS);
    format!(
        "class {name}:\n    def __init__(self, {a}, {b}):\n        self.{a} = {a}\n        self.{b} = {b}\n\n    def {verb}(self):\n        return self.{a} {op} self.{b}\n\n    def __repr__(self):\n        return \"{name}(\" + str(self.{a}) + \")\"\n"
    )
}

/// Source text of one synthetic module.
pub fn module_source(rng: &mut ChaCha8Rng) -> String {
    let mut out = String::new();
    if rng.random_bool(0.5) {
        out.push_str(&format!("import {}\n\n", pick(rng, &["os", "sys", "math", "json", "re"])));
    }
    let units = rng.random_range(3..7);
    for i in 0..units {
        if i > 0 {
            out.push_str("\n\n");
        }
        if rng.random_bool(0.25) {
            out.push_str(&class(rng));
        } else {
            out.push_str(&function(rng));
        }
    }
    out
}

/// Writes `n_files` modules named `mod_XXXX.py` under `dir`.
pub fn write_corpus(dir: &Path, n_files: usize, seed: u64) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..n_files {
        let path = dir.join(format!("mod_{i:04}.py"));
        fs::write(&path, module_source(&mut rng)).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}
