//! Config-file support.
//!
//! The file is TOML with one table per subcommand (`[ingest]`, `[train-lite]`,
//! ...). Keys are the flag names with hyphens replaced by underscores. A
//! top-level `seed` applies to every subcommand unless its table sets one.
//! Command-line flags override file values.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::CliError;

#[derive(Debug, Default)]
pub struct ConfigFile {
    root: toml::Table,
}

impl ConfigFile {
    pub fn load(path: Option<&Path>, sections: &[&str]) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let root: toml::Table = text
            .parse()
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        for (key, value) in &root {
            match key.as_str() {
                "seed" => {}
                k if sections.contains(&k) => {
                    if !value.is_table() {
                        return Err(CliError::Config(format!("[{k}] must be a table")));
                    }
                }
                k => return Err(CliError::Config(format!("unknown top-level key {k:?}"))),
            }
        }
        Ok(Self { root })
    }

    /// File values for `section`, overlaid with every flag that was given.
    pub fn resolve<T: Serialize + DeserializeOwned>(&self, section: &str, flags: &T) -> Result<T, CliError> {
        let to_json = |v: &toml::Value| serde_json::to_value(v).map_err(|e| CliError::Config(e.to_string()));
        let mut merged = Map::new();
        if let Some(seed) = self.root.get("seed") {
            merged.insert("seed".into(), to_json(seed)?);
        }
        if let Some(toml::Value::Table(t)) = self.root.get(section) {
            for (k, v) in t {
                merged.insert(k.clone(), to_json(v)?);
            }
        }
        let given = serde_json::to_value(flags).map_err(|e| CliError::Config(e.to_string()))?;
        if let Value::Object(given) = given {
            merged.extend(given.into_iter().filter(|(_, v)| !v.is_null()));
        }
        let keys: Vec<String> = merged.keys().cloned().collect();
        let out: T = serde_json::from_value(Value::Object(merged))
            .map_err(|e| CliError::Config(format!("[{section}]: {e}")))?;
        // every field serializes (as null when unset), so this is the full key set
        let known = serde_json::to_value(&out).map_err(|e| CliError::Config(e.to_string()))?;
        if let Some(k) = keys.iter().find(|k| known.get(k.as_str()).is_none()) {
            return Err(CliError::Config(format!("[{section}]: unknown key {k:?}")));
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Debug, Default, Serialize, Deserialize, PartialEq)]
    struct Demo {
        seed: Option<u64>,
        rate: Option<f64>,
        name: Option<String>,
    }

    fn file(text: &str) -> ConfigFile {
        ConfigFile { root: text.parse().unwrap() }
    }

    #[test]
    fn flags_override_file_and_global_seed() {
        let f = file("seed = 3\n[demo]\nrate = 0.5\nname = \"a\"\n");
        let flags = Demo { name: Some("b".into()), ..Default::default() };
        let got = f.resolve("demo", &flags).unwrap();
        assert_eq!(got, Demo { seed: Some(3), rate: Some(0.5), name: Some("b".into()) });
    }

    #[test]
    fn section_seed_beats_global() {
        let f = file("seed = 3\n[demo]\nseed = 9\n");
        assert_eq!(f.resolve("demo", &Demo::default()).unwrap().seed, Some(9));
    }

    #[test]
    fn unknown_key_is_rejected() {
        let f = file("[demo]\nrat = 0.5\n");
        assert!(f.resolve("demo", &Demo::default()).is_err());
    }
}
