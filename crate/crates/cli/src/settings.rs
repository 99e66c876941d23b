//! Layered configuration: built-in defaults, then a JSON config file, then
//! command-line flags.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use qctc_core::tasks::TaskKind;
use qctc_core::{Error, Result};

pub const SEED_ENV: &str = "QCTC_SEED";

const SECTIONS: &[&str] = &["task", "model", "train", "bench"];

/// Model keys a config file or flag may set; vocabularies and the decoder
/// kind come from the dataset and the command.
pub const MODEL_KEYS: &[&str] = &[
    "d_model",
    "n_heads",
    "n_enc_layers",
    "n_dec_layers",
    "ffn_mult",
    "n_queries",
    "max_src_len",
    "max_tgt_len",
    "init_std",
];

/// Seed used when neither a flag nor the config file sets one.
pub fn default_seed() -> Result<u64> {
    match std::env::var(SEED_ENV) {
        Ok(s) => s
            .trim()
            .parse()
            .map_err(|_| Error::usage(format!("{SEED_ENV}={s} is not a 64-bit unsigned integer"))),
        Err(_) => Ok(0),
    }
}

#[derive(Debug, Default)]
pub struct ConfigFile {
    sections: Map<String, Value>,
}

impl ConfigFile {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(ConfigFile::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::usage(format!("cannot read config {}: {e}", path.display())))?;
        let value: Value = serde_json::from_str(&text)
            .map_err(|e| Error::usage(format!("config {} is not valid JSON: {e}", path.display())))?;
        let Value::Object(sections) = value else {
            return Err(Error::usage("a config file must hold a JSON object"));
        };
        for (k, v) in &sections {
            if !SECTIONS.contains(&k.as_str()) {
                return Err(Error::usage(format!("unknown config section `{k}`")));
            }
            if !v.is_object() {
                return Err(Error::usage(format!("config section `{k}` must be an object")));
            }
        }
        Ok(ConfigFile { sections })
    }

    pub fn section(&self, name: &str) -> Option<&Map<String, Value>> {
        self.sections.get(name).and_then(Value::as_object)
    }

    pub fn task_kind(&self) -> Result<Option<TaskKind>> {
        match self.section("task").and_then(|t| t.get("kind")) {
            None => Ok(None),
            Some(v) => serde_json::from_value(v.clone())
                .map(Some)
                .map_err(|e| Error::usage(format!("config task.kind: {e}"))),
        }
    }
}

/// Inserts `value` under `key` when present.
pub fn put<V: Serialize>(map: &mut Map<String, Value>, key: &str, value: Option<V>) {
    if let Some(v) = value {
        map.insert(key.to_string(), serde_json::to_value(v).expect("flag value serializes"));
    }
}

fn apply(target: &mut Map<String, Value>, layer: &Map<String, Value>, allowed: Option<&[&str]>) -> Result<()> {
    for (k, v) in layer {
        let known = target.contains_key(k) && allowed.is_none_or(|a| a.contains(&k.as_str()));
        if !known {
            return Err(Error::usage(format!("unknown setting `{k}`")));
        }
        target.insert(k.clone(), v.clone());
    }
    Ok(())
}

fn merge<T: Serialize + DeserializeOwned>(
    base: &T,
    file: Option<&Map<String, Value>>,
    flags: &Map<String, Value>,
    allowed: Option<&[&str]>,
) -> Result<T> {
    let Value::Object(mut m) = serde_json::to_value(base).expect("defaults serialize") else {
        unreachable!("settings are structs");
    };
    if let Some(f) = file {
        apply(&mut m, f, allowed)?;
    }
    apply(&mut m, flags, allowed)?;
    serde_json::from_value(Value::Object(m)).map_err(|e| Error::usage(format!("invalid setting: {e}")))
}

/// `base`, overridden by the file section, overridden by the flags.
pub fn layered<T: Serialize + DeserializeOwned>(
    base: &T,
    file: Option<&Map<String, Value>>,
    flags: &Map<String, Value>,
) -> Result<T> {
    merge(base, file, flags, None)
}

/// As [`layered`], accepting only `allowed` keys.
pub fn layered_restricted<T: Serialize + DeserializeOwned>(
    base: &T,
    file: Option<&Map<String, Value>>,
    flags: &Map<String, Value>,
    allowed: &[&str],
) -> Result<T> {
    merge(base, file, flags, Some(allowed))
}
