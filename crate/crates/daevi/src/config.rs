//! Run configuration files and dotted `key=value` overrides.
//!
//! Resolution order, later winning: built-in defaults, `DAEVI_SEED` (only
//! when neither the file nor an override sets `seed`), the JSON config file,
//! then overrides. Keys that do not name an existing field are rejected.

use std::fs;
use std::path::Path;

use daevi_core::config::RunConfig;
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::{Error, Result};

pub const SEED_ENV: &str = "DAEVI_SEED";

/// Serialise with the struct's field order; the same config always gives the
/// same text.
pub fn canonical_json(cfg: &RunConfig) -> String {
    serde_json::to_string(cfg).expect("config serialises")
}

pub fn config_hash(cfg: &RunConfig) -> [u8; 32] {
    Sha256::digest(canonical_json(cfg).as_bytes()).into()
}

pub fn hash_hex(cfg: &RunConfig) -> String {
    config_hash(cfg).iter().map(|b| format!("{b:02x}")).collect()
}

fn merge(base: &mut Value, patch: Value, path: &str) -> Result<()> {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                let key = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v, &key)?,
                    None => return Err(Error::Config(format!("unknown key {key}"))),
                }
            }
            Ok(())
        }
        (slot, v) => {
            *slot = v;
            Ok(())
        }
    }
}

/// `a.b.c=value`; the value is read as JSON, falling back to a bare string.
pub fn parse_override(text: &str) -> Result<(String, Value)> {
    let (key, raw) = text.split_once('=').ok_or_else(|| Error::Usage(format!("override {text:?} is not key=value")))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(Error::Usage(format!("override {text:?} has an empty key segment")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok((key.to_string(), value))
}

fn apply_override(root: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut slot = root;
    for part in key.split('.') {
        slot = slot
            .as_object_mut()
            .and_then(|m: &mut Map<String, Value>| m.get_mut(part))
            .ok_or_else(|| Error::Config(format!("unknown key {key}")))?;
    }
    *slot = value;
    Ok(())
}

/// Resolve the configuration from an optional file, overrides and the seed
/// environment variable (`env_seed`, passed in for testability).
pub fn resolve(file_text: Option<&str>, overrides: &[String], env_seed: Option<&str>) -> Result<RunConfig> {
    resolve_from(RunConfig::default(), file_text, overrides, env_seed)
}

/// As [`resolve`], starting from `base` instead of the defaults.
pub fn resolve_from(base: RunConfig, file_text: Option<&str>, overrides: &[String], env_seed: Option<&str>) -> Result<RunConfig> {
    let mut root = serde_json::to_value(&base).expect("config serialises");
    let mut seed_set = false;
    if let Some(text) = file_text {
        let patch: Value = serde_json::from_str(text).map_err(|e| Error::Config(format!("config file: {e}")))?;
        if !patch.is_object() {
            return Err(Error::Config("config file must hold a JSON object".into()));
        }
        seed_set |= patch.get("seed").is_some();
        merge(&mut root, patch, "")?;
    }
    let parsed: Vec<(String, Value)> = overrides.iter().map(|o| parse_override(o)).collect::<Result<_>>()?;
    seed_set |= parsed.iter().any(|(k, _)| k == "seed");
    if let (false, Some(s)) = (seed_set, env_seed) {
        let seed: u64 = s.trim().parse().map_err(|_| Error::Config(format!("{SEED_ENV}={s:?} is not an unsigned integer")))?;
        root["seed"] = Value::from(seed);
    }
    for (k, v) in parsed {
        apply_override(&mut root, &k, v)?;
    }
    let cfg: RunConfig = serde_json::from_value(root).map_err(|e| Error::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let text = match path {
        Some(p) => Some(fs::read_to_string(p).map_err(|e| Error::io(p, e))?),
        None => None,
    };
    let env = std::env::var(SEED_ENV).ok();
    resolve(text.as_deref(), overrides, env.as_deref())
}
