//! JSON configuration with command-line overrides.
//!
//! A config file is a JSON object whose keys are the fields of the target
//! type; missing keys take their defaults and unknown keys are rejected.
//! Overrides have the form `key=value`. The value is read as JSON when it
//! parses (`c=1.0`, `max_iter=10`) and as a string otherwise
//! (`prior=standard`).

use std::fs;
use std::path::Path;

use apovae_core::trainer::TrainConfig;
use serde::de::DeserializeOwned;
use serde_json::{Map, Value};

use crate::error::{Error, Result};

/// Parses `text` as a JSON object, applies `overrides` and deserializes.
/// `origin` names the source in diagnostics.
pub fn parse_with_overrides<T: DeserializeOwned>(text: &str, origin: &str, overrides: &[String]) -> Result<T> {
    let mut value: Value = if text.trim().is_empty() {
        Value::Object(Map::new())
    } else {
        serde_json::from_str(text).map_err(|e| {
            Error::Usage(format!("{origin}: malformed JSON at line {}, column {}: {e}", e.line(), e.column()))
        })?
    };
    let obj = value.as_object_mut().ok_or_else(|| Error::Usage(format!("{origin}: expected a JSON object")))?;
    for o in overrides {
        let (k, v) =
            o.split_once('=').ok_or_else(|| Error::Usage(format!("override `{o}` is not of the form key=value")))?;
        let v = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
        obj.insert(k.trim().to_string(), v);
    }
    serde_json::from_value(value).map_err(|e| Error::Usage(format!("{origin}: {e}")))
}

/// Reads a config file, or starts from `{}` when `path` is `None`.
pub fn load<T: DeserializeOwned>(path: Option<&Path>, overrides: &[String]) -> Result<T> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::Usage(format!("{}: {e}", p.display())))?;
            parse_with_overrides(&text, &p.display().to_string(), overrides)
        }
        None => parse_with_overrides("{}", "config", overrides),
    }
}

/// Loads and validates a training config.
pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<TrainConfig> {
    let cfg: TrainConfig = load(path, overrides)?;
    cfg.validate().map_err(|e| Error::Usage(format!("invalid config: {e}")))?;
    Ok(cfg)
}
