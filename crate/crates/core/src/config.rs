//! Config files (JSON or TOML) and dotted `key=value` overrides.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use crate::error::{Error, Result};

/// Load a config from `.json` or `.toml`. Unknown keys are rejected by the
/// target type.
pub fn load_config<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    match path.extension().and_then(|e| e.to_str()) {
        Some("toml") => {
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
        }
        _ => serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display()))),
    }
}

/// Parse an override value: JSON when it parses as JSON, otherwise a string.
fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

fn set_path(root: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let object = node.as_object_mut().ok_or_else(|| {
            Error::Config(format!(
                "override '{key}': '{}' is not a table",
                parts[..i].join(".")
            ))
        })?;
        if !object.contains_key(*part) {
            return Err(Error::Config(format!("unknown config key '{key}'")));
        }
        let slot = object.get_mut(*part).expect("checked above");
        if i + 1 == parts.len() {
            *slot = value;
            return Ok(());
        }
        // Optional tables serialize as null; give them a shape to descend into.
        if slot.is_null() {
            *slot = Value::Object(Default::default());
        }
        node = slot;
    }
    Ok(())
}

/// Apply `key.path=value` overrides to `config`. Keys must already exist in
/// the serialized config; the result must deserialize back into `T`.
pub fn apply_overrides<T: Serialize + DeserializeOwned>(
    config: &T,
    overrides: &[String],
) -> Result<T> {
    if overrides.is_empty() {
        return serde_json::to_value(config)
            .and_then(serde_json::from_value)
            .map_err(|e| Error::Config(e.to_string()));
    }
    let mut value = serde_json::to_value(config).map_err(|e| Error::Config(e.to_string()))?;
    for entry in overrides {
        let (key, raw) = entry.split_once('=').ok_or_else(|| {
            Error::Config(format!("override '{entry}' is not of the form key=value"))
        })?;
        set_path(&mut value, key.trim(), parse_value(raw.trim()))?;
    }
    serde_json::from_value(value).map_err(|e| Error::Config(format!("invalid override: {e}")))
}
