use serde_json::Value;

use super::config::TrainConfig;
use crate::error::{Error, Result};

/// Environment variable that replaces the configured seed.
pub const SEED_ENV: &str = "LCSB_SEED";

/// Applies `path.to.field=value` to a JSON document. The value is parsed as
/// JSON when possible and taken as a string otherwise.
pub fn apply_override(doc: &mut Value, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    set_path(doc, path, value)
}

/// Sets the field at dotted `path`, creating intermediate objects.
pub fn set_path(doc: &mut Value, path: &str, value: Value) -> Result<()> {
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::Config(format!("bad override path `{path}`")));
    }
    let mut node = doc;
    for key in &keys[..keys.len() - 1] {
        if !node.is_object() {
            return Err(Error::Config(format!("`{path}`: `{key}` is not inside an object")));
        }
        node = node
            .as_object_mut()
            .expect("checked")
            .entry(key.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    let obj = node
        .as_object_mut()
        .ok_or_else(|| Error::Config(format!("`{path}` does not lead to an object")))?;
    obj.insert(keys[keys.len() - 1].to_string(), value);
    Ok(())
}

pub fn apply_overrides<'a>(doc: &mut Value, assignments: impl IntoIterator<Item = &'a str>) -> Result<()> {
    assignments.into_iter().try_for_each(|a| apply_override(doc, a))
}

/// Deserializes and validates a config document.
pub fn config_from_value(doc: Value) -> Result<TrainConfig> {
    let cfg: TrainConfig = serde_json::from_value(doc).map_err(|e| Error::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}
