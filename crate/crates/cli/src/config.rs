use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::error::{CliError, CliResult};

/// Recursively overlays `patch` onto `base`; objects merge, anything else
/// replaces.
pub fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                merge(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (b, p) => *b = p,
    }
}

/// Applies one `dotted.key=value` override. The value is read as JSON when
/// it parses, otherwise as a bare string.
pub fn apply_set(root: &mut Value, assignment: &str) -> CliResult<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::config("--set", format!("expected key=value, got `{assignment}`")))?;
    if path.is_empty() || path.split('.').any(str::is_empty) {
        return Err(CliError::config("--set", format!("bad key `{path}`")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let keys: Vec<&str> = path.split('.').collect();
    for key in &keys[..keys.len() - 1] {
        if !node.is_object() {
            *node = Value::Object(Map::new());
        }
        node = node
            .as_object_mut()
            .expect("object")
            .entry(key.to_string())
            .or_insert_with(|| Value::Object(Map::new()));
    }
    if !node.is_object() {
        return Err(CliError::config(path, "parent is not an object"));
    }
    node.as_object_mut().expect("object").insert(keys[keys.len() - 1].to_string(), value);
    Ok(())
}

/// Defaults, then the `--config` file, then `--set` overrides, then
/// `extra` for flags that name a field directly.
pub fn resolve<T: Serialize + DeserializeOwned + Default>(
    file: Option<&Path>,
    sets: &[String],
    extra: impl FnOnce(&mut Value),
) -> CliResult<T> {
    let mut value = serde_json::to_value(T::default()).expect("default config serialises");
    if let Some(path) = file {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::config("--config", format!("cannot read {}: {e}", path.display())))?;
        let patch: Value = serde_json::from_str(&text)
            .map_err(|e| CliError::config("--config", format!("{}: {e}", path.display())))?;
        if !patch.is_object() {
            return Err(CliError::config("--config", "top level must be a JSON object"));
        }
        merge(&mut value, patch);
    }
    for s in sets {
        apply_set(&mut value, s)?;
    }
    extra(&mut value);
    serde_json::from_value(value).map_err(|e| CliError::config("config", e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn merge_is_deep() {
        let mut a = json!({"x": 1, "o": {"a": 1, "b": 2}});
        merge(&mut a, json!({"o": {"b": 3}, "y": true}));
        assert_eq!(a, json!({"x": 1, "o": {"a": 1, "b": 3}, "y": true}));
    }

    #[test]
    fn dotted_sets() {
        let mut v = json!({"weights": {"lambda_orth": 0.1}, "variant": "v2"});
        apply_set(&mut v, "weights.lambda_orth=0.5").unwrap();
        apply_set(&mut v, "variant=v3").unwrap();
        apply_set(&mut v, "corpus_spec.seed=4").unwrap();
        assert_eq!(v, json!({"weights": {"lambda_orth": 0.5}, "variant": "v3", "corpus_spec": {"seed": 4}}));
        assert!(apply_set(&mut v, "novalue").is_err());
        assert!(apply_set(&mut v, "a..b=1").is_err());
    }
}
