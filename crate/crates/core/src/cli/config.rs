//! Layered settings: defaults, then a JSON file, then flag overrides.

use std::any::Any;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::error::{IvimError, Result};

pub(crate) fn read_config(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path).map_err(|e| IvimError::io(path, e))?;
    let value: Value = serde_json::from_str(&text)
        .map_err(|e| IvimError::Config(format!("{}: {e}", path.display())))?;
    // A provenance file reruns its command: only its settings are used.
    match value {
        Value::Object(mut m) if m.get("program").and_then(Value::as_str) == Some("ivim") => {
            Ok(m.remove("settings").unwrap_or(Value::Object(Map::new())))
        }
        Value::Object(_) => Ok(value),
        _ => Err(IvimError::Config(format!("{}: expected a JSON object", path.display()))),
    }
}

/// JSON value of a flag. Infinite floats become the string `"inf"`, which
/// the noise-level fields accept.
pub(crate) fn to_value<T: Serialize + 'static>(v: &T) -> Value {
    if let Some(x) = (v as &dyn Any).downcast_ref::<f64>() {
        if x.is_infinite() {
            return Value::String(if *x > 0.0 { "inf" } else { "-inf" }.into());
        }
    }
    serde_json::to_value(v).expect("flag values serialize")
}

fn merge(base: &mut Value, overlay: &Value, prefix: &str) -> Result<()> {
    let (Value::Object(b), Value::Object(o)) = (&mut *base, overlay) else {
        *base = overlay.clone();
        return Ok(());
    };
    for (k, v) in o {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match b.get_mut(k) {
            Some(slot) => merge(slot, v, &key)?,
            None => return Err(IvimError::Config(format!("unknown setting '{key}'"))),
        }
    }
    Ok(())
}

fn set_path(base: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut slot = base;
    for part in key.split('.') {
        slot = slot
            .as_object_mut()
            .and_then(|m| m.get_mut(part))
            .ok_or_else(|| IvimError::Config(format!("unknown setting '{key}'")))?;
    }
    *slot = value;
    Ok(())
}

/// Applies `file`, then `flags`, then `KEY=VALUE` strings on top of
/// `defaults`. Unknown keys and mistyped values are configuration errors.
pub fn resolve<T: Serialize + DeserializeOwned>(
    defaults: T,
    file: Option<&Value>,
    flags: &[(&str, Value)],
    sets: &[String],
) -> Result<T> {
    let mut value = serde_json::to_value(defaults).map_err(|e| IvimError::Config(e.to_string()))?;
    if let Some(f) = file {
        merge(&mut value, f, "")?;
    }
    for (k, v) in flags {
        set_path(&mut value, k, v.clone())?;
    }
    for s in sets {
        let (k, raw) = s
            .split_once('=')
            .ok_or_else(|| IvimError::Config(format!("--set expects KEY=VALUE, got '{s}'")))?;
        let v = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        set_path(&mut value, k.trim(), v)?;
    }
    serde_json::from_value(value).map_err(|e| IvimError::Config(format!("invalid settings: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;
    use serde_json::json;

    #[derive(Debug, Default, PartialEq, Serialize, Deserialize)]
    struct Inner {
        a: f64,
        b: Option<u32>,
    }

    #[derive(Debug, Default, PartialEq, Serialize, Deserialize)]
    struct Outer {
        n: usize,
        inner: Inner,
    }

    #[test]
    fn layers_apply_in_order() {
        let file = json!({"n": 3, "inner": {"a": 1.5}});
        let flags = [("n", json!(4))];
        let sets = ["inner.b=7".to_string()];
        let r: Outer = resolve(Outer::default(), Some(&file), &flags, &sets).unwrap();
        assert_eq!(r, Outer { n: 4, inner: Inner { a: 1.5, b: Some(7) } });
    }

    #[test]
    fn unknown_and_mistyped_keys() {
        let bad = json!({"inner": {"zz": 1}});
        assert!(matches!(
            resolve(Outer::default(), Some(&bad), &[], &[]),
            Err(IvimError::Config(_))
        ));
        let sets = ["n=abc".to_string()];
        assert!(matches!(resolve(Outer::default(), None, &[], &sets), Err(IvimError::Config(_))));
        let sets = ["missing=1".to_string()];
        assert!(matches!(resolve(Outer::default(), None, &[], &sets), Err(IvimError::Config(_))));
    }

    #[test]
    fn infinite_flags() {
        assert_eq!(to_value(&f64::INFINITY), json!("inf"));
        assert_eq!(to_value(&2.5f64), json!(2.5));
    }
}
