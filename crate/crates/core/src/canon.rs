//! Canonical JSON encoding.
//!
//! Context fingerprints hash serialized bytes and wire conformance demands
//! byte-stable re-encoding, so everything that leaves this crate as JSON is
//! rendered with object keys sorted and no insignificant whitespace. The
//! sort is applied explicitly rather than relying on `serde_json`'s map
//! ordering, which can change under feature unification.

use serde::Serialize;
use serde_json::{Map, Value};

/// Rebuilds `value` with every object's keys in ascending order.
pub fn canonicalize(value: &Value) -> Value {
    match value {
        Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            let mut out = Map::new();
            for k in keys {
                out.insert(k.clone(), canonicalize(&map[k]));
            }
            Value::Object(out)
        }
        Value::Array(items) => Value::Array(items.iter().map(canonicalize).collect()),
        other => other.clone(),
    }
}

/// Serializes `value` to the canonical compact form.
pub fn to_canonical_string(value: &Value) -> String {
    serde_json::to_string(&canonicalize(value)).expect("canonical value serializes")
}

/// Serializes any `Serialize` type canonically.
pub fn encode<T: Serialize>(value: &T) -> Result<String, serde_json::Error> {
    let v = serde_json::to_value(value)?;
    Ok(to_canonical_string(&v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn keys_are_sorted_recursively() {
        let v = json!({"b": 1, "a": {"z": [{"y": 2, "x": 3}], "w": null}});
        assert_eq!(
            to_canonical_string(&v),
            r#"{"a":{"w":null,"z":[{"x":3,"y":2}]},"b":1}"#
        );
    }

    #[test]
    fn scalars_pass_through() {
        assert_eq!(to_canonical_string(&json!(1.5)), "1.5");
        assert_eq!(to_canonical_string(&json!("s")), "\"s\"");
    }

    #[test]
    fn canonical_encoding_is_stable() {
        let v = json!({"k": [1, 2.25, "three"], "a": true});
        assert_eq!(to_canonical_string(&v), to_canonical_string(&canonicalize(&v)));
    }
}
