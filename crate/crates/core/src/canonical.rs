//! Canonical JSON: sorted keys, no insignificant whitespace, floats rounded
//! to 9 significant digits. Every persisted line and every request hash goes
//! through here so digests are stable across runs.

use serde::Serialize;
use serde_json::{Number, Value};
use sha2::{Digest, Sha256};

pub const SIGNIFICANT_DIGITS: usize = 9;

pub fn round_significant(x: f64) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    // `{:.8e}` keeps 9 significant digits; parsing back gives the nearest f64.
    format!("{:.*e}", SIGNIFICANT_DIGITS - 1, x)
        .parse()
        .unwrap_or(x)
}

pub fn canonicalize(value: Value) -> Value {
    match value {
        Value::Number(n) => {
            if n.is_f64() {
                let f = n.as_f64().unwrap_or_default();
                Number::from_f64(round_significant(f))
                    .map(Value::Number)
                    .unwrap_or(Value::Null)
            } else {
                Value::Number(n)
            }
        }
        Value::Array(items) => Value::Array(items.into_iter().map(canonicalize).collect()),
        Value::Object(map) => {
            // Insert in sorted order so the result is sorted whether or not
            // serde_json's `preserve_order` feature is active in the build.
            let mut entries: Vec<_> = map.into_iter().collect();
            entries.sort_by(|a, b| a.0.cmp(&b.0));
            Value::Object(
                entries
                    .into_iter()
                    .map(|(k, v)| (k, canonicalize(v)))
                    .collect(),
            )
        }
        other => other,
    }
}

pub fn to_canonical_value<T: Serialize + ?Sized>(value: &T) -> Value {
    canonicalize(serde_json::to_value(value).expect("serializable value"))
}

pub fn to_canonical_string<T: Serialize + ?Sized>(value: &T) -> String {
    to_canonical_value(value).to_string()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash of the canonical JSON form of `value`.
pub fn content_hash<T: Serialize + ?Sized>(value: &T) -> String {
    sha256_hex(to_canonical_string(value).as_bytes())
}
