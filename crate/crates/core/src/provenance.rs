//! Configuration fingerprints embedded in every output artifact.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool: String,
    pub version: String,
    pub stage: String,
    pub config: serde_json::Value,
    pub config_hash: String,
}

impl Provenance {
    pub fn new<C: Serialize>(stage: &str, config: &C) -> Self {
        let config = serde_json::to_value(config).expect("configuration serializes to JSON");
        Provenance {
            tool: "callmask".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            stage: stage.into(),
            config_hash: config_hash(&config),
            config,
        }
    }

    /// Compact JSON with sorted object keys.
    pub fn to_json(&self) -> String {
        let value = serde_json::to_value(self).expect("provenance serializes");
        serde_json::to_string(&value).expect("provenance serializes")
    }
}

/// Hex SHA-256 of the canonical (sorted-key, compact) JSON encoding.
pub fn config_hash(config: &serde_json::Value) -> String {
    let canonical = serde_json::to_string(config).expect("JSON value serializes");
    let digest = Sha256::digest(canonical.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn hash_ignores_key_order() {
        let a: serde_json::Value = serde_json::from_str(r#"{"b":1,"a":[1,2]}"#).unwrap();
        let b = json!({"a": [1, 2], "b": 1});
        assert_eq!(config_hash(&a), config_hash(&b));
        assert_ne!(config_hash(&a), config_hash(&json!({"a": [2, 1], "b": 1})));
        assert_eq!(config_hash(&b).len(), 64);
    }

    #[test]
    fn known_digest() {
        // sha256("{}")
        assert_eq!(config_hash(&json!({})), "44136fa355b3678a1146ad16f7e8649e94fb4fc21fe77e8310c060f61caaff8a");
    }
}
