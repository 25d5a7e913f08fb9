//! Layered settings: built-in defaults, then the TOML config file, then `CALLMASK_*`
//! environment variables, then command-line flags.
//!
//! In the config file, top-level scalar keys apply to every subcommand that has a setting of
//! that name; a `[subcommand]` table applies to that subcommand only and may not contain
//! unknown keys. Environment variables are `CALLMASK_<KEY>` or, taking precedence,
//! `CALLMASK_<SUBCOMMAND>_<KEY>`, with `-` in the subcommand name written as `_`.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::Result;
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use crate::artifact::{read_text, user};

#[derive(Debug, Clone, Default)]
pub struct Sources {
    file: toml::Table,
    env: BTreeMap<String, String>,
}

impl Sources {
    /// Reads the config file, if any, and the process environment.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let file = match path {
            Some(p) => read_text(p)?.parse::<toml::Table>().map_err(|e| user(format!("{}: {e}", p.display())))?,
            None => toml::Table::new(),
        };
        let env = std::env::vars().filter(|(k, _)| k.starts_with("CALLMASK_")).collect();
        Ok(Sources { file, env })
    }

    pub fn from_parts(file: toml::Table, env: BTreeMap<String, String>) -> Self {
        Sources { file, env }
    }

    /// Merges every layer over `T::default()`. `flags` serializes to an object whose
    /// `null` entries are flags that were not given.
    pub fn resolve<T, F>(&self, section: &str, flags: &F) -> Result<T>
    where
        T: Serialize + DeserializeOwned + Default,
        F: Serialize,
    {
        let Value::Object(mut merged) = serde_json::to_value(T::default())? else {
            anyhow::bail!("settings for {section:?} do not serialize to an object");
        };
        let keys: Vec<String> = merged.keys().cloned().collect();
        for (k, v) in &self.file {
            if !v.is_table() && merged.contains_key(k) {
                merged.insert(k.clone(), serde_json::to_value(v)?);
            }
        }
        if let Some(t) = self.file.get(section) {
            let table = t.as_table().ok_or_else(|| user(format!("config entry {section:?} must be a table")))?;
            for (k, v) in table {
                if !merged.contains_key(k) {
                    return Err(user(format!("unknown key {k:?} in config table [{section}]")));
                }
                merged.insert(k.clone(), serde_json::to_value(v)?);
            }
        }
        let prefix = section.to_uppercase().replace('-', "_");
        for k in &keys {
            let upper = k.to_uppercase();
            for name in [format!("CALLMASK_{upper}"), format!("CALLMASK_{prefix}_{upper}")] {
                if let Some(raw) = self.env.get(&name) {
                    let v = env_value(&merged[k], raw);
                    merged.insert(k.clone(), v);
                }
            }
        }
        if let Value::Object(given) = serde_json::to_value(flags)? {
            for (k, v) in given {
                if !v.is_null() {
                    merged.insert(k, v);
                }
            }
        }
        serde_json::from_value(Value::Object(merged)).map_err(|e| user(format!("invalid {section} settings: {e}")))
    }
}

/// Strings stay verbatim; everything else is parsed as a JSON scalar.
fn env_value(current: &Value, raw: &str) -> Value {
    match current {
        Value::String(_) | Value::Null => Value::String(raw.to_string()),
        _ => serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Debug, Serialize, Deserialize, PartialEq)]
    #[serde(default, deny_unknown_fields)]
    struct S {
        steps: u64,
        lr: f64,
        name: String,
        path: Option<String>,
    }

    impl Default for S {
        fn default() -> Self {
            S { steps: 10, lr: 0.5, name: "a".into(), path: None }
        }
    }

    #[derive(Serialize, Default)]
    struct Flags {
        steps: Option<u64>,
        lr: Option<f64>,
    }

    fn sources(toml_text: &str, env: &[(&str, &str)]) -> Sources {
        Sources::from_parts(
            toml_text.parse().unwrap(),
            env.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        )
    }

    #[test]
    fn defaults_when_nothing_is_given() {
        let s: S = sources("", &[]).resolve("train", &Flags::default()).unwrap();
        assert_eq!(s, S::default());
    }

    #[test]
    fn precedence_file_env_flags() {
        let src = sources("steps = 1\nlr = 0.1\n[train]\nsteps = 2\nname = \"f\"\n", &[("CALLMASK_STEPS", "3")]);
        let s: S = src.resolve("train", &Flags::default()).unwrap();
        assert_eq!((s.steps, s.lr, s.name.as_str()), (3, 0.1, "f"));
        let s: S = src.resolve("train", &Flags { steps: Some(4), lr: None }).unwrap();
        assert_eq!(s.steps, 4);
    }

    #[test]
    fn section_env_beats_plain_env() {
        let src = sources("", &[("CALLMASK_STEPS", "3"), ("CALLMASK_EVAL_LOSS_STEPS", "5"), ("CALLMASK_PATH", "x")]);
        let s: S = src.resolve("eval-loss", &Flags::default()).unwrap();
        assert_eq!(s.steps, 5);
        assert_eq!(s.path.as_deref(), Some("x"));
    }

    #[test]
    fn other_sections_are_ignored_and_unknown_keys_rejected() {
        let s: S = sources("[mask]\nsteps = 9\n", &[]).resolve("train", &Flags::default()).unwrap();
        assert_eq!(s.steps, 10);
        assert!(sources("[train]\nstep = 9\n", &[]).resolve::<S, _>("train", &Flags::default()).is_err());
        assert!(sources("", &[("CALLMASK_STEPS", "many")]).resolve::<S, _>("train", &Flags::default()).is_err());
    }
}
