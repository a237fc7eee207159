//! Flat key=value configuration: one `key = value` per line, `#` comments,
//! unknown keys rejected against a per-subcommand schema, environment
//! overrides via the `COBERT_` prefix, and deterministic snapshot output.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use anyhow::{Context, Result};

/// Environment override prefix: `COBERT_MASK_P=0.1` overrides key `mask_p`.
pub const ENV_PREFIX: &str = "COBERT_";

/// Marker for configuration/usage failures; the binary maps any error chain
/// carrying one to exit code 2 (runtime failures exit 1).
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: String) -> anyhow::Error {
    anyhow::Error::new(UsageError(msg))
}

/// One schema entry: a known key, its default (None = required or derived
/// later), and a short description used in error messages and snapshots.
#[derive(Debug, Clone)]
pub struct KeySpec {
    pub key: &'static str,
    pub default: Option<&'static str>,
    pub about: &'static str,
}

/// Resolved configuration: every schema key bound to a string value.
#[derive(Debug, Clone, Default)]
pub struct Config {
    values: BTreeMap<String, String>,
}

impl Config {
    /// Parse `text` against `schema`: schema defaults first, then file
    /// values, then `COBERT_*` environment overrides. Unknown or duplicate
    /// keys in the file are errors; keys left without a value stay unset.
    pub fn resolve(text: &str, schema: &[KeySpec]) -> Result<Config> {
        let mut values = BTreeMap::new();
        for spec in schema {
            if let Some(d) = spec.default {
                values.insert(spec.key.to_string(), d.to_string());
            }
        }
        let mut seen = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(usage(format!(
                    "config line {}: expected key=value, got `{raw}`",
                    lineno + 1
                )));
            };
            let k = k.trim();
            let v = v.trim();
            if !schema.iter().any(|s| s.key == k) {
                return Err(usage(format!("config line {}: unknown key `{k}`", lineno + 1)));
            }
            if seen.contains(&k.to_string()) {
                return Err(usage(format!("config line {}: duplicate key `{k}`", lineno + 1)));
            }
            seen.push(k.to_string());
            values.insert(k.to_string(), v.to_string());
        }
        for spec in schema {
            let env_key = format!("{ENV_PREFIX}{}", spec.key.to_uppercase());
            if let Ok(v) = std::env::var(&env_key) {
                values.insert(spec.key.to_string(), v);
            }
        }
        Ok(Config { values })
    }

    /// Load and resolve a config file; a missing `path` of `None` resolves
    /// pure defaults (plus environment overrides).
    pub fn load(path: Option<&Path>, schema: &[KeySpec]) -> Result<Config> {
        let text = match path {
            Some(p) => fs::read_to_string(p)
                .with_context(|| format!("reading config file {}", p.display()))?,
            None => String::new(),
        };
        Self::resolve(&text, schema)
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.values.insert(key.to_string(), value.to_string());
    }

    pub fn contains(&self, key: &str) -> bool {
        self.values.contains_key(key)
    }

    pub fn get_str(&self, key: &str) -> Result<&str> {
        self.values
            .get(key)
            .map(|s| s.as_str())
            .ok_or_else(|| usage(format!("config key `{key}` is required but unset")))
    }

    pub fn get_f64(&self, key: &str) -> Result<f64> {
        let s = self.get_str(key)?;
        s.parse().map_err(|_| usage(format!("config key `{key}`: `{s}` is not a real number")))
    }

    pub fn get_u64(&self, key: &str) -> Result<u64> {
        let s = self.get_str(key)?;
        s.parse().map_err(|_| usage(format!("config key `{key}`: `{s}` is not an integer")))
    }

    pub fn get_usize(&self, key: &str) -> Result<usize> {
        let s = self.get_str(key)?;
        s.parse().map_err(|_| usage(format!("config key `{key}`: `{s}` is not an integer")))
    }

    pub fn get_bool(&self, key: &str) -> Result<bool> {
        let s = self.get_str(key)?;
        match s {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" => Ok(false),
            other => Err(usage(format!("config key `{key}`: `{other}` is not a boolean"))),
        }
    }

    /// Deterministic snapshot: sorted `key = value` lines.
    pub fn snapshot_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.values {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(v);
            out.push('\n');
        }
        out
    }

    pub fn write_snapshot(&self, path: &Path) -> Result<()> {
        fs::write(path, self.snapshot_text())
            .with_context(|| format!("writing config snapshot {}", path.display()))?;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.values.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SCHEMA: &[KeySpec] = &[
        KeySpec { key: "alpha", default: Some("0.5"), about: "code-branch weight" },
        KeySpec { key: "mask_p", default: Some("0.065"), about: "mask start probability" },
        KeySpec { key: "manifest", default: None, about: "corpus manifest path" },
    ];

    #[test]
    fn defaults_file_and_env_layer_in_order() {
        let cfg = Config::resolve("mask_p = 0.08 # comment\n\n# full-line comment\n", SCHEMA)
            .unwrap();
        assert_eq!(cfg.get_f64("alpha").unwrap(), 0.5);
        assert_eq!(cfg.get_f64("mask_p").unwrap(), 0.08);
        assert!(cfg.get_str("manifest").is_err());
    }

    #[test]
    fn unknown_and_duplicate_keys_are_rejected() {
        let e = Config::resolve("bogus = 1\n", SCHEMA).unwrap_err();
        assert!(e.to_string().contains("bogus"), "{e}");
        let e = Config::resolve("alpha = 1\nalpha = 0\n", SCHEMA).unwrap_err();
        assert!(e.to_string().contains("duplicate"), "{e}");
        let e = Config::resolve("alpha\n", SCHEMA).unwrap_err();
        assert!(e.to_string().contains("key=value"), "{e}");
    }

    #[test]
    fn env_overrides_file_value() {
        // Distinct key set to avoid cross-test env interference.
        let schema = [KeySpec { key: "probe_env_knob", default: Some("1"), about: "test" }];
        std::env::set_var("COBERT_PROBE_ENV_KNOB", "7");
        let cfg = Config::resolve("probe_env_knob = 3\n", &schema).unwrap();
        std::env::remove_var("COBERT_PROBE_ENV_KNOB");
        assert_eq!(cfg.get_u64("probe_env_knob").unwrap(), 7);
    }

    #[test]
    fn snapshot_is_sorted_and_reparseable() {
        let mut cfg = Config::resolve("mask_p=0.08", SCHEMA).unwrap();
        cfg.set("manifest", "/tmp/m.tsv");
        let snap = cfg.snapshot_text();
        let lines: Vec<&str> = snap.lines().collect();
        assert_eq!(lines, vec!["alpha = 0.5", "manifest = /tmp/m.tsv", "mask_p = 0.08"]);
        let back = Config::resolve(&snap, SCHEMA).unwrap();
        assert_eq!(back.get_str("manifest").unwrap(), "/tmp/m.tsv");
        assert_eq!(back.get_f64("mask_p").unwrap(), 0.08);
    }

    #[test]
    fn typed_getters_report_bad_values() {
        let cfg = Config::resolve("alpha = maybe\n", SCHEMA).unwrap();
        assert!(cfg.get_f64("alpha").is_err());
        assert!(cfg.get_bool("alpha").is_err());
    }
}
