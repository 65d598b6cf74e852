//! Key-value run configuration.
//!
//! The on-disk format is one `key = value` pair per line, `#` comments, and
//! `include <relative-path>` lines that splice another file in place (later
//! assignments win). Keys are dotted, grouped by stage: `data.*`, `base.*`,
//! `vae.*`, `diffusion.*`, `sample.*`, `bake.*`, `eval.*`, `ablate.*`.
//!
//! The embedded default configuration documents every key; see
//! `Config::default_desk()` and `configs/default.cfg`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: malformed line {text:?} (expected `key = value` or `include <path>`)")]
    Malformed {
        path: PathBuf,
        line: usize,
        text: String,
    },
    #[error("include depth exceeded at {path} (cycle?)")]
    IncludeDepth { path: PathBuf },
    #[error("missing config key {key:?}")]
    MissingKey { key: String },
    #[error("config key {key:?} has value {value:?}, expected {expected}")]
    BadValue {
        key: String,
        value: String,
        expected: &'static str,
    },
}

type Result<T> = std::result::Result<T, ConfigError>;

const DEFAULT_CFG: &str = include_str!("../configs/default.cfg");

/// Resolved key-value configuration.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Config {
    values: BTreeMap<String, String>,
}

impl Config {
    pub fn empty() -> Self {
        Self::default()
    }

    /// The desk-scale defaults every run starts from.
    pub fn default_desk() -> Self {
        let mut cfg = Self::empty();
        cfg.merge_text(DEFAULT_CFG, Path::new("<default>"), 0)
            .expect("embedded default config must parse");
        cfg
    }

    /// Defaults overlaid with `path` (and anything it includes).
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg = Self::default_desk();
        cfg.merge_file(path, 0)?;
        Ok(cfg)
    }

    pub fn merge_file(&mut self, path: &Path, depth: usize) -> Result<()> {
        if depth > 16 {
            return Err(ConfigError::IncludeDepth {
                path: path.to_path_buf(),
            });
        }
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        self.merge_text(&text, path, depth)
    }

    fn merge_text(&mut self, text: &str, path: &Path, depth: usize) -> Result<()> {
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix("include ") {
                let rel = rest.trim();
                let target = path.parent().unwrap_or(Path::new(".")).join(rel);
                self.merge_file(&target, depth + 1)?;
                continue;
            }
            match line.split_once('=') {
                Some((k, v)) => {
                    self.values.insert(k.trim().to_string(), v.trim().to_string());
                }
                None => {
                    return Err(ConfigError::Malformed {
                        path: path.to_path_buf(),
                        line: idx + 1,
                        text: raw.to_string(),
                    })
                }
            }
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.values.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(|s| s.as_str())
    }

    pub fn str(&self, key: &str) -> Result<&str> {
        self.get(key).ok_or_else(|| ConfigError::MissingKey {
            key: key.to_string(),
        })
    }

    pub fn f64(&self, key: &str) -> Result<f64> {
        let v = self.str(key)?;
        v.parse().map_err(|_| ConfigError::BadValue {
            key: key.to_string(),
            value: v.to_string(),
            expected: "a float",
        })
    }

    pub fn usize(&self, key: &str) -> Result<usize> {
        let v = self.str(key)?;
        v.parse().map_err(|_| ConfigError::BadValue {
            key: key.to_string(),
            value: v.to_string(),
            expected: "an unsigned integer",
        })
    }

    pub fn u64(&self, key: &str) -> Result<u64> {
        let v = self.str(key)?;
        v.parse().map_err(|_| ConfigError::BadValue {
            key: key.to_string(),
            value: v.to_string(),
            expected: "an unsigned integer",
        })
    }

    pub fn bool(&self, key: &str) -> Result<bool> {
        let v = self.str(key)?;
        match v {
            "true" | "on" | "1" | "yes" => Ok(true),
            "false" | "off" | "0" | "no" => Ok(false),
            _ => Err(ConfigError::BadValue {
                key: key.to_string(),
                value: v.to_string(),
                expected: "a boolean",
            }),
        }
    }

    /// Comma-separated list of unsigned integers.
    pub fn usize_list(&self, key: &str) -> Result<Vec<usize>> {
        let v = self.str(key)?;
        v.split(',')
            .map(|s| {
                s.trim().parse().map_err(|_| ConfigError::BadValue {
                    key: key.to_string(),
                    value: v.to_string(),
                    expected: "a comma-separated list of unsigned integers",
                })
            })
            .collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.values.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    /// Hash of all keys matching any of `prefixes`, plus `extra` pairs.
    ///
    /// Stage caching scopes each stage to the key prefixes that affect it, so
    /// editing e.g. `sample.cfg_scale` leaves training-stage hashes intact.
    pub fn scoped_hash(&self, prefixes: &[&str], extra: &[(&str, &str)]) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.values.iter() {
            if prefixes.iter().any(|p| k.starts_with(p)) {
                h.update(k.as_bytes());
                h.update([b'=']);
                h.update(v.as_bytes());
                h.update([b'\n']);
            }
        }
        for (k, v) in extra {
            h.update(k.as_bytes());
            h.update([b'=']);
            h.update(v.as_bytes());
            h.update([b'\n']);
        }
        let digest = h.finalize();
        digest.iter().take(16).map(|b| format!("{b:02x}")).collect()
    }

    /// Full snapshot for manifests.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.values.iter() {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(v);
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_parse_and_cover_core_keys() {
        let cfg = Config::default_desk();
        assert_eq!(cfg.f64("vae.lambda_local").unwrap(), 3.0);
        assert_eq!(cfg.f64("vae.lambda_kl").unwrap(), 1e-6);
        assert_eq!(cfg.f64("vae.lambda_disc").unwrap(), 0.02);
        assert_eq!(cfg.f64("vae.lambda_reg").unwrap(), 3e-9);
        assert_eq!(cfg.usize("sample.steps").unwrap(), 30);
        assert_eq!(cfg.f64("sample.cfg_scale").unwrap(), 4.0);
        assert_eq!(cfg.f64("geometry.eps_z").unwrap(), 1e-2);
        assert_eq!(cfg.usize("geometry.window").unwrap(), 3);
    }

    #[test]
    fn include_and_override() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("base.cfg"), "a.x = 1\na.y = 2\n").unwrap();
        std::fs::write(
            dir.path().join("run.cfg"),
            "include base.cfg\na.y = 3   # override\n",
        )
        .unwrap();
        let mut cfg = Config::empty();
        cfg.merge_file(&dir.path().join("run.cfg"), 0).unwrap();
        assert_eq!(cfg.usize("a.x").unwrap(), 1);
        assert_eq!(cfg.usize("a.y").unwrap(), 3);
    }

    #[test]
    fn scoped_hash_ignores_other_prefixes() {
        let mut a = Config::empty();
        a.set("train.steps", "100");
        a.set("sample.cfg_scale", "4.0");
        let mut b = a.clone();
        b.set("sample.cfg_scale", "1.0");
        assert_eq!(
            a.scoped_hash(&["train."], &[]),
            b.scoped_hash(&["train."], &[])
        );
        assert_ne!(
            a.scoped_hash(&["sample."], &[]),
            b.scoped_hash(&["sample."], &[])
        );
    }

    #[test]
    fn malformed_line_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("bad.cfg"), "just words\n").unwrap();
        let mut cfg = Config::empty();
        let err = cfg.merge_file(&dir.path().join("bad.cfg"), 0).unwrap_err();
        assert!(err.to_string().contains("bad.cfg:1"));
    }
}
