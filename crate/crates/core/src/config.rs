//! Flat key=value configuration shared by the controller, agents, and the
//! CLI client.
//!
//! Recognized keys: `controller_addr`, `secret_file`, `node_name`,
//! `admins` (comma-separated usernames), `skew_window_secs`. Lines starting
//! with `#` and blank lines are ignored.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::Path;

use thiserror::Error;

use crate::control::DEFAULT_SKEW_WINDOW_SECS;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("bad config line {line}: {text:?}")]
    BadLine { line: usize, text: String },
    #[error("bad value for {key}: {value:?}")]
    BadValue { key: String, value: String },
    #[error("missing config key {0}")]
    MissingKey(&'static str),
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
}

#[derive(Debug, Clone)]
pub struct Config {
    pub controller_addr: String,
    pub secret_file: Option<String>,
    pub node_name: Option<String>,
    pub admins: Vec<String>,
    pub skew_window_secs: i64,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            controller_addr: "127.0.0.1:6817".to_string(),
            secret_file: None,
            node_name: None,
            admins: vec!["admin".to_string()],
            skew_window_secs: DEFAULT_SKEW_WINDOW_SECS,
        }
    }
}

impl Config {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut map = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or(ConfigError::BadLine {
                line: i + 1,
                text: raw.to_string(),
            })?;
            map.insert(key.trim().to_string(), value.trim().to_string());
        }
        let mut cfg = Config::default();
        if let Some(v) = map.get("controller_addr") {
            cfg.controller_addr = v.clone();
        }
        if let Some(v) = map.get("secret_file") {
            cfg.secret_file = Some(v.clone());
        }
        if let Some(v) = map.get("node_name") {
            cfg.node_name = Some(v.clone());
        }
        if let Some(v) = map.get("admins") {
            cfg.admins = v
                .split(',')
                .map(|s| s.trim().to_string())
                .filter(|s| !s.is_empty())
                .collect();
        }
        if let Some(v) = map.get("skew_window_secs") {
            cfg.skew_window_secs = v.parse().map_err(|_| ConfigError::BadValue {
                key: "skew_window_secs".to_string(),
                value: v.clone(),
            })?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    /// Read the shared secret named by `secret_file`.
    pub fn load_secret(&self) -> Result<Vec<u8>, ConfigError> {
        let path = self.secret_file.as_ref().ok_or(ConfigError::MissingKey("secret_file"))?;
        let bytes = fs::read(path).map_err(|source| ConfigError::Io {
            path: path.clone(),
            source,
        })?;
        // trim a trailing newline so `echo secret > file` works
        let end = bytes
            .iter()
            .rposition(|b| *b != b'\n' && *b != b'\r')
            .map_or(0, |i| i + 1);
        Ok(bytes[..end].to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_flat_key_values() {
        let cfg = Config::parse(
            "# gridling config\ncontroller_addr = 127.0.0.1:7000\nadmins=root, ops\nskew_window_secs=60\n",
        )
        .unwrap();
        assert_eq!(cfg.controller_addr, "127.0.0.1:7000");
        assert_eq!(cfg.admins, vec!["root", "ops"]);
        assert_eq!(cfg.skew_window_secs, 60);
    }

    #[test]
    fn defaults_apply() {
        let cfg = Config::parse("").unwrap();
        assert_eq!(cfg.skew_window_secs, DEFAULT_SKEW_WINDOW_SECS);
        assert_eq!(cfg.admins, vec!["admin"]);
    }

    #[test]
    fn bad_line_reported() {
        assert!(Config::parse("not a kv line\n").is_err());
    }
}
