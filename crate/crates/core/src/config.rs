//! One TOML file covering every tunable, with `section.key=value`
//! overrides applied on top.
//!
//! ```toml
//! [model]
//! dim = 32
//! [training]
//! task_weights = [0.3333333333333333, 0.3333333333333333, 0.3333333333333333]
//! [serving]
//! gamma = [1.0, 1.0, -1.0]
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::feedback::FeedbackConfig;
use crate::model::ModelConfig;
use crate::serving::FusionConfig;
use crate::simulator::{AbTestConfig, WorldConfig};
use crate::training::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub model: ModelConfig,
    pub feedback: FeedbackConfig,
    pub training: TrainConfig,
    pub serving: FusionConfig,
    pub simulator: WorldConfig,
    pub abtest: AbTestConfig,
}

impl Config {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.feedback.validate()?;
        self.training.validate()?;
        self.serving.validate()?;
        self.simulator.validate()?;
        self.abtest.validate()
    }

    /// Parses and validates; missing keys take their defaults.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        Self::with_overrides::<&str>(text, &[])
    }

    /// Parses `text`, then applies each `section.key=value` override.
    pub fn with_overrides<S: AsRef<str>>(text: &str, overrides: &[S]) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o.as_ref())?;
        }
        let cfg: Config = table.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path` (or starts from defaults) and applies `overrides`.
    pub fn load<S: AsRef<str>>(path: Option<&Path>, overrides: &[S]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
            None => String::new(),
        };
        Self::with_overrides(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// First eight bytes of the SHA-256 of the canonical TOML text.
    pub fn hash(&self) -> u64 {
        let d = Sha256::digest(self.to_toml().as_bytes());
        u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
    }
}

/// Sets `section.key` in `table` from `section.key=value`. The value is
/// read as a TOML literal, falling back to a bare string.
pub fn apply_override(table: &mut toml::Table, arg: &str) -> Result<()> {
    let arg = arg.strip_prefix("--").unwrap_or(arg);
    let (path, raw) = arg
        .split_once('=')
        .ok_or_else(|| Error::Usage(format!("override `{arg}` is not key=value")))?;
    let (section, key) = path
        .split_once('.')
        .filter(|(s, k)| !s.is_empty() && !k.is_empty() && !k.contains('.'))
        .ok_or_else(|| Error::Usage(format!("override key `{path}` must be section.key")))?;
    let value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_owned()),
    };
    let entry = table
        .entry(section.to_owned())
        .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    let toml::Value::Table(sec) = entry else {
        return Err(Error::Config(format!("`{section}` is not a section")));
    };
    sec.insert(key.to_owned(), value);
    Ok(())
}
