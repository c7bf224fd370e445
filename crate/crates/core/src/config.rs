//! Run configuration read from TOML, with dotted `key=value` overrides.
//!
//! ```toml
//! [paths]
//! data = "data"
//! out = "runs/default"
//!
//! [train]
//! lr = 1e-3
//! epochs = 30
//!
//! [synth]
//! identities = 32
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalkit::Strategy;
use crate::synth::SynthConfig;
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Dataset directory holding `manifest.csv`.
    pub data: PathBuf,
    /// Output directory for checkpoints, logs, metrics and graph dumps.
    pub out: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            data: PathBuf::from("data"),
            out: PathBuf::from("runs/default"),
        }
    }
}

impl Paths {
    pub fn manifest(&self) -> PathBuf {
        self.data.join("manifest.csv")
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.out.join("model.agrl")
    }

    pub fn loss_log(&self) -> PathBuf {
        self.out.join("loss.csv")
    }

    pub fn metrics(&self) -> PathBuf {
        self.out.join("metrics.csv")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// 1 = first frame of each chunk, 2 = every sequence through the chunks.
    pub strategy: u8,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { strategy: 1 }
    }
}

impl EvalConfig {
    pub fn strategy(&self) -> Result<Strategy> {
        Strategy::parse(self.strategy)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub paths: Paths,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub synth: SynthConfig,
}

impl RunConfig {
    /// Parses `text`, applies `overrides` in order, then validates.
    pub fn parse(text: &str, overrides: &[String], origin: &Path) -> Result<Self> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::format(origin, e.message().to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("{}: {}", origin.display(), e.message())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path`, or starts from defaults when no path is given.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                Self::parse(&text, overrides, p)
            }
            None => Self::parse("", overrides, Path::new("<defaults>")),
        }
    }

    /// Sets the training and generator seeds together.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.train.seed = seed;
        self.synth.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.synth.validate()?;
        self.eval.strategy()?;
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Applies `section.key=value`. The value is read as a TOML literal and
/// falls back to a bare string, so `paths.out=runs/a` needs no quotes.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override key `{key}` is malformed")));
    }
    let (last, path) = parts.split_last().expect("split yields one part");
    let mut node = table;
    for p in path {
        let entry = node
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{p}` is not a table")))?;
    }
    node.insert(last.to_string(), value);
    Ok(())
}
