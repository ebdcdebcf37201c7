//! Flat `key = value` configuration text shared by model, data, and
//! training settings.

use std::fmt::Display;
use std::str::FromStr;

use thiserror::Error;

use crate::data::DatasetSpec;
use crate::model::config::ModelConfig;
use crate::train::TrainConfig;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, got `{text}`")]
    Syntax { line: usize, text: String },
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("key `{key}`: cannot parse `{value}`: {reason}")]
    Value { key: String, value: String, reason: String },
    #[error("{0}")]
    Invalid(String),
}

/// A settings group addressable by flat keys.
pub trait KvConfig {
    /// Apply one setting. Returns `Ok(false)` when the key is not ours.
    fn set(&mut self, key: &str, value: &str) -> Result<bool, ConfigError>;
    /// Every key with its current value, in a stable order.
    fn entries(&self) -> Vec<(&'static str, String)>;
    fn validate(&self) -> Result<(), ConfigError>;
}

pub fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: Display,
{
    value.trim().parse().map_err(|e: T::Err| ConfigError::Value {
        key: key.to_string(),
        value: value.to_string(),
        reason: e.to_string(),
    })
}

pub fn parse_bool(key: &str, value: &str) -> Result<bool, ConfigError> {
    match value.trim() {
        "1" | "true" | "on" | "yes" => Ok(true),
        "0" | "false" | "off" | "no" => Ok(false),
        _ => Err(ConfigError::Value {
            key: key.to_string(),
            value: value.to_string(),
            reason: "expected a boolean".into(),
        }),
    }
}

pub fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>, ConfigError>
where
    T::Err: Display,
{
    value.split(',').map(|v| parse_value(key, v)).collect()
}

pub fn join<T: Display>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

/// Split text into `(key, value)` pairs; `#` starts a comment.
pub fn parse_lines(text: &str) -> Result<Vec<(String, String)>, ConfigError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
            line: i + 1,
            text: raw.to_string(),
        })?;
        let k = k.trim();
        if k.is_empty() {
            return Err(ConfigError::Syntax { line: i + 1, text: raw.to_string() });
        }
        out.push((k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

pub fn render(entries: &[(&'static str, String)]) -> String {
    entries.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Preset {
    Tiny,
    Paper,
}

impl FromStr for Preset {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, ConfigError> {
        match s {
            "tiny" => Ok(Preset::Tiny),
            "paper" => Ok(Preset::Paper),
            other => Err(ConfigError::Value {
                key: "preset".into(),
                value: other.into(),
                reason: "expected `tiny` or `paper`".into(),
            }),
        }
    }
}

/// Everything one run needs.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub data: DatasetSpec,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Tiny => RunConfig {
                model: ModelConfig::tiny(),
                data: DatasetSpec::default(),
                train: TrainConfig::default(),
            },
            Preset::Paper => RunConfig {
                model: ModelConfig::paper(),
                data: DatasetSpec::paper(),
                train: TrainConfig::paper(),
            },
        }
    }

    /// Route a key to whichever group owns it.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        if self.model.set(key, value)? || self.data.set(key, value)? || self.train.set(key, value)? {
            Ok(())
        } else {
            Err(ConfigError::UnknownKey(key.to_string()))
        }
    }

    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (k, v) in parse_lines(text)? {
            self.set(&k, &v)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.model.validate()?;
        self.data.validate()?;
        self.train.validate()?;
        if self.data.height != self.model.height || self.data.width != self.model.width {
            return Err(ConfigError::Invalid(format!(
                "clip size {}×{} differs from model input {}×{}",
                self.data.height, self.data.width, self.model.height, self.model.width
            )));
        }
        if self.data.frames < self.model.frames {
            return Err(ConfigError::Invalid(format!(
                "clips have {} frames but the model samples {}",
                self.data.frames, self.model.frames
            )));
        }
        if self.data.num_classes() > self.model.num_classes {
            return Err(ConfigError::Invalid(format!(
                "dataset has {} classes but the head has {}",
                self.data.num_classes(),
                self.model.num_classes
            )));
        }
        Ok(())
    }

    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let mut e = self.model.entries();
        e.extend(self.data.entries());
        e.extend(self.train.entries());
        e
    }

    pub fn to_text(&self) -> String {
        render(&self.entries())
    }
}
