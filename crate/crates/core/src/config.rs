//! Run configuration: a TOML file with one section per component, overridden
//! by `section.key = value` pairs from the command line.
//!
//! ```toml
//! seed = 7            # optional; when set, derives every section seed
//! workers = 1
//! out = "runs/demo"
//!
//! [synth]
//! num_identities = 200
//! dim = 32
//!
//! [episode]
//! r_p = 0.2
//! t_max = 8
//!
//! [sweep]
//! r_p = [-0.2, 0.0, 0.2]
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::Value;

use crate::embedding::SplitRule;
use crate::env::EpisodeConfig;
use crate::error::{Error, Result};
use crate::seed;
use crate::synth::SynthConfig;
use crate::train::TrainConfig;

pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSection {
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for SplitSection {
    fn default() -> Self {
        Self {
            train_fraction: 0.5,
            seed: 0,
        }
    }
}

impl SplitSection {
    pub fn rule(&self) -> SplitRule {
        if self.train_fraction == 0.5 {
            SplitRule::HalfHalf
        } else {
            SplitRule::TrainFraction(self.train_fraction)
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Also report the all-frames pooled baseline.
    pub with_baseline: bool,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub r_p: Vec<f64>,
    pub t_max: Vec<usize>,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            r_p: vec![-0.2, -0.1, 0.0, 0.1, 0.2],
            t_max: vec![8],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed. When present it overrides every section seed.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub workers: usize,
    pub out: PathBuf,
    /// Embedding file; defaults to `<out>/embeddings.txt`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    /// Checkpoint file; defaults to `<out>/checkpoint.bin`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    /// Continue training from the checkpoint when it exists.
    pub resume: bool,
    pub synth: SynthConfig,
    pub split: SplitSection,
    pub episode: EpisodeConfig,
    pub train: TrainConfig,
    pub eval: EvalSection,
    pub sweep: SweepSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: None,
            workers: 1,
            out: PathBuf::from("."),
            data: None,
            checkpoint: None,
            resume: false,
            synth: SynthConfig::default(),
            split: SplitSection::default(),
            episode: EpisodeConfig::default(),
            train: TrainConfig::default(),
            eval: EvalSection::default(),
            sweep: SweepSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    /// Apply `key = value` overrides where `key` is `name` or `section.name`.
    pub fn with_overrides<'a>(
        &self,
        overrides: impl IntoIterator<Item = (&'a str, &'a str)>,
    ) -> Result<Self> {
        let mut root = Value::try_from(self).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        for (key, raw) in overrides {
            set_key(&mut root, key, raw)?;
        }
        root.try_into::<RunConfig>()
            .map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    /// Fill section seeds from the master seed and check every value.
    pub fn resolve(mut self) -> Result<Self> {
        if let Some(s) = self.seed {
            self.synth.seed = seed::derive(s, "synth") >> 1;
            self.split.seed = seed::derive(s, "split") >> 1;
            self.train.seed = seed::derive(s, "train") >> 1;
            self.eval.seed = seed::derive(s, "eval") >> 1;
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.workers == 0 {
            return Err(Error::InvalidConfig("workers must be at least 1".into()));
        }
        self.synth.validate()?;
        self.episode.validate()?;
        self.train.validate()?;
        if !(0.0..=1.0).contains(&self.split.train_fraction) {
            return Err(Error::InvalidConfig(format!(
                "train_fraction = {} outside [0, 1]",
                self.split.train_fraction
            )));
        }
        for &r_p in &self.sweep.r_p {
            EpisodeConfig { r_p, ..self.episode }.validate()?;
        }
        for &t_max in &self.sweep.t_max {
            EpisodeConfig { t_max, ..self.episode }.validate()?;
        }
        Ok(())
    }

    pub fn data_path(&self) -> PathBuf {
        self.data
            .clone()
            .unwrap_or_else(|| self.out.join("embeddings.txt"))
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint
            .clone()
            .unwrap_or_else(|| self.out.join("checkpoint.bin"))
    }

    /// Write the resolved config into the output directory.
    pub fn persist(&self) -> Result<PathBuf> {
        let path = self.out.join(RESOLVED_CONFIG_FILE);
        fs::write(&path, self.to_toml()?).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

fn set_key(root: &mut Value, key: &str, raw: &str) -> Result<()> {
    let (section, name) = match key.split_once('.') {
        Some((s, n)) => (Some(s), n),
        None => (None, key),
    };
    let table = root.as_table_mut().expect("config serializes to a table");
    let table = match section {
        None => table,
        Some(s) => table
            .get_mut(s)
            .and_then(Value::as_table_mut)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown section `{s}`")))?,
    };
    let value = match table.get(name) {
        Some(existing) => parse_like(existing, raw)?,
        None => parse_untyped(raw),
    };
    table.insert(name.to_string(), value);
    Ok(())
}

fn parse_like(existing: &Value, raw: &str) -> Result<Value> {
    let bad = || Error::InvalidConfig(format!("cannot parse `{raw}` as {}", existing.type_str()));
    Ok(match existing {
        Value::Integer(_) => Value::Integer(raw.trim().parse().map_err(|_| bad())?),
        Value::Float(_) => Value::Float(raw.trim().parse().map_err(|_| bad())?),
        Value::Boolean(_) => Value::Boolean(raw.trim().parse().map_err(|_| bad())?),
        Value::String(_) => Value::String(raw.to_string()),
        Value::Array(items) => {
            let proto = items.first().cloned();
            let parts = raw
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| match &proto {
                    Some(p) => parse_like(p, s),
                    None => Ok(parse_untyped(s)),
                })
                .collect::<Result<Vec<_>>>()?;
            Value::Array(parts)
        }
        _ => parse_untyped(raw),
    })
}

fn parse_untyped(raw: &str) -> Value {
    let s = raw.trim();
    if let Ok(i) = s.parse::<i64>() {
        Value::Integer(i)
    } else if let Ok(f) = s.parse::<f64>() {
        Value::Float(f)
    } else if let Ok(b) = s.parse::<bool>() {
        Value::Boolean(b)
    } else {
        Value::String(raw.to_string())
    }
}
