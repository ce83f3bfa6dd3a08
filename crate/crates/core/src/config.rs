//! Run configuration shared by every command: defaults, a flat `key=value`
//! file format, and command-line overrides using the same keys.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::decoder::SecaMode;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelKind};
use crate::synth::{config_hash, GenerateConfig, Split, DEFAULT_LENGTH_DIST};
use crate::train::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Widths from the model defaults (C = 64, two encoder layers).
    Standard,
    /// Narrower network for quick CPU runs.
    Compact,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(Preset::Standard),
            "compact" => Ok(Preset::Compact),
            _ => Err(Error::Config(format!("unknown preset {s:?} (standard, compact)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelKind,
    pub preset: Preset,
    pub seca: SecaMode,
    pub autoregressive: bool,
    pub train: TrainConfig,
    pub n_samples: usize,
    pub length_dist: Vec<f64>,
    pub quality_threshold: f64,
    pub split: Split,
    pub seeds: usize,
    /// Worker cap; scheduling only, so it is left out of the hash.
    #[serde(skip)]
    pub threads: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelKind::SeqFakeFormer,
            preset: Preset::Standard,
            seca: SecaMode::MultiHead,
            autoregressive: true,
            train: TrainConfig::default(),
            n_samples: 1000,
            length_dist: DEFAULT_LENGTH_DIST.to_vec(),
            quality_threshold: 0.0,
            split: Split::Test,
            seeds: 3,
            threads: None,
        }
    }
}

/// Every key accepted in a config file or as a `--key value` flag.
pub const KEYS: [&str; 20] = [
    "seed",
    "model",
    "preset",
    "seca",
    "autoregressive",
    "epochs",
    "warmup_epochs",
    "lr_transformer",
    "lr_backbone",
    "decay_epochs",
    "decay_factor",
    "momentum",
    "weight_decay",
    "batch_size",
    "n",
    "length_dist",
    "quality_threshold",
    "split",
    "seeds",
    "threads",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse(key, v)).collect()
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("invalid value {value:?} for {key}"))),
    }
}

/// Reads `key = value` lines; `#` starts a comment.
pub fn parse_key_values(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key=value", n + 1)))?;
        let k = k.trim().replace('-', "_");
        if out.insert(k.clone(), v.trim().to_string()).is_some() {
            return Err(Error::Config(format!("line {}: {k} given twice", n + 1)));
        }
    }
    Ok(out)
}

impl RunConfig {
    /// Applies one setting; unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.replace('-', "_");
        let t = &mut self.train;
        match key.as_str() {
            "seed" => self.seed = parse(&key, value)?,
            "model" => self.model = value.trim().parse()?,
            "preset" => self.preset = value.trim().parse()?,
            "seca" => self.seca = value.trim().parse()?,
            "autoregressive" => self.autoregressive = parse_bool(&key, value)?,
            "epochs" => t.epochs = parse(&key, value)?,
            "warmup_epochs" => t.warmup_epochs = parse(&key, value)?,
            "lr_transformer" => t.lr_transformer = parse(&key, value)?,
            "lr_backbone" => t.lr_backbone = parse(&key, value)?,
            "decay_epochs" => t.decay_epochs = parse_list(&key, value)?,
            "decay_factor" => t.decay_factor = parse(&key, value)?,
            "momentum" => t.momentum = parse(&key, value)?,
            "weight_decay" => t.weight_decay = parse(&key, value)?,
            "batch_size" => t.batch_size = parse(&key, value)?,
            "n" => self.n_samples = parse(&key, value)?,
            "length_dist" => self.length_dist = parse_list(&key, value)?,
            "quality_threshold" => self.quality_threshold = parse(&key, value)?,
            "split" => self.split = value.trim().parse()?,
            "seeds" => self.seeds = parse(&key, value)?,
            "threads" => self.threads = Some(parse(&key, value)?),
            _ => return Err(Error::Config(format!("unknown setting {key:?}"))),
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        for (k, v) in parse_key_values(&text)? {
            self.set(&k, &v)?;
        }
        Ok(())
    }

    /// The training schedule with the run seed.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        let base = match self.preset {
            Preset::Standard => ModelConfig {
                kind: self.model,
                ..ModelConfig::default()
            },
            Preset::Compact => ModelConfig::compact(self.model),
        };
        base.with_ablation(self.seca, self.autoregressive)
    }

    pub fn generate_config(&self) -> GenerateConfig {
        GenerateConfig {
            n_samples: self.n_samples,
            seed: self.seed,
            length_dist: self.length_dist.clone(),
            quality_threshold: self.quality_threshold,
            ..GenerateConfig::default()
        }
    }

    pub fn hash(&self) -> String {
        config_hash(self)
    }
}
