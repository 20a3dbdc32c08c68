//! Run configuration: a TOML file of dotted keys plus command-line overrides.
//!
//! ```toml
//! dataset.count = 200
//! trainer.lr = 1e-4
//! kernel.distance = "squared"
//! ablate.pl = true
//! ```
//!
//! Unknown keys are rejected. Overrides use the same dotted paths and are
//! applied on top of the file before deserialization.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{self, DatasetSpec};
use crate::error::{Error, Result};
use crate::losses::HyperParams;
use crate::trainer::{Ablation, KernelParams, MixParams, RwParams, TrainConfig, TrainData, TrainerParams};

/// Added to the dataset seed to derive the validation set.
pub const VALIDATION_SEED_OFFSET: u64 = 0x5EED_0000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataParams {
    /// Existing dataset directory; when absent the synthetic generator is used.
    pub dir: Option<PathBuf>,
    /// Validation dataset directory (required together with `dir`).
    pub val_dir: Option<PathBuf>,
    /// Size of the synthetic validation set.
    pub val_count: usize,
}

impl Default for DataParams {
    fn default() -> Self {
        Self {
            dir: None,
            val_dir: None,
            val_count: 40,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputParams {
    pub dir: PathBuf,
}

impl Default for OutputParams {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("runs/agcl"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub dataset: DatasetSpec,
    pub data: DataParams,
    pub output: OutputParams,
    pub trainer: TrainerParams,
    pub hyper: HyperParams,
    pub kernel: KernelParams,
    pub mix: MixParams,
    pub rw: RwParams,
    pub ablate: Ablation,
}

impl RunConfig {
    /// Parse TOML text with `key.path=value` overrides applied on top.
    pub fn from_toml_with_overrides(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        for (key, value) in overrides {
            set_dotted(&mut table, key, parse_value(value))?;
        }
        let cfg: RunConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        Self::from_toml_with_overrides(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            trainer: self.trainer.clone(),
            hyper: self.hyper.clone(),
            kernel: self.kernel,
            mix: self.mix,
            rw: self.rw,
            ablate: self.ablate,
        }
    }

    /// Validate everything that can be checked without side effects.
    pub fn validate(&self) -> Result<()> {
        self.train_config().validate()?;
        match (&self.data.dir, &self.data.val_dir) {
            (Some(dir), val) => {
                if !dir.join("split.txt").is_file() {
                    return Err(Error::Config(format!(
                        "data.dir {} is not a dataset directory (no split.txt)",
                        dir.display()
                    )));
                }
                let val = val
                    .as_ref()
                    .ok_or_else(|| Error::Config("data.val_dir is required when data.dir is set".into()))?;
                if !val.join("split.txt").is_file() {
                    return Err(Error::Config(format!(
                        "data.val_dir {} is not a dataset directory (no split.txt)",
                        val.display()
                    )));
                }
            }
            (None, Some(_)) => return Err(Error::Config("data.val_dir requires data.dir".into())),
            (None, None) => {
                self.dataset.validate()?;
                if self.data.val_count == 0 {
                    return Err(Error::Config("data.val_count must be at least 1".into()));
                }
            }
        }
        Ok(())
    }

    pub fn validation_spec(&self) -> DatasetSpec {
        DatasetSpec {
            count: self.data.val_count,
            labeled_fraction: 1.0,
            seed: self.dataset.seed.wrapping_add(VALIDATION_SEED_OFFSET),
            ..self.dataset.clone()
        }
    }

    /// Training pool and validation set, from disk or the generator.
    pub fn load_data(&self) -> Result<TrainData> {
        match (&self.data.dir, &self.data.val_dir) {
            (Some(dir), Some(val)) => Ok(TrainData {
                train: data::read_dataset(dir)?,
                val: data::read_dataset(val)?,
            }),
            _ => Ok(TrainData {
                train: data::generate(&self.dataset)?,
                val: data::generate(&self.validation_spec())?,
            }),
        }
    }
}

/// Interpret an override value as TOML, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn set_dotted(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("malformed key {key:?}")));
    }
    let mut cur = table;
    for part in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("{key:?}: {part:?} is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}
