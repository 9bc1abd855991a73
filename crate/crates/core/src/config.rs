//! Run configuration: one TOML document with `model`, `data` and `train`
//! sections, layered as preset defaults, then a config file, then dotted
//! `key=value` overrides. Keys absent from the preset are rejected.

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::datagen::DatasetConfig;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Preset};
use crate::training::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Root of every random stream in a run.
    pub seed: u64,
    pub model: ModelConfig,
    pub data: DatasetConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        let model = ModelConfig::preset(preset);
        let mut data = DatasetConfig::default();
        data.scene.canvas = model.input_size as u32;
        let mut train = TrainConfig::default();
        if preset == Preset::Desk {
            train.lr = DESK_LR;
        }
        RunConfig {
            seed: 0,
            model,
            data,
            train,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.data.validate()?;
        self.train.validate()?;
        if self.data.scene.canvas as usize != self.model.input_size {
            return Err(Error::config(
                "data.scene.canvas",
                format!(
                    "{} does not match model.input_size {}",
                    self.data.scene.canvas, self.model.input_size
                ),
            ));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config("config", e.to_string()))
    }

    /// Builds the effective configuration. `preset` wins over a
    /// `model.preset` key in `file`; without either the desk preset is used.
    pub fn resolve(preset: Option<Preset>, file: Option<&str>, overrides: &[String]) -> Result<Self> {
        let file: Option<Table> = file
            .map(|text| text.parse::<Table>().map_err(|e| Error::config("config", e.to_string())))
            .transpose()?;
        let preset = match preset {
            Some(p) => p,
            None => match file.as_ref().and_then(|t| t.get("model")?.get("preset")?.as_str()) {
                Some(name) => name.parse()?,
                None => Preset::Desk,
            },
        };
        let base = Value::try_from(RunConfig::preset(preset)).map_err(|e| Error::config("config", e.to_string()))?;
        let Value::Table(mut merged) = base else {
            unreachable!("a struct serializes to a table")
        };
        if let Some(file) = file {
            merge(&mut merged, file, "")?;
        }
        for item in overrides {
            apply_override(&mut merged, item)?;
        }
        let config: RunConfig = Value::Table(merged)
            .try_into()
            .map_err(|e: toml::de::Error| Error::config("config", e.message().to_string()))?;
        config.validate()?;
        Ok(config)
    }
}

/// Learning rate of the desk preset; the narrow network trains far too
/// slowly at the full-scale rate within the epoch budget.
pub const DESK_LR: f64 = 1e-3;

fn join(prefix: &str, key: &str) -> String {
    if prefix.is_empty() {
        key.to_string()
    } else {
        format!("{prefix}.{key}")
    }
}

fn merge(base: &mut Table, layer: Table, prefix: &str) -> Result<()> {
    for (key, value) in layer {
        let path = join(prefix, &key);
        let slot = base
            .get_mut(&key)
            .ok_or_else(|| Error::config(&path, "unknown key"))?;
        match (slot, value) {
            (Value::Table(inner), Value::Table(layer)) => merge(inner, layer, &path)?,
            (Value::Table(_), _) => return Err(Error::config(&path, "expected a table")),
            (slot, value) => *slot = value,
        }
    }
    Ok(())
}

/// Applies one `dotted.key=value` override. The value is read as a TOML
/// value, falling back to a bare string.
pub fn apply_override(table: &mut Table, item: &str) -> Result<()> {
    let (path, raw) = item
        .split_once('=')
        .ok_or_else(|| Error::config(item, "override must have the form key=value"))?;
    let path = path.trim();
    let raw = raw.trim();
    let value = match format!("v = {raw}").parse::<Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => Value::String(raw.to_string()),
    };
    let keys: Vec<&str> = path.split('.').collect();
    let (last, parents) = keys.split_last().expect("split yields at least one item");
    let mut node = table;
    for (i, key) in parents.iter().enumerate() {
        node = match node.get_mut(*key) {
            Some(Value::Table(t)) => t,
            Some(_) => return Err(Error::config(keys[..=i].join("."), "is not a table")),
            None => return Err(Error::config(keys[..=i].join("."), "unknown key")),
        };
    }
    match node.get_mut(*last) {
        Some(Value::Table(_)) => Err(Error::config(path, "cannot replace a whole table")),
        Some(slot) => {
            *slot = value;
            Ok(())
        }
        None => Err(Error::config(path, "unknown key")),
    }
}
