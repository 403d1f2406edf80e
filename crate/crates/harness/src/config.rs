//! Experiment documents. Unknown keys are rejected at every level.

use std::path::Path;

use serde::{Deserialize, Serialize};
use svt_core::{presets, ModelConfig};

use crate::data::SyntheticVideoSpec;
use crate::error::{config_err, HarnessError, Result};
use crate::train::TrainConfig;

/// A preset name or an inline architecture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "serde_json::Value", into = "serde_json::Value")]
pub enum ModelSource {
    Preset(String),
    Inline(ModelConfig),
}

impl TryFrom<serde_json::Value> for ModelSource {
    type Error = String;

    fn try_from(v: serde_json::Value) -> std::result::Result<Self, String> {
        match v {
            serde_json::Value::String(name) => match presets::by_name(&name) {
                Some(_) => Ok(ModelSource::Preset(name)),
                None => Err(format!("unknown preset {name:?}; known: {}", presets::NAMES.join(", "))),
            },
            v @ serde_json::Value::Object(_) => {
                serde_json::from_value(v).map(ModelSource::Inline).map_err(|e| e.to_string())
            }
            _ => Err("model must be a preset name or an object".into()),
        }
    }
}

impl From<ModelSource> for serde_json::Value {
    fn from(m: ModelSource) -> Self {
        match m {
            ModelSource::Preset(name) => serde_json::Value::String(name),
            ModelSource::Inline(cfg) => serde_json::to_value(cfg).expect("config serializes"),
        }
    }
}

impl ModelSource {
    pub fn resolve(&self) -> Result<ModelConfig> {
        match self {
            ModelSource::Preset(name) => presets::by_name(name)
                .ok_or_else(|| HarnessError::Config(format!("unknown preset {name:?}"))),
            ModelSource::Inline(cfg) => Ok(cfg.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelSource,
    pub data: SyntheticVideoSpec,
    pub train: TrainConfig,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            HarnessError::Config(m) => HarnessError::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Validates every part and their agreement; never trains.
    pub fn validate(&self) -> Result<()> {
        let model = self.model.resolve()?;
        model.validate()?;
        self.data.validate()?;
        self.train.validate()?;
        if model.input() != self.data.clip_shape() {
            return config_err(format!(
                "model expects clips {:?}, dataset produces {:?}",
                model.input(),
                self.data.clip_shape()
            ));
        }
        if model.num_classes() != self.data.num_classes {
            return config_err(format!(
                "model has {} classes, dataset {}",
                model.num_classes(),
                self.data.num_classes
            ));
        }
        Ok(())
    }
}

/// Model description from a file holding either a bare model config or a
/// full experiment, or from a preset name.
pub fn load_model_config(arg: &str) -> Result<ModelConfig> {
    if let Some(cfg) = presets::by_name(arg) {
        return Ok(cfg);
    }
    let path = Path::new(arg);
    if !path.exists() {
        return Err(HarnessError::Config(format!(
            "`{arg}` is neither a config file nor a preset (presets: {})",
            presets::NAMES.join(", ")
        )));
    }
    let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| HarnessError::Config(e.to_string()))?;
    let cfg = if value.get("arch").is_some() {
        ModelConfig::from_json(&text)?
    } else {
        ExperimentConfig::from_json(&text)?.model.resolve()?
    };
    cfg.validate()?;
    Ok(cfg)
}
