//! Run configuration: every tunable in one struct, read from flat JSON
//! objects whose keys are dotted paths such as `"cfa.layers"`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::attention::CfaConfig;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::geometry::PeMode;
use crate::model::{CrossFiTConfig, Strategy};
use crate::synth::TwoFieldSample;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSection {
    pub strategy: Strategy,
    pub pe_mode: PeMode,
    pub mask: bool,
    pub classes: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PathSection {
    pub dir: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub encoder: EncoderConfig,
    pub cfa: CfaConfig,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub data: PathSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::from_parts(&CrossFiTConfig::default(), TrainConfig::default())
    }
}

impl RunConfig {
    pub fn from_parts(model: &CrossFiTConfig, train: TrainConfig) -> Self {
        Self {
            encoder: model.encoder.clone(),
            cfa: model.cfa.clone(),
            model: ModelSection {
                strategy: model.strategy,
                pe_mode: model.pe_mode,
                mask: model.mask,
                classes: model.classes,
            },
            train,
            data: PathSection::default(),
        }
    }

    pub fn model_config(&self) -> CrossFiTConfig {
        CrossFiTConfig {
            encoder: self.encoder.clone(),
            cfa: self.cfa.clone(),
            strategy: self.model.strategy,
            pe_mode: self.model.pe_mode,
            mask: self.model.mask,
            classes: self.model.classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        self.train.validate()
    }

    /// Overwrite one dotted key. Unknown keys and ill-typed values are config errors.
    pub fn set(&mut self, key: &str, value: Value) -> Result<()> {
        let mut root = serde_json::to_value(&*self)?;
        let mut slot = &mut root;
        for part in key.split('.') {
            slot = slot
                .as_object_mut()
                .and_then(|m| m.get_mut(part))
                .ok_or_else(|| Error::Config(format!("unknown config key {key:?}")))?;
        }
        *slot = value;
        *self = serde_json::from_value(root)
            .map_err(|e| Error::Config(format!("bad value for {key:?}: {e}")))?;
        Ok(())
    }

    /// Defaults overridden by a JSON object of dotted keys.
    pub fn from_flat_json(text: &str) -> Result<Self> {
        let v: Value = serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("config is not valid JSON: {e}")))?;
        let Value::Object(map) = v else {
            return Err(Error::Config("config must be a JSON object".into()));
        };
        let mut cfg = Self::default();
        for (k, v) in map {
            cfg.set(&k, v)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_flat_json(&fs::read_to_string(path)?)
    }

    /// The inverse of [`RunConfig::from_flat_json`].
    pub fn to_flat(&self) -> Map<String, Value> {
        fn walk(prefix: &str, v: Value, out: &mut Map<String, Value>) {
            match v {
                Value::Object(m) => {
                    for (k, v) in m {
                        let key = if prefix.is_empty() {
                            k
                        } else {
                            format!("{prefix}.{k}")
                        };
                        walk(&key, v, out);
                    }
                }
                leaf => {
                    out.insert(prefix.to_string(), leaf);
                }
            }
        }
        let mut out = Map::new();
        walk(
            "",
            serde_json::to_value(self).expect("config serializes"),
            &mut out,
        );
        out
    }

    /// Every label must fit the configured class count.
    pub fn check_dataset(&self, data: &[TwoFieldSample]) -> Result<()> {
        if let Some(s) = data.iter().find(|s| s.grade >= self.model.classes) {
            return Err(Error::Config(format!(
                "eye {} has grade {} but the model is configured for {} classes",
                s.eye_id, s.grade, self.model.classes
            )));
        }
        if let Some(s) = data
            .iter()
            .find(|s| s.pair.image1.size() != self.encoder.input_size)
        {
            return Err(Error::Config(format!(
                "eye {} has {}px images, encoder expects {}px",
                s.eye_id,
                s.pair.image1.size(),
                self.encoder.input_size
            )));
        }
        Ok(())
    }
}
