//! JSON checkpoint container.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Vocab;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tensor::Tensor;
use crate::training::TrainConfig;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub value: Tensor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub vocab: Vocab,
    pub params: Vec<NamedTensor>,
    pub best_dev_f1: f64,
    pub step: usize,
    pub seed: u64,
}

impl Checkpoint {
    pub fn capture(model: &Model, train: &TrainConfig, best_dev_f1: f64, step: usize, seed: u64) -> Self {
        Checkpoint {
            format_version: FORMAT_VERSION,
            model: model.config.clone(),
            train: train.clone(),
            vocab: model.vocab.clone(),
            params: model
                .store
                .iter()
                .map(|(_, p)| NamedTensor {
                    name: p.name.clone(),
                    value: p.value.clone(),
                })
                .collect(),
            best_dev_f1,
            step,
            seed,
        }
    }

    /// Rebuilds the model and loads every stored parameter by name.
    pub fn to_model(&self) -> Result<Model> {
        if self.model.encoder.vocab_size != self.vocab.len() {
            return Err(Error::Checkpoint(format!(
                "vocabulary has {} entries but the encoder expects {}",
                self.vocab.len(),
                self.model.encoder.vocab_size
            )));
        }
        let mut model = Model::with_seed(&self.model, self.vocab.clone(), self.seed)?;
        model
            .store
            .load_values(self.params.iter().map(|p| (p.name.as_str(), p.value.clone())))?;
        model.set_encoder_frozen(self.train.freeze_encoder);
        Ok(model)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Version {
            format_version: u32,
        }
        let v: Version = serde_json::from_str(text)
            .map_err(|e| Error::Checkpoint(format!("not a checkpoint: {e}")))?;
        if v.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {} (expected {FORMAT_VERSION})",
                v.format_version
            )));
        }
        serde_json::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Checkpoint::from_json(&fs::read_to_string(path)?)
    }
}
