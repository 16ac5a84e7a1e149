use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig};
use crate::corpus::Vocabulary;
use crate::error::{Error, Result};
use crate::numerics::ParamStore;

pub const CHECKPOINT_FORMAT: &str = "dialoglab-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// JSON container of a model configuration, its parameters and, optionally,
/// the vocabulary it was trained with. Floats are written in shortest
/// round-trip form, so a save/load cycle is bit-exact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab: Option<Vocabulary>,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn new(model: &Model, vocab: Option<&Vocabulary>) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            config: model.config().clone(),
            vocab: vocab.cloned(),
            params: model.params().clone(),
        }
    }

    pub fn into_model(self) -> Result<(Model, Option<Vocabulary>)> {
        if self.format != CHECKPOINT_FORMAT || self.version != CHECKPOINT_VERSION {
            return Err(Error::Compatibility(format!(
                "unsupported checkpoint {} v{} (expected {CHECKPOINT_FORMAT} v{CHECKPOINT_VERSION})",
                self.format, self.version
            )));
        }
        let mut vocab = self.vocab;
        if let Some(v) = vocab.as_mut() {
            v.reindex();
            if v.len() != self.config.vocab_size {
                return Err(Error::Compatibility(format!(
                    "checkpoint vocabulary has {} entries but the model expects {}",
                    v.len(),
                    self.config.vocab_size
                )));
            }
        }
        Ok((Model::from_params(self.config, self.params)?, vocab))
    }
}

pub fn save_checkpoint(path: impl AsRef<Path>, model: &Model, vocab: Option<&Vocabulary>) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let json = serde_json::to_string(&Checkpoint::new(model, vocab))?;
    fs::write(path, json).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(Model, Option<Vocabulary>)> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let ckpt: Checkpoint = serde_json::from_str(&text)?;
    ckpt.into_model()
}
