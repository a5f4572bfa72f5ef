//! Versioned model checkpoints.
//!
//! JSON with full-precision floats (shortest round-trip encoding), so a
//! save → load → save cycle is byte-identical and loaded parameters match
//! the saved ones bit for bit.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, ModelParams, Vocabulary};

const FORMAT: &str = "vqlattice-checkpoint";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    config: ModelConfig,
    symbols: Vec<String>,
    params: ModelParams,
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    let file = CheckpointFile {
        format: FORMAT.to_string(),
        version: VERSION,
        config: model.config.clone(),
        symbols: model.vocab.symbols().to_vec(),
        params: model.params.clone(),
    };
    let json = serde_json::to_string(&file)?;
    fs::write(path, json)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Model> {
    let text = fs::read_to_string(path)?;
    let file: CheckpointFile = serde_json::from_str(&text)?;
    if file.format != FORMAT {
        return Err(Error::Format(format!(
            "not a model checkpoint: format tag {:?}",
            file.format
        )));
    }
    if file.version != VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {} (expected {VERSION})",
            file.version
        )));
    }
    file.config.validate()?;
    let vocab = Vocabulary::new(file.symbols)?;
    let model = Model { config: file.config, vocab, params: file.params };
    verify_shapes(&model)?;
    Ok(model)
}

fn verify_shapes(model: &Model) -> Result<()> {
    let cfg = &model.config;
    if model.params.encoder.out_dim() != cfg.enc_out_dim() {
        return Err(Error::Format("checkpoint encoder dimensions disagree with config".into()));
    }
    if model.params.joint.out_dim() != model.vocab.output_dim() {
        return Err(Error::Format("checkpoint joint output disagrees with vocabulary".into()));
    }
    if model.params.joint.joint_dim() != cfg.joint_dim {
        return Err(Error::Format("checkpoint joint dimensions disagree with config".into()));
    }
    Ok(())
}
