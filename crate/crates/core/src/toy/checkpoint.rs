//! Versioned JSON checkpoints: architecture descriptor plus parameters.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{ParamBlocks, ToyModel};
use super::ToyError;

const FORMAT: &str = "polypart-toy-detector";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Checkpoint {
    format: String,
    version: u32,
    model: ToyModel,
}

pub fn checkpoint_to_json(m: &ToyModel) -> String {
    let ck = Checkpoint {
        format: FORMAT.into(),
        version: VERSION,
        model: m.clone(),
    };
    serde_json::to_string(&ck).expect("model serializes") + "\n"
}

pub fn checkpoint_from_json(text: &str) -> Result<ToyModel, ToyError> {
    let ck: Checkpoint =
        serde_json::from_str(text).map_err(|e| ToyError::Parse(e.to_string()))?;
    if ck.format != FORMAT || ck.version != VERSION {
        return Err(ToyError::Parse(format!(
            "unsupported checkpoint {} v{}",
            ck.format, ck.version
        )));
    }
    let m = ck.model;
    m.arch.validate()?;
    if ParamBlocks::zeros_for(&m.arch).len() != m.params.len()
        || !super::model::ParamBlock::ALL
            .iter()
            .all(|b| ParamBlocks::zeros_for(&m.arch).block(*b).len() == m.params.block(*b).len())
    {
        return Err(ToyError::Shape("parameter sizes do not match the architecture".into()));
    }
    if !m.params.is_finite() {
        return Err(ToyError::Parse("non-finite parameter".into()));
    }
    Ok(m)
}

pub fn save_checkpoint(m: &ToyModel, path: &Path) -> Result<(), ToyError> {
    std::fs::write(path, checkpoint_to_json(m)).map_err(|source| ToyError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<ToyModel, ToyError> {
    let text = std::fs::read_to_string(path).map_err(|source| ToyError::Io {
        path: path.display().to_string(),
        source,
    })?;
    checkpoint_from_json(&text)
}
