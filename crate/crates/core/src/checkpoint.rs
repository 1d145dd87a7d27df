//! JSON checkpoints shared by every model type.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint<M> {
    pub kind: String,
    pub config_hash: String,
    pub model: M,
}

pub fn save_checkpoint<M: Serialize>(
    path: &Path,
    kind: &str,
    config_hash: &str,
    model: &M,
) -> Result<()> {
    let ck = Checkpoint {
        kind: kind.to_string(),
        config_hash: config_hash.to_string(),
        model,
    };
    let text = serde_json::to_string(&ck)?;
    std::fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn load_checkpoint<M: DeserializeOwned>(path: &Path, kind: &str) -> Result<Checkpoint<M>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let ck: Checkpoint<M> = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        line: e.line(),
        message: e.to_string(),
    })?;
    if ck.kind != kind {
        return Err(Error::Validation {
            id: path.display().to_string(),
            message: format!("checkpoint holds a `{}`, expected `{kind}`", ck.kind),
        });
    }
    Ok(ck)
}
