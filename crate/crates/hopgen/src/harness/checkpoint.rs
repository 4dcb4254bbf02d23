//! Checkpoints: full parameter state plus the run configuration in one
//! JSON file, written atomically and reloadable bit for bit.

use std::io::Write;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::config::Config;
use crate::num::{ParamStore, Tensor};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamEntry {
    pub shape: [usize; 2],
    /// Row-major values; JSON serialization round-trips f64 exactly.
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: Config,
    pub params: IndexMap<String, ParamEntry>,
    pub step: usize,
    pub epoch: usize,
}

impl Checkpoint {
    pub fn capture(config: &Config, store: &ParamStore, step: usize, epoch: usize) -> Self {
        let params = store
            .iter()
            .map(|(name, t)| {
                (
                    name.clone(),
                    ParamEntry {
                        shape: [t.rows(), t.cols()],
                        values: t.data().to_vec(),
                    },
                )
            })
            .collect();
        Checkpoint {
            version: CHECKPOINT_VERSION,
            config: config.clone(),
            params,
            step,
            epoch,
        }
    }

    /// Rebuild the parameter store. The embedding table comes back
    /// frozen when the stored config says it trained frozen.
    pub fn restore(&self) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        for (name, e) in &self.params {
            let t = Tensor::from_vec(e.shape[0], e.shape[1], e.values.clone())?;
            if self.config.freeze_embeddings && name == "embed.word" {
                store.insert_frozen(name.clone(), t)?;
            } else {
                store.insert(name.clone(), t)?;
            }
        }
        Ok(store)
    }
}

/// Serialize to a sibling temp file, then rename into place, so a crash
/// mid-write never leaves a truncated checkpoint behind.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let file_name = path
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::contract("checkpoint", "path has no file name"))?;
    let tmp = path.with_file_name(format!("{file_name}.tmp"));
    {
        let mut f = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
        serde_json::to_writer(&mut f, ckpt)?;
        f.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let f = std::fs::File::open(path)
        .map_err(|e| Error::data(format!("cannot read {}: {e}", path.display())))?;
    let f = std::io::BufReader::new(f);
    let ckpt: Checkpoint = serde_json::from_reader(f)?;
    if ckpt.version != CHECKPOINT_VERSION {
        return Err(Error::data(format!(
            "checkpoint version {} unsupported (expected {CHECKPOINT_VERSION})",
            ckpt.version
        )));
    }
    for (name, e) in &ckpt.params {
        if e.values.len() != e.shape[0] * e.shape[1] {
            return Err(Error::data(format!(
                "parameter {name}: {} values for shape {:?}",
                e.values.len(),
                e.shape
            )));
        }
    }
    Ok(ckpt)
}
