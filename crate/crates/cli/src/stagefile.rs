//! Trained-stage files: `EMSTAGE1`, a little-endian `u32` header length, a
//! JSON header (config hash, fold, task, drift pipeline) and the forest in
//! its own binary format.

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use emwatch::drift::DriftPipelineModel;
use emwatch::forest::ForestModel;
use emwatch::pipeline::{StageModel, Task};
use serde::{Deserialize, Serialize};

use crate::context::{io_failure, Failure};

const MAGIC: &[u8; 8] = b"EMSTAGE1";

#[derive(Serialize, Deserialize)]
struct Header {
    config_hash: String,
    fold_id: usize,
    task: Task,
    pipeline: DriftPipelineModel,
}

pub fn write(path: &Path, config_hash: &str, fold_id: usize, model: &StageModel) -> Result<(), Failure> {
    let header = serde_json::to_vec(&Header {
        config_hash: config_hash.to_string(),
        fold_id,
        task: model.task,
        pipeline: model.pipeline.clone(),
    })
    .map_err(|e| Failure::from(emwatch::Error::from(e)))?;
    let mut bytes = Vec::with_capacity(header.len() + 12);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(header.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&header);
    model.forest.write_to(&mut bytes).map_err(|e| io_failure(path, e))?;
    fs::write(path, bytes).map_err(|e| io_failure(path, e))
}

/// Reads a stage file, returning its config hash, fold id and model.
pub fn read(path: &Path) -> Result<(String, usize, StageModel), Failure> {
    let bytes = fs::read(path).map_err(|e| io_failure(path, e))?;
    let bad = |m: &str| Failure::new("format", format!("{}: {m}", path.display()));
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(bad("not a stage file"));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let body = bytes.get(12..12 + hlen).ok_or_else(|| bad("truncated header"))?;
    let h: Header = serde_json::from_slice(body).map_err(|e| bad(&e.to_string()))?;
    let mut rest = Cursor::new(&bytes[12 + hlen..]);
    let forest = ForestModel::read_from(&mut rest)?;
    if rest.read(&mut [0u8; 1]).map_err(|e| io_failure(path, e))? != 0 {
        return Err(bad("trailing bytes"));
    }
    Ok((h.config_hash, h.fold_id, StageModel { task: h.task, pipeline: h.pipeline, forest }))
}
