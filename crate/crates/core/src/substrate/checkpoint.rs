//! Versioned JSON parameter checkpoints.
//!
//! Layout: `{"magic": "red-ckpt", "version": 1, "step": n, "meta": {...},
//! "params": [{"id", "shape", "values", "m", "v"}, ...]}` with row-major
//! values. Parameter order is preserved.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::ParameterSet;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &str = "red-ckpt";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    magic: String,
    version: u32,
}

#[derive(Debug, Serialize, Deserialize)]
struct ParamRecord {
    id: String,
    shape: Vec<usize>,
    values: Vec<f64>,
    m: Vec<f64>,
    v: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointFile {
    magic: String,
    version: u32,
    step: u64,
    meta: serde_json::Value,
    params: Vec<ParamRecord>,
}

pub fn save_checkpoint(path: &Path, params: &ParameterSet, meta: &serde_json::Value) -> Result<()> {
    let file = CheckpointFile {
        magic: CHECKPOINT_MAGIC.into(),
        version: CHECKPOINT_VERSION,
        step: params.step(),
        meta: meta.clone(),
        params: params
            .iter()
            .map(|(_, p)| ParamRecord {
                id: p.name.clone(),
                shape: p.value.shape().to_vec(),
                values: p.value.values().to_vec(),
                m: p.m.values().to_vec(),
                v: p.v.values().to_vec(),
            })
            .collect(),
    };
    let tmp = path.with_extension("tmp");
    {
        let f = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        let mut w = BufWriter::new(f);
        serde_json::to_writer(&mut w, &file)?;
        w.flush().map_err(|e| Error::io(&tmp, e))?;
    }
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Reads a checkpoint, returning its parameters and metadata.
pub fn load_checkpoint(path: &Path) -> Result<(ParameterSet, serde_json::Value)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let header: Header = serde_json::from_str(&text)
        .map_err(|e| Error::Checkpoint(format!("{}: unreadable header: {e}", path.display())))?;
    if header.magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(format!(
            "{}: bad magic `{}`",
            path.display(),
            header.magic
        )));
    }
    if header.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: unsupported version {}",
            path.display(),
            header.version
        )));
    }
    let file: CheckpointFile = serde_json::from_reader(BufReader::new(text.as_bytes()))?;
    let mut params = ParameterSet::new();
    for rec in file.params {
        let value = Tensor::new(rec.shape.clone(), rec.values)?;
        let id = params.add(rec.id, value)?;
        let p = params.get_mut(id);
        p.m = Tensor::new(rec.shape.clone(), rec.m)?;
        p.v = Tensor::new(rec.shape, rec.v)?;
    }
    params.set_step(file.step);
    Ok((params, file.meta))
}

/// Copies values, moments and step from `src` into `dst`, matching by name.
/// Both sets must hold the same names in the same order with equal shapes.
pub fn restore_into(dst: &mut ParameterSet, src: &ParameterSet) -> Result<()> {
    if dst.len() != src.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} parameters, model expects {}",
            src.len(),
            dst.len()
        )));
    }
    for (i, s) in src.iter() {
        let d = dst.get_mut(i);
        if d.name != s.name || !d.value.same_shape(&s.value) {
            return Err(Error::Checkpoint(format!(
                "parameter `{}` {:?} does not match `{}` {:?}",
                s.name,
                s.value.shape(),
                d.name,
                d.value.shape()
            )));
        }
        d.value = s.value.clone();
        d.m = s.m.clone();
        d.v = s.v.clone();
    }
    dst.set_step(src.step());
    Ok(())
}
