//! Weight checkpoint container.
//!
//! All integers little-endian:
//!
//! ```text
//! magic        4 bytes  "PTCK"
//! version      u16      = 1
//! config_len   u32
//! config       config_len bytes of UTF-8 JSON (ModelConfig)
//! tensor_count u32
//! per tensor:
//!   name_len   u16
//!   name       name_len bytes UTF-8
//!   rows       u32
//!   cols       u32
//!   values     rows × cols f32, row-major
//! ```

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, Weights};
use crate::tensor::Matrix;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PTCK";
pub const CHECKPOINT_VERSION: u16 = 1;

pub fn write_checkpoint<W: Write>(model: &Model, mut out: W) -> Result<()> {
    out.write_all(CHECKPOINT_MAGIC)?;
    out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    let cfg = serde_json::to_vec(model.config())?;
    out.write_all(&(cfg.len() as u32).to_le_bytes())?;
    out.write_all(&cfg)?;
    let params = model.weights().named_params();
    out.write_all(&(params.len() as u32).to_le_bytes())?;
    for (name, m) in params {
        out.write_all(&(name.len() as u16).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        out.write_all(&(m.rows() as u32).to_le_bytes())?;
        out.write_all(&(m.cols() as u32).to_le_bytes())?;
        for v in m.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

fn read_u16<R: Read>(r: &mut R) -> Result<u16> {
    let mut b = [0; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_checkpoint<R: Read>(mut input: R) -> Result<Model> {
    let mut magic = [0; 4];
    input.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Integrity("not a checkpoint (bad magic)".into()));
    }
    let version = read_u16(&mut input)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Integrity(format!("unsupported checkpoint version {version}")));
    }
    let cfg_len = read_u32(&mut input)? as usize;
    let mut cfg_bytes = vec![0; cfg_len];
    input.read_exact(&mut cfg_bytes)?;
    let cfg: ModelConfig = serde_json::from_slice(&cfg_bytes)?;
    cfg.validate()?;

    let count = read_u32(&mut input)? as usize;
    let mut tensors = HashMap::with_capacity(count);
    for _ in 0..count {
        let len = read_u16(&mut input)? as usize;
        let mut name = vec![0; len];
        input.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Integrity("tensor name is not UTF-8".into()))?;
        let rows = read_u32(&mut input)? as usize;
        let cols = read_u32(&mut input)? as usize;
        let mut raw = vec![0; rows * cols * 4];
        input.read_exact(&mut raw)?;
        let values = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        tensors.insert(name, Matrix::from_vec(rows, cols, values)?);
    }

    let mut weights = Weights::zeros(&cfg);
    let names: Vec<String> = weights.named_params().into_iter().map(|(n, _)| n).collect();
    if names.len() != tensors.len() {
        return Err(Error::Integrity(format!(
            "checkpoint has {} tensors, configuration needs {}",
            tensors.len(),
            names.len()
        )));
    }
    for (name, slot) in names.iter().zip(weights.tensors_mut()) {
        let t = tensors
            .remove(name)
            .ok_or_else(|| Error::Integrity(format!("missing tensor {name}")))?;
        if t.shape() != slot.shape() {
            return Err(Error::Integrity(format!(
                "tensor {name} has shape {:?}, expected {:?}",
                t.shape(),
                slot.shape()
            )));
        }
        *slot = t;
    }
    Model::new(cfg, weights)
}

pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    write_checkpoint(model, BufWriter::new(File::create(path)?))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model> {
    read_checkpoint(BufReader::new(File::open(path)?))
}
