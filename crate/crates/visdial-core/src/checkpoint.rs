//! Checkpoint format: a small header (version, run config echo including the
//! vocabulary, name/shape table) followed by every parameter's values as
//! little-endian f64 in declaration order. Round trips are bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoders::Vocabulary;
use crate::model::{param_layout, ModelDims, ModelParams, Param, TrainMode};

const MAGIC: &[u8; 4] = b"VDCP";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0} (expected {VERSION})")]
    Version(u32),
    #[error("corrupt header: {0}")]
    Header(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Serialize, Deserialize)]
struct HeaderEcho {
    dims: ModelDims,
    vocab: Vec<String>,
    mode: TrainMode,
    seed: u64,
}

/// A loaded checkpoint: parameters plus the run configuration they came from.
pub struct Checkpoint {
    pub params: ModelParams,
    pub vocab: Vocabulary,
    pub mode: TrainMode,
    pub seed: u64,
}

pub fn save_checkpoint(
    path: impl AsRef<Path>,
    params: &ModelParams,
    vocab: &Vocabulary,
    mode: TrainMode,
    seed: u64,
) -> Result<(), CheckpointError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let echo = HeaderEcho {
        dims: params.dims.clone(),
        vocab: vocab.tokens().to_vec(),
        mode,
        seed,
    };
    let header = serde_json::to_vec(&echo).expect("header serializes");
    w.write_all(&(header.len() as u64).to_le_bytes())?;
    w.write_all(&header)?;
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for p in params.params() {
        w.write_all(&(p.name.len() as u32).to_le_bytes())?;
        w.write_all(p.name.as_bytes())?;
        w.write_all(&(p.shape.len() as u32).to_le_bytes())?;
        for &d in &p.shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
    }
    for p in params.params() {
        for &v in &p.values {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint, CheckpointError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let header_len = read_u64(&mut r)? as usize;
    let mut header = vec![0u8; header_len];
    r.read_exact(&mut header)?;
    let echo: HeaderEcho =
        serde_json::from_slice(&header).map_err(|e| CheckpointError::Header(e.to_string()))?;
    if echo.vocab.len() != echo.dims.vocab_size {
        return Err(CheckpointError::Header(format!(
            "vocabulary has {} tokens but dims expect {}",
            echo.vocab.len(),
            echo.dims.vocab_size
        )));
    }

    let n_params = read_u32(&mut r)? as usize;
    let expected = param_layout(&echo.dims);
    if n_params != expected.len() {
        return Err(CheckpointError::Shape(format!(
            "{n_params} tensors in file, config expects {}",
            expected.len()
        )));
    }
    let mut table = Vec::with_capacity(n_params);
    for (name, shape) in &expected {
        let name_len = read_u32(&mut r)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)?;
        let found =
            String::from_utf8(name_bytes).map_err(|e| CheckpointError::Header(e.to_string()))?;
        if &found != name {
            return Err(CheckpointError::Shape(format!(
                "tensor `{found}` where `{name}` was expected"
            )));
        }
        let ndim = read_u32(&mut r)? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(read_u64(&mut r)? as usize);
        }
        if &dims != shape {
            return Err(CheckpointError::Shape(format!(
                "tensor `{name}` has shape {dims:?}, config expects {shape:?}"
            )));
        }
        table.push((found, dims));
    }
    let mut parts = Vec::with_capacity(n_params);
    for (name, shape) in table {
        let n: usize = shape.iter().product();
        let mut values = Vec::with_capacity(n);
        let mut buf = [0u8; 8];
        for _ in 0..n {
            r.read_exact(&mut buf)?;
            values.push(f64::from_le_bytes(buf));
        }
        parts.push(Param { name, shape, values });
    }
    let params =
        ModelParams::from_parts(echo.dims, parts).map_err(CheckpointError::Shape)?;
    Ok(Checkpoint {
        params,
        vocab: Vocabulary::from_id_order(echo.vocab),
        mode: echo.mode,
        seed: echo.seed,
    })
}

fn read_u32(r: &mut impl Read) -> Result<u32, std::io::Error> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64(r: &mut impl Read) -> Result<u64, std::io::Error> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}
