//! Binary parameter file: `COCOA1`, config record, then per tensor its name,
//! shape and little-endian f64 payload.

use std::io::{self, Read, Write};

use super::{ModelConfig, ModelError, ModelParams};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 6] = b"COCOA1";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("checkpoint truncated")]
    Truncated,
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint config mismatch: {0}")]
    ConfigMismatch(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub(crate) fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<(), CheckpointError> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => CheckpointError::Truncated,
        _ => CheckpointError::Io(e),
    })
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<u32, CheckpointError> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_u64<R: Read>(r: &mut R) -> Result<u64, CheckpointError> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub(crate) fn read_f64s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>, CheckpointError> {
    let mut bytes = vec![0u8; n * 8];
    read_exact(r, &mut bytes)?;
    Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
}

pub(crate) fn write_f64s<W: Write>(w: &mut W, xs: &[f64]) -> io::Result<()> {
    let mut bytes = Vec::with_capacity(xs.len() * 8);
    for x in xs {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    w.write_all(&bytes)
}

fn config_fields(c: &ModelConfig) -> [usize; 7] {
    [c.d_model, c.n_layers, c.n_heads, c.vocab_size, c.patch_dim, c.max_seq, c.mae_decoder_layers]
}

pub fn write_params<W: Write>(w: &mut W, params: &ModelParams) -> io::Result<()> {
    w.write_all(MAGIC)?;
    for f in config_fields(params.config()) {
        w.write_all(&(f as u64).to_le_bytes())?;
    }
    w.write_all(&(params.tensors().len() as u32).to_le_bytes())?;
    for (name, t) in params.names().iter().zip(params.tensors()) {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        write_f64s(w, t.data())?;
    }
    Ok(())
}

const MAX_NAME: u32 = 1 << 12;
const MAX_RANK: u32 = 8;
const MAX_NUMEL: usize = 1 << 28;

pub fn read_params<R: Read>(r: &mut R) -> Result<ModelParams, CheckpointError> {
    let mut magic = [0u8; 6];
    read_exact(r, &mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut f = [0usize; 7];
    for x in f.iter_mut() {
        *x = read_u64(r)? as usize;
    }
    let config = ModelConfig {
        d_model: f[0],
        n_layers: f[1],
        n_heads: f[2],
        vocab_size: f[3],
        patch_dim: f[4],
        max_seq: f[5],
        mae_decoder_layers: f[6],
    };
    config.validate().map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
    let count = read_u32(r)? as usize;
    let mut names = Vec::with_capacity(count);
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let len = read_u32(r)?;
        if len > MAX_NAME {
            return Err(CheckpointError::Corrupt(format!("name length {len}")));
        }
        let mut name = vec![0u8; len as usize];
        read_exact(r, &mut name)?;
        let name = String::from_utf8(name).map_err(|_| CheckpointError::Corrupt("non-utf8 name".into()))?;
        let rank = read_u32(r)?;
        if rank > MAX_RANK {
            return Err(CheckpointError::Corrupt(format!("{name}: rank {rank}")));
        }
        let shape = (0..rank).map(|_| read_u64(r).map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        let numel = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d)).filter(|&n| n <= MAX_NUMEL);
        let numel = numel.ok_or_else(|| CheckpointError::Corrupt(format!("{name}: shape {shape:?}")))?;
        let data = read_f64s(r, numel)?;
        let t = Tensor::new(shape, data).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        names.push(name);
        tensors.push(t);
    }
    ModelParams::from_parts(config, names, tensors).map_err(|e| CheckpointError::Corrupt(e.to_string()))
}
