//! Trainer checkpoint: the parameter file followed by the producing stage,
//! step counter, stage config and Adam moments.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::{AdamMoments, PipelineError, StageConfig, TrainerState};
use crate::model::{read_params, write_params, CheckpointError};
use crate::tensor::Tensor;

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<(), CheckpointError> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => CheckpointError::Truncated,
        _ => CheckpointError::Io(e),
    })
}

fn read_f64s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>, CheckpointError> {
    let mut bytes = vec![0u8; n * 8];
    read_exact(r, &mut bytes)?;
    Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
}

fn write_f64s<W: Write>(w: &mut W, xs: &[f64]) -> std::io::Result<()> {
    let bytes: Vec<u8> = xs.iter().flat_map(|x| x.to_le_bytes()).collect();
    w.write_all(&bytes)
}

const MAX_CONFIG: u32 = 1 << 16;

pub fn write_state<W: Write>(w: &mut W, state: &TrainerState) -> std::io::Result<()> {
    write_params(w, &state.params)?;
    w.write_all(&[state.stage])?;
    w.write_all(&state.step.to_le_bytes())?;
    let cfg = serde_json::to_vec(&state.config).expect("stage config serializes");
    w.write_all(&(cfg.len() as u32).to_le_bytes())?;
    w.write_all(&cfg)?;
    for (m, v) in state.moments.m.iter().zip(&state.moments.v) {
        write_f64s(w, m.data())?;
        write_f64s(w, v.data())?;
    }
    Ok(())
}

pub fn read_state<R: Read>(r: &mut R) -> Result<TrainerState, CheckpointError> {
    let params = read_params(r)?;
    let mut stage = [0u8; 1];
    read_exact(r, &mut stage)?;
    let mut step = [0u8; 8];
    read_exact(r, &mut step)?;
    let mut len = [0u8; 4];
    read_exact(r, &mut len)?;
    let len = u32::from_le_bytes(len);
    if len > MAX_CONFIG {
        return Err(CheckpointError::Corrupt(format!("stage config of {len} bytes")));
    }
    let mut cfg = vec![0u8; len as usize];
    read_exact(r, &mut cfg)?;
    let config: StageConfig = serde_json::from_slice(&cfg).map_err(|e| CheckpointError::Corrupt(format!("stage config: {e}")))?;
    let mut m = Vec::with_capacity(params.tensors().len());
    let mut v = Vec::with_capacity(params.tensors().len());
    for t in params.tensors() {
        for out in [&mut m, &mut v] {
            let data = read_f64s(r, t.numel())?;
            out.push(Tensor::new(t.shape().to_vec(), data).map_err(|e| CheckpointError::Corrupt(e.to_string()))?);
        }
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(CheckpointError::Corrupt("trailing bytes".into()));
    }
    Ok(TrainerState {
        params,
        moments: AdamMoments { m, v },
        step: u64::from_le_bytes(step),
        stage: stage[0],
        config,
        metrics: Vec::new(),
    })
}

pub fn save_checkpoint(state: &TrainerState, path: &Path) -> Result<(), PipelineError> {
    let mut buf = Vec::new();
    write_state(&mut buf, state).map_err(CheckpointError::Io)?;
    fs::write(path, buf).map_err(|e| PipelineError::Io(format!("{}: {e}", path.display())))
}

pub fn load_checkpoint(path: &Path) -> Result<TrainerState, PipelineError> {
    let bytes = fs::read(path).map_err(|e| PipelineError::Io(format!("{}: {e}", path.display())))?;
    Ok(read_state(&mut bytes.as_slice())?)
}
