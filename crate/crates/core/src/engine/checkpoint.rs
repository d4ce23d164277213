use std::collections::HashMap;
use std::io::{self, Read, Write};

use thiserror::Error;

use super::{EngineError, ModelWeights};
use crate::arch::Architecture;

pub const WEIGHTS_MAGIC: [u8; 4] = *b"WGTS";
pub const WEIGHTS_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a weights file (magic {0:02x?})")]
    BadMagic([u8; 4]),
    #[error("unsupported weights version {found} (expected {WEIGHTS_VERSION})")]
    UnsupportedVersion { found: u16 },
    #[error("weights file truncated in tensor {0}")]
    Truncated(usize),
    #[error("tensor name is not UTF-8")]
    BadName,
    #[error("tensor {name}: {message}")]
    Tensor { name: String, message: String },
    #[error("missing tensor {0}")]
    Missing(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Writes all named tensors as little-endian `f32`.
pub fn write_weights<W: Write>(weights: &ModelWeights, mut out: W) -> Result<(), CheckpointError> {
    out.write_all(&WEIGHTS_MAGIC)?;
    out.write_all(&WEIGHTS_VERSION.to_le_bytes())?;
    for (name, dims, data) in weights.named() {
        out.write_all(&(name.len() as u16).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        out.write_all(&[dims.len() as u8])?;
        for d in &dims {
            out.write_all(&(*d as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(data.len() * 4);
        for v in data {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        out.write_all(&buf)?;
    }
    out.flush()?;
    Ok(())
}

fn read_exact_or<R: Read>(r: &mut R, buf: &mut [u8], index: usize) -> Result<(), CheckpointError> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => CheckpointError::Truncated(index),
        _ => CheckpointError::Io(e),
    })
}

/// Reads a weights file and checks every tensor against the shapes `arch` implies.
pub fn read_weights<R: Read>(arch: &Architecture, mut input: R) -> Result<ModelWeights, CheckpointError> {
    let mut magic = [0u8; 4];
    read_exact_or(&mut input, &mut magic, 0)?;
    if magic != WEIGHTS_MAGIC {
        return Err(CheckpointError::BadMagic(magic));
    }
    let mut v = [0u8; 2];
    read_exact_or(&mut input, &mut v, 0)?;
    let found = u16::from_le_bytes(v);
    if found != WEIGHTS_VERSION {
        return Err(CheckpointError::UnsupportedVersion { found });
    }

    let mut tensors: HashMap<String, (Vec<usize>, Vec<f64>)> = HashMap::new();
    let mut index = 0usize;
    loop {
        let mut len = [0u8; 2];
        match input.read(&mut len[..1])? {
            0 => break,
            _ => read_exact_or(&mut input, &mut len[1..], index)?,
        }
        let mut name = vec![0u8; u16::from_le_bytes(len) as usize];
        read_exact_or(&mut input, &mut name, index)?;
        let name = String::from_utf8(name).map_err(|_| CheckpointError::BadName)?;
        let mut rank = [0u8; 1];
        read_exact_or(&mut input, &mut rank, index)?;
        let mut dims = Vec::with_capacity(rank[0] as usize);
        for _ in 0..rank[0] {
            let mut d = [0u8; 4];
            read_exact_or(&mut input, &mut d, index)?;
            dims.push(u32::from_le_bytes(d) as usize);
        }
        let count: usize = dims.iter().product();
        let mut raw = vec![0u8; count * 4];
        read_exact_or(&mut input, &mut raw, index)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        tensors.insert(name, (dims, data));
        index += 1;
    }

    let mut weights = ModelWeights::zeros(arch)?;
    let expected: Vec<(String, Vec<usize>)> = weights.named().into_iter().map(|(n, d, _)| (n, d)).collect();
    for ((name, slot), (_, dims)) in weights.named_mut().into_iter().zip(expected) {
        let (found_dims, data) = tensors
            .remove(&name)
            .ok_or_else(|| CheckpointError::Missing(name.clone()))?;
        if found_dims != dims {
            return Err(CheckpointError::Tensor {
                name,
                message: format!("dims {found_dims:?}, architecture expects {dims:?}"),
            });
        }
        *slot = data;
    }
    if let Some(extra) = tensors.keys().min() {
        return Err(CheckpointError::Tensor {
            name: extra.clone(),
            message: "not part of the architecture".into(),
        });
    }
    Ok(weights)
}
