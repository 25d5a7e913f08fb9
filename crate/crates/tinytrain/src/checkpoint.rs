//! Checkpoint files: the common framed header (magic `CMCK`, record count = tensor count),
//! then
//!
//! ```text
//! step        u64
//! model       5 x u32   vocab, context, dim, layers, heads
//! per tensor  u16 name length, name (UTF-8), u8 rank, rank x u32 dims, f32 data
//! ```
//!
//! Tensors appear in the model's fixed parameter order; all integers and floats are
//! little-endian.

use std::io::{self, Read, Write};

use callmask::formats::{read_header, write_header, FormatError, CHECKPOINT_MAGIC};
use callmask::provenance::Provenance;
use thiserror::Error;

use crate::model::{ModelConfig, Transformer};

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("checkpoint tensor {index} is {found:?}, expected {expected:?}")]
    Tensor { index: usize, found: String, expected: String },
    #[error("invalid checkpoint: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub provenance: Provenance,
    pub step: u64,
    pub model: Transformer,
}

pub fn write_checkpoint<W: Write>(
    mut w: W,
    prov: &Provenance,
    step: u64,
    model: &Transformer,
) -> Result<(), CheckpointError> {
    let infos = model.param_info();
    write_header(&mut w, CHECKPOINT_MAGIC, prov, infos.len())?;
    w.write_all(&step.to_le_bytes())?;
    let c = model.config;
    for v in [c.vocab, c.context, c.dim, c.layers, c.heads] {
        w.write_all(&(v as u32).to_le_bytes())?;
    }
    for info in infos {
        w.write_all(&(info.name.len() as u16).to_le_bytes())?;
        w.write_all(info.name.as_bytes())?;
        w.write_all(&[info.shape.len() as u8])?;
        for &d in &info.shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(info.len() * 4);
        for v in &model.params[info.offset..info.offset + info.len()] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

fn read_array<const N: usize, R: Read>(r: &mut R) -> io::Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)?;
    Ok(b)
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Checkpoint, CheckpointError> {
    let (provenance, count) = read_header(&mut r, CHECKPOINT_MAGIC)?;
    let step = u64::from_le_bytes(read_array(&mut r)?);
    let mut dims = [0usize; 5];
    for d in dims.iter_mut() {
        *d = u32::from_le_bytes(read_array(&mut r)?) as usize;
    }
    let config = ModelConfig { vocab: dims[0], context: dims[1], dim: dims[2], layers: dims[3], heads: dims[4] };
    config.validate().map_err(CheckpointError::Invalid)?;
    let mut model = Transformer::zeros(config);
    let infos = model.param_info().to_vec();
    if count != infos.len() {
        return Err(CheckpointError::Invalid(format!("{count} tensors, expected {}", infos.len())));
    }
    for (index, info) in infos.iter().enumerate() {
        let len = u16::from_le_bytes(read_array(&mut r)?) as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let rank = read_array::<1, _>(&mut r)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(read_array(&mut r)?) as usize);
        }
        let name = String::from_utf8(name).map_err(|_| CheckpointError::Invalid("tensor name is not UTF-8".into()))?;
        if name != info.name || shape != info.shape {
            return Err(CheckpointError::Tensor {
                index,
                found: format!("{name} {shape:?}"),
                expected: format!("{} {:?}", info.name, info.shape),
            });
        }
        let mut buf = vec![0u8; info.len() * 4];
        r.read_exact(&mut buf)?;
        for (dst, src) in model.params[info.offset..info.offset + info.len()].iter_mut().zip(buf.chunks_exact(4)) {
            *dst = f32::from_le_bytes(src.try_into().expect("four bytes"));
        }
    }
    Ok(Checkpoint { provenance, step, model })
}
