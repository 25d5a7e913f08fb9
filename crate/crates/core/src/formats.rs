//! Framed little-endian binary files: token labels, per-batch losses and masks.
//!
//! Every file starts with a header:
//!
//! ```text
//! magic        4 bytes   "CMTL" | "CMLS" | "CMMK" | "CMCK"
//! version      u16       1
//! prov_len     u32
//! provenance   prov_len bytes of JSON
//! count        u32       number of records
//! ```
//!
//! Bit arrays are packed eight per byte, least significant bit first, and padded to a
//! whole byte. The record layouts are documented on the read/write functions and in
//! `docs/formats.md`.

use std::io::{self, Read, Write};

use thiserror::Error;

use crate::factlabel::WordClass;
use crate::provenance::Provenance;

pub const TOKEN_LABEL_MAGIC: [u8; 4] = *b"CMTL";
pub const LOSS_MAGIC: [u8; 4] = *b"CMLS";
pub const MASK_MAGIC: [u8; 4] = *b"CMMK";
pub const CHECKPOINT_MAGIC: [u8; 4] = *b"CMCK";
pub const FORMAT_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u16),
    #[error("invalid class byte {0}")]
    InvalidClass(u8),
    #[error("invalid provenance header: {0}")]
    Provenance(#[from] serde_json::Error),
    #[error("invalid UTF-8 in document id")]
    DocId,
    #[error("record of {len} items exceeds the format limit")]
    TooLong { len: usize },
}

fn write_u32<W: Write>(w: &mut W, v: usize) -> Result<(), FormatError> {
    let v = u32::try_from(v).map_err(|_| FormatError::TooLong { len: v })?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u16<R: Read>(r: &mut R) -> io::Result<u16> {
    let mut b = [0; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32<R: Read>(r: &mut R) -> io::Result<u32> {
    let mut b = [0; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> io::Result<u64> {
    let mut b = [0; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_bytes<R: Read>(r: &mut R, n: usize) -> io::Result<Vec<u8>> {
    let mut buf = Vec::new();
    r.take(n as u64).read_to_end(&mut buf)?;
    if buf.len() != n {
        return Err(io::ErrorKind::UnexpectedEof.into());
    }
    Ok(buf)
}

pub fn pack_bits(bits: &[bool]) -> Vec<u8> {
    let mut out = vec![0u8; bits.len().div_ceil(8)];
    for (i, &b) in bits.iter().enumerate() {
        if b {
            out[i / 8] |= 1 << (i % 8);
        }
    }
    out
}

pub fn unpack_bits(bytes: &[u8], n: usize) -> Vec<bool> {
    (0..n).map(|i| bytes[i / 8] >> (i % 8) & 1 == 1).collect()
}

/// Writes the common file header.
pub fn write_header<W: Write>(w: &mut W, magic: [u8; 4], prov: &Provenance, count: usize) -> Result<(), FormatError> {
    w.write_all(&magic)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    let json = prov.to_json();
    write_u32(w, json.len())?;
    w.write_all(json.as_bytes())?;
    write_u32(w, count)
}

/// Reads and checks the common file header; returns the provenance and record count.
pub fn read_header<R: Read>(r: &mut R, magic: [u8; 4]) -> Result<(Provenance, usize), FormatError> {
    let mut found = [0u8; 4];
    r.read_exact(&mut found)?;
    if found != magic {
        return Err(FormatError::BadMagic {
            expected: String::from_utf8_lossy(&magic).into_owned(),
            found: String::from_utf8_lossy(&found).into_owned(),
        });
    }
    let version = read_u16(r)?;
    if version != FORMAT_VERSION {
        return Err(FormatError::UnsupportedVersion(version));
    }
    let len = read_u32(r)? as usize;
    let prov = serde_json::from_slice(&read_bytes(r, len)?)?;
    let count = read_u32(r)? as usize;
    Ok((prov, count))
}

/// One document of a token-label file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenLabelRecord {
    pub doc_id: String,
    pub token_ids: Vec<u32>,
    pub classes: Vec<WordClass>,
    /// Externally supplied call labels (all false when absent).
    pub calls: Vec<bool>,
}

/// Record layout: `u32 id_len, id bytes, u32 n, n x u32 token ids, n x u8 classes
/// (0 other, 1 grammatical, 2 fact), ceil(n/8) bytes of call bits`.
pub fn write_token_labels<W: Write>(
    mut w: W,
    prov: &Provenance,
    records: &[TokenLabelRecord],
) -> Result<(), FormatError> {
    write_header(&mut w, TOKEN_LABEL_MAGIC, prov, records.len())?;
    for rec in records {
        let n = rec.token_ids.len();
        assert!(rec.classes.len() == n && rec.calls.len() == n, "token-label record arrays must have equal lengths");
        write_u32(&mut w, rec.doc_id.len())?;
        w.write_all(rec.doc_id.as_bytes())?;
        write_u32(&mut w, n)?;
        for id in &rec.token_ids {
            w.write_all(&id.to_le_bytes())?;
        }
        let classes: Vec<u8> = rec.classes.iter().map(|c| c.as_u8()).collect();
        w.write_all(&classes)?;
        w.write_all(&pack_bits(&rec.calls))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_token_labels<R: Read>(mut r: R) -> Result<(Provenance, Vec<TokenLabelRecord>), FormatError> {
    let (prov, count) = read_header(&mut r, TOKEN_LABEL_MAGIC)?;
    let mut records = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let id_len = read_u32(&mut r)? as usize;
        let doc_id = String::from_utf8(read_bytes(&mut r, id_len)?).map_err(|_| FormatError::DocId)?;
        let n = read_u32(&mut r)? as usize;
        let raw = read_bytes(&mut r, n * 4)?;
        let token_ids = raw.chunks_exact(4).map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        let classes = read_bytes(&mut r, n)?
            .into_iter()
            .map(|b| WordClass::from_u8(b).ok_or(FormatError::InvalidClass(b)))
            .collect::<Result<_, _>>()?;
        let calls = unpack_bits(&read_bytes(&mut r, n.div_ceil(8))?, n);
        records.push(TokenLabelRecord { doc_id, token_ids, classes, calls });
    }
    Ok((prov, records))
}

/// Per-position losses of one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct LossRecord {
    pub ordinal: u64,
    pub losses: Vec<f32>,
}

/// Record layout: `u64 ordinal, u32 n, n x f32`.
pub fn write_losses<W: Write>(mut w: W, prov: &Provenance, records: &[LossRecord]) -> Result<(), FormatError> {
    write_header(&mut w, LOSS_MAGIC, prov, records.len())?;
    for rec in records {
        w.write_all(&rec.ordinal.to_le_bytes())?;
        write_u32(&mut w, rec.losses.len())?;
        for l in &rec.losses {
            w.write_all(&l.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_losses<R: Read>(mut r: R) -> Result<(Provenance, Vec<LossRecord>), FormatError> {
    let (prov, count) = read_header(&mut r, LOSS_MAGIC)?;
    let mut records = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let ordinal = read_u64(&mut r)?;
        let n = read_u32(&mut r)? as usize;
        let raw = read_bytes(&mut r, n * 4)?;
        let losses = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        records.push(LossRecord { ordinal, losses });
    }
    Ok((prov, records))
}

/// Call and ignore bits of one batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskRecord {
    pub ordinal: u64,
    pub call: Vec<bool>,
    pub ignore: Vec<bool>,
}

/// Record layout: `u64 ordinal, u32 n, ceil(n/8) bytes call bits, ceil(n/8) bytes ignore bits`.
pub fn write_masks<W: Write>(mut w: W, prov: &Provenance, records: &[MaskRecord]) -> Result<(), FormatError> {
    write_header(&mut w, MASK_MAGIC, prov, records.len())?;
    for rec in records {
        assert_eq!(rec.call.len(), rec.ignore.len(), "mask record arrays must have equal lengths");
        w.write_all(&rec.ordinal.to_le_bytes())?;
        write_u32(&mut w, rec.call.len())?;
        w.write_all(&pack_bits(&rec.call))?;
        w.write_all(&pack_bits(&rec.ignore))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_masks<R: Read>(mut r: R) -> Result<(Provenance, Vec<MaskRecord>), FormatError> {
    let (prov, count) = read_header(&mut r, MASK_MAGIC)?;
    let mut records = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let ordinal = read_u64(&mut r)?;
        let n = read_u32(&mut r)? as usize;
        let call = unpack_bits(&read_bytes(&mut r, n.div_ceil(8))?, n);
        let ignore = unpack_bits(&read_bytes(&mut r, n.div_ceil(8))?, n);
        records.push(MaskRecord { ordinal, call, ignore });
    }
    Ok((prov, records))
}
