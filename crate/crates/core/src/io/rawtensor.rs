//! The raw tensor container: a sequence of records, each
//! `"ZAIR1" | dtype u8 | 4 × u64 LE dims | f32 LE payload`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

pub const MAGIC: &[u8; 5] = b"ZAIR1";
pub const DTYPE_F32: u8 = 1;
const HEADER_LEN: usize = MAGIC.len() + 1 + 4 * 8;

pub fn encode_into(out: &mut Vec<u8>, t: &Tensor) {
    out.reserve(HEADER_LEN + 4 * t.numel());
    out.extend_from_slice(MAGIC);
    out.push(DTYPE_F32);
    for d in t.shape().0 {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode(tensors: &[Tensor]) -> Vec<u8> {
    let mut out = Vec::new();
    for t in tensors {
        encode_into(&mut out, t);
    }
    out
}

/// Decodes one record from the front of `bytes`, returning it and the rest.
pub fn decode_one(bytes: &[u8]) -> Result<(Tensor, &[u8])> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Decode(format!(
            "truncated header: {} of {HEADER_LEN} bytes",
            bytes.len()
        )));
    }
    if &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Decode("bad magic, expected ZAIR1".into()));
    }
    let dtype = bytes[MAGIC.len()];
    if dtype != DTYPE_F32 {
        return Err(Error::Decode(format!("unsupported dtype tag {dtype}")));
    }
    let mut dims = [0usize; 4];
    let mut count: usize = 1;
    for (i, d) in dims.iter_mut().enumerate() {
        let at = MAGIC.len() + 1 + 8 * i;
        let raw = u64::from_le_bytes(bytes[at..at + 8].try_into().expect("8 bytes"));
        *d = usize::try_from(raw)
            .map_err(|_| Error::Decode(format!("dimension {raw} too large")))?;
        count = count
            .checked_mul(*d)
            .ok_or_else(|| Error::Decode("dimension product overflows".into()))?;
    }
    let payload = count
        .checked_mul(4)
        .ok_or_else(|| Error::Decode("payload size overflows".into()))?;
    let rest = &bytes[HEADER_LEN..];
    if rest.len() < payload {
        return Err(Error::Decode(format!(
            "truncated payload: {} of {payload} bytes",
            rest.len()
        )));
    }
    let data = rest[..payload]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    let t = Tensor::from_vec(Shape(dims), data)?;
    Ok((t, &rest[payload..]))
}

/// Decodes every record; an empty input yields no tensors.
pub fn decode(mut bytes: &[u8]) -> Result<Vec<Tensor>> {
    let mut out = Vec::new();
    while !bytes.is_empty() {
        let (t, rest) = decode_one(bytes)?;
        out.push(t);
        bytes = rest;
    }
    Ok(out)
}

pub fn write_tensors(path: &Path, tensors: &[Tensor]) -> Result<()> {
    std::fs::write(path, encode(tensors))?;
    Ok(())
}

pub fn read_tensors(path: &Path) -> Result<Vec<Tensor>> {
    decode(&std::fs::read(path)?)
}
