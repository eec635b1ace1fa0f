//! `DPT1` checkpoint files.
//!
//! Layout: the four magic bytes `DPT1`, then one record per tensor until EOF:
//! name length (u64 LE), UTF-8 name, rank (u64 LE), `rank` dims (u64 LE),
//! then the values as f32 LE in row-major order.

use std::path::Path;

use super::{Real, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"DPT1";

// Upper bounds that reject garbage headers before allocating.
const MAX_NAME_LEN: u64 = 4096;
const MAX_RANK: u64 = 8;

pub fn encode_records<'a, I>(records: I) -> Vec<u8>
where
    I: IntoIterator<Item = (&'a str, &'a Tensor)>,
{
    let mut out = MAGIC.to_vec();
    for (name, t) in records {
        out.extend_from_slice(&(name.len() as u64).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u64).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            // a no-op cast unless the engine runs at double precision
            #[allow(clippy::unnecessary_cast)]
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.buf.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }
}

/// Decodes a checkpoint buffer. `origin` is only used in error messages.
pub fn decode_records(buf: &[u8], origin: &Path) -> Result<Vec<(String, Tensor)>> {
    let bad = |detail: String| Error::format(origin, detail);
    if buf.len() < 4 || &buf[..4] != MAGIC {
        return Err(bad("missing DPT1 magic".into()));
    }
    let mut cur = Cursor { buf, pos: 4 };
    let mut records = Vec::new();
    while cur.pos < buf.len() {
        let idx = records.len();
        let trunc = |what: &str| bad(format!("truncated {what} in record {idx}"));
        let name_len = cur.u64().ok_or_else(|| trunc("name length"))?;
        if name_len > MAX_NAME_LEN {
            return Err(bad(format!("name length {name_len} in record {idx}")));
        }
        let name_bytes = cur.take(name_len as usize).ok_or_else(|| trunc("name"))?;
        let name = std::str::from_utf8(name_bytes)
            .map_err(|e| bad(format!("record {idx} name is not UTF-8: {e}")))?
            .to_owned();
        let rank = cur.u64().ok_or_else(|| trunc("rank"))?;
        if rank == 0 || rank > MAX_RANK {
            return Err(bad(format!("rank {rank} in record {name}")));
        }
        let mut shape = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            let d = cur.u64().ok_or_else(|| trunc("dims"))?;
            shape.push(usize::try_from(d).map_err(|_| bad(format!("dim {d} in {name}")))?);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| bad(format!("shape {shape:?} overflows")))?;
        let bytes = numel
            .checked_mul(4)
            .and_then(|n| cur.take(n))
            .ok_or_else(|| trunc("values"))?;
        let data: Vec<Real> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as Real)
            .collect();
        let tensor = Tensor::new(shape, data).map_err(|e| bad(e.to_string()))?;
        records.push((name, tensor));
    }
    Ok(records)
}

pub fn write_checkpoint<'a, I>(path: &Path, records: I) -> Result<()>
where
    I: IntoIterator<Item = (&'a str, &'a Tensor)>,
{
    std::fs::write(path, encode_records(records)).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_records(&buf, path)
}
