//! Binary parameter checkpoints.
//!
//! Layout (all integers little-endian):
//! `b"RAPW"`, `u32` version, then records until end of file, each
//! `u16` name length, UTF-8 name, `u8` rank, rank × `u32` extents,
//! `f64` payload in row-major order.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use super::{ParamStore, Tensor, TensorError, TensorResult};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"RAPW";
pub const CHECKPOINT_VERSION: u32 = 1;

fn io_err(e: std::io::Error) -> TensorError {
    TensorError::Checkpoint(e.to_string())
}

pub fn write_checkpoint<W: Write>(store: &ParamStore, mut w: W) -> TensorResult<()> {
    w.write_all(CHECKPOINT_MAGIC).map_err(io_err)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes()).map_err(io_err)?;
    for (name, tensor, _) in store.iter() {
        let name_bytes = name.as_bytes();
        let name_len =
            u16::try_from(name_bytes.len()).map_err(|_| TensorError::Checkpoint(format!("name too long: {name}")))?;
        let rank =
            u8::try_from(tensor.rank()).map_err(|_| TensorError::Checkpoint(format!("rank too large: {name}")))?;
        let mut buf = Vec::with_capacity(2 + name_bytes.len() + 1 + 4 * tensor.rank() + 8 * tensor.len());
        buf.extend_from_slice(&name_len.to_le_bytes());
        buf.extend_from_slice(name_bytes);
        buf.push(rank);
        for &e in tensor.shape() {
            let e = u32::try_from(e).map_err(|_| TensorError::Checkpoint(format!("extent too large: {name}")))?;
            buf.extend_from_slice(&e.to_le_bytes());
        }
        for v in tensor.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf).map_err(io_err)?;
    }
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> TensorResult<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(TensorError::Checkpoint(format!(
                "truncated at byte {} (needed {n} more)",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> TensorResult<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> TensorResult<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

pub fn read_checkpoint<R: Read>(mut r: R) -> TensorResult<BTreeMap<String, Tensor>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(io_err)?;
    let mut c = Cursor { bytes: &bytes, pos: 0 };
    if c.take(4)? != CHECKPOINT_MAGIC {
        return Err(TensorError::Checkpoint("bad magic".into()));
    }
    let version = c.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(TensorError::Checkpoint(format!("unsupported version {version}")));
    }
    let mut out = BTreeMap::new();
    while !c.done() {
        let len = c.u16()? as usize;
        let name = std::str::from_utf8(c.take(len)?)
            .map_err(|e| TensorError::Checkpoint(e.to_string()))?
            .to_string();
        let rank = c.take(1)?[0] as usize;
        let shape = (0..rank)
            .map(|_| c.u32().map(|v| v as usize))
            .collect::<TensorResult<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = c
            .take(8 * n)?
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        out.insert(name, Tensor::new(shape, data)?);
    }
    Ok(out)
}

impl ParamStore {
    /// Overwrites entries from checkpoint records. The record set must match
    /// the store exactly.
    pub fn load_records(&mut self, records: BTreeMap<String, Tensor>) -> TensorResult<()> {
        let expected: Vec<&str> = self.names().collect();
        let got: Vec<&str> = records.keys().map(String::as_str).collect();
        if expected != got {
            let missing: Vec<_> = expected.iter().filter(|n| !records.contains_key(**n)).collect();
            let extra: Vec<_> = got.iter().filter(|n| !self.contains(n)).collect();
            return Err(TensorError::Checkpoint(format!(
                "parameter set mismatch; missing {missing:?}, unexpected {extra:?}"
            )));
        }
        for (name, t) in records {
            self.set(&name, t)?;
        }
        Ok(())
    }
}
