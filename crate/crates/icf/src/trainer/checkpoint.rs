//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!   magic `ICF1`, u32 version, u64 tensor count,
//!   per tensor: u32 name length, UTF-8 name, u32 rank, u64 dims, f64 data;
//!   then named blocks to EOF: u32 name length, name, u64 payload length, payload.
//!
//! Serialization is fully deterministic, so save -> load -> save is
//! byte-identical.

use crate::autodiff::Tensor;
use crate::error::{IcfError, Result};
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"ICF1";
pub const VERSION: u32 = 1;

/// Everything a checkpoint holds: parameter tensors in model order plus
/// opaque named blocks (optimizer, RNG, step counter, env state, config).
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointData {
    pub tensors: Vec<(String, Tensor)>,
    pub blocks: Vec<(String, Vec<u8>)>,
}

impl CheckpointData {
    pub fn block(&self, name: &str) -> Option<&[u8]> {
        self.blocks
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, b)| b.as_slice())
    }
}

pub fn encode_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Sequential reader with truncation-aware errors.
pub struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(IcfError::CorruptCheckpoint(format!(
                "truncated: wanted {} bytes at offset {}, {} left",
                n,
                self.pos,
                self.remaining()
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        if n > 1 << 20 {
            return Err(IcfError::CorruptCheckpoint(format!("name length {n} implausible")));
        }
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| IcfError::CorruptCheckpoint("non-UTF-8 name".into()))
    }
}

pub fn decode_tensor(r: &mut Reader) -> Result<(String, Tensor)> {
    let name = r.string()?;
    let rank = r.u32()? as usize;
    if rank > 8 {
        return Err(IcfError::CorruptCheckpoint(format!("rank {rank} implausible")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(r.u64()? as usize);
    }
    let n: usize = shape.iter().product();
    if n > 1 << 28 {
        return Err(IcfError::CorruptCheckpoint(format!("tensor numel {n} implausible")));
    }
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        data.push(r.f64()?);
    }
    let t = Tensor::new(shape, data)
        .map_err(|e| IcfError::CorruptCheckpoint(format!("bad tensor `{name}`: {e}")))?;
    Ok((name, t))
}

pub fn encode(data: &CheckpointData) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(data.tensors.len() as u64).to_le_bytes());
    for (name, t) in &data.tensors {
        encode_tensor(&mut out, name, t);
    }
    for (name, payload) in &data.blocks {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        out.extend_from_slice(payload);
    }
    out
}

pub fn decode(buf: &[u8]) -> Result<CheckpointData> {
    let mut r = Reader::new(buf);
    let magic = r.take(4)?;
    if magic != MAGIC {
        return Err(IcfError::CorruptCheckpoint(format!("bad magic {magic:?}")));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(IcfError::CheckpointVersion {
            found: version,
            expected: VERSION,
        });
    }
    let count = r.u64()? as usize;
    if count > 1 << 20 {
        return Err(IcfError::CorruptCheckpoint(format!("tensor count {count} implausible")));
    }
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        tensors.push(decode_tensor(&mut r)?);
    }
    let mut blocks = Vec::new();
    while r.remaining() > 0 {
        let name = r.string()?;
        let len = r.u64()? as usize;
        blocks.push((name, r.take(len)?.to_vec()));
    }
    Ok(CheckpointData { tensors, blocks })
}

pub fn save(path: &Path, data: &CheckpointData) -> Result<()> {
    crate::ppm::write_atomic(path, &encode(data))
}

pub fn load(path: &Path) -> Result<CheckpointData> {
    decode(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> CheckpointData {
        CheckpointData {
            tensors: vec![
                ("encoder.0.w".into(), Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap()),
                ("encoder.0.b".into(), Tensor::vector(vec![-0.5, 0.5, 0.0])),
            ],
            blocks: vec![
                ("step".into(), 42u64.to_le_bytes().to_vec()),
                ("config".into(), b"{\"preset\":\"mazebase-small\"}".to_vec()),
            ],
        }
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let data = sample();
        let bytes = encode(&data);
        let back = decode(&bytes).unwrap();
        assert_eq!(back, data);
        assert_eq!(encode(&back), bytes);
    }

    #[test]
    fn magic_and_version_enforced() {
        let mut bytes = encode(&sample());
        bytes[0] = b'X';
        assert!(matches!(decode(&bytes), Err(IcfError::CorruptCheckpoint(_))));

        let mut bytes2 = encode(&sample());
        bytes2[4] = 99;
        assert!(matches!(
            decode(&bytes2),
            Err(IcfError::CheckpointVersion { found: 99, expected: 1 })
        ));
    }

    #[test]
    fn truncation_is_detected() {
        let bytes = encode(&sample());
        for cut in [3, 10, bytes.len() - 1] {
            assert!(decode(&bytes[..cut]).is_err(), "cut at {cut} not detected");
        }
    }
}
