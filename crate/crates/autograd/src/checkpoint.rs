//! Versioned binary container: `name → shape → little-endian f64 data`.
//!
//! Layout: magic `WRCKPT\0\0`, `u32` version, `u32` entry count, then per
//! entry `u32` name length, UTF-8 name, `u32` rank, `u64` dims, `f64` values.

use std::fs;
use std::path::Path;

use crate::error::{Result, TensorError};
use crate::param::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"WRCKPT\0\0";
pub const VERSION: u32 = 1;

pub fn encode(entries: &[(String, Tensor)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(TensorError::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(buf: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(TensorError::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(TensorError::Checkpoint(format!("unsupported version {}", version)));
    }
    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| TensorError::Checkpoint("name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(r.f64()?);
        }
        entries.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != buf.len() {
        return Err(TensorError::Checkpoint("trailing bytes".into()));
    }
    Ok(entries)
}

pub fn store_entries(store: &ParamStore) -> Vec<(String, Tensor)> {
    store
        .iter()
        .map(|(_, p)| (p.name.clone(), p.value.clone()))
        .collect()
}

pub fn save(entries: &[(String, Tensor)], path: &Path) -> Result<()> {
    fs::write(path, encode(entries))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Vec<(String, Tensor)>> {
    decode(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_bits() {
        let entries = vec![
            ("a/b".to_string(), Tensor::new(vec![2, 2], vec![1.0, -0.0, 1e-300, 3.5]).unwrap()),
            ("s".to_string(), Tensor::scalar(std::f64::consts::PI)),
        ];
        let bytes = encode(&entries);
        let back = decode(&bytes).unwrap();
        assert_eq!(back.len(), 2);
        for ((n1, t1), (n2, t2)) in entries.iter().zip(&back) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape(), t2.shape());
            let b1: Vec<u64> = t1.data().iter().map(|v| v.to_bits()).collect();
            let b2: Vec<u64> = t2.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(b1, b2);
        }
    }

    #[test]
    fn rejects_corruption() {
        let bytes = encode(&[("x".into(), Tensor::vector(vec![1.0]))]);
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad).is_err());
        let mut v2 = bytes;
        v2[8] = 2;
        assert!(decode(&v2).is_err());
    }
}
