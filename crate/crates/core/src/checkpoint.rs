//! Binary parameter checkpoints.
//!
//! Layout: the 8-byte magic `FUSENET1`, then per parameter, in order:
//! id length (u64 LE), id bytes (UTF-8), rank (u64 LE), each extent
//! (u64 LE), and the values as f64 LE. The stream ends after the last
//! parameter. Dataset snapshots reuse the same encoding for sample tensors.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"FUSENET1";

pub fn encode<'a>(entries: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    for (id, t) in entries {
        buf.extend_from_slice(&(id.len() as u64).to_le_bytes());
        buf.extend_from_slice(id.as_bytes());
        buf.extend_from_slice(&(t.rank() as u64).to_le_bytes());
        for &e in t.shape() {
            buf.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> std::result::Result<&[u8], String> {
        if self.bytes.len() - self.pos < n {
            return Err(format!("truncated at byte {}", self.pos));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> std::result::Result<Vec<(String, Tensor)>, String> {
    if bytes.len() < 8 || &bytes[..8] != MAGIC {
        return Err("missing FUSENET1 magic".into());
    }
    let mut cur = Cursor { bytes, pos: 8 };
    let mut out = Vec::new();
    while cur.pos < bytes.len() {
        let id_len = cur.u64()? as usize;
        let id = String::from_utf8(cur.take(id_len)?.to_vec()).map_err(|e| e.to_string())?;
        let rank = cur.u64()? as usize;
        if rank == 0 || rank > 8 {
            return Err(format!("implausible rank {rank} for {id}"));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u64()? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &e| acc.checked_mul(e))
            .ok_or_else(|| format!("extent overflow for {id}"))?;
        let raw = cur.take(n.checked_mul(8).ok_or("size overflow")?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(&shape, data).map_err(|e| e.to_string())?;
        out.push((id, t));
    }
    Ok(out)
}

pub fn save<'a>(path: &Path, entries: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Result<()> {
    let bytes = encode(entries);
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|reason| Error::Format {
        path: path.to_path_buf(),
        reason,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn layout_is_as_documented() {
        let t = Tensor::new(&[1, 2], vec![1.5, -2.0]).unwrap();
        let bytes = encode([("w", &t)]);
        let mut expected = b"FUSENET1".to_vec();
        expected.extend_from_slice(&1u64.to_le_bytes());
        expected.push(b'w');
        expected.extend_from_slice(&2u64.to_le_bytes());
        expected.extend_from_slice(&1u64.to_le_bytes());
        expected.extend_from_slice(&2u64.to_le_bytes());
        expected.extend_from_slice(&1.5f64.to_le_bytes());
        expected.extend_from_slice(&(-2.0f64).to_le_bytes());
        assert_eq!(bytes, expected);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(decode(b"FUSENET0").is_err());
        let t = Tensor::zeros(&[3]);
        let bytes = encode([("x", &t)]);
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
    }

    proptest! {
        #[test]
        fn bit_exact_round_trip(
            values in prop::collection::vec(prop::num::f64::ANY, 1..40),
            id in "[a-z0-9_.]{0,12}",
        ) {
            let n = values.len();
            let t = Tensor::new(&[n], values).unwrap();
            let bytes = encode([(id.as_str(), &t)]);
            let back = decode(&bytes).unwrap();
            prop_assert_eq!(back.len(), 1);
            prop_assert_eq!(&back[0].0, &id);
            let bits: Vec<u64> = back[0].1.data().iter().map(|v| v.to_bits()).collect();
            let orig: Vec<u64> = t.data().iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(bits, orig);
            prop_assert_eq!(encode([(id.as_str(), &back[0].1)]), bytes);
        }
    }
}
