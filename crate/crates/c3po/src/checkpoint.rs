//! Binary parameter checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "C3PO"  u8 version (= 1)  u32 entry_count
//! per entry: u32 name_len, name (UTF-8), u32 dims[4], f32 payload[prod(dims)]
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Shape;

pub const MAGIC: &[u8; 4] = b"C3PO";
pub const VERSION: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub shape: Shape,
    pub data: Vec<f32>,
}

pub fn encode(entries: &[Entry]) -> Vec<u8> {
    let payload: usize = entries.iter().map(|e| 4 + e.name.len() + 16 + 4 * e.data.len()).sum();
    let mut out = Vec::with_capacity(9 + payload);
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for e in entries {
        out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        for d in e.shape.0 {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &e.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Checkpoint(format!("truncated file at byte {} (wanted {n} more)", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<Entry>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic, not a C3PO checkpoint".into()));
    }
    let version = r.take(1)?[0];
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Checkpoint("entry name is not UTF-8".into()))?
            .to_owned();
        let mut dims = [0usize; 4];
        for d in &mut dims {
            *d = r.u32()? as usize;
        }
        let shape = Shape(dims);
        let raw = r.take(shape.numel() * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        entries.push(Entry { name, shape, data });
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(entries)
}

pub fn write(path: &Path, entries: &[Entry]) -> Result<()> {
    std::fs::write(path, encode(entries)).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<Vec<Entry>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_bytes() {
        let bytes = encode(&[Entry {
            name: "w".into(),
            shape: Shape::new(1, 1, 1, 1),
            data: vec![1.0],
        }]);
        assert_eq!(&bytes[..4], b"C3PO");
        assert_eq!(bytes[4], 1);
        assert_eq!(&bytes[5..9], &1u32.to_le_bytes());
        assert_eq!(&bytes[9..13], &1u32.to_le_bytes());
        assert_eq!(bytes[13], b'w');
        assert_eq!(&bytes[bytes.len() - 4..], &1.0f32.to_le_bytes());
        assert_eq!(bytes.len(), 9 + 4 + 1 + 16 + 4);
    }

    #[test]
    fn rejects_unknown_version() {
        let mut bytes = encode(&[]);
        bytes[4] = 2;
        assert!(decode(&bytes).unwrap_err().to_string().contains("version 2"));
    }

    #[test]
    fn rejects_truncation_and_bad_magic() {
        let bytes = encode(&[Entry {
            name: "abc".into(),
            shape: Shape::new(1, 2, 1, 1),
            data: vec![1.0, 2.0],
        }]);
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode(b"NOPE\x01\0\0\0\0").is_err());
    }

    proptest! {
        #[test]
        fn round_trip(entries in prop::collection::vec(
            ("[a-z.]{1,12}", 1usize..3, 1usize..4, prop::collection::vec(any::<f32>(), 1..=1)), 0..5)
        ) {
            let entries: Vec<Entry> = entries
                .into_iter()
                .map(|(name, c, h, seed)| {
                    let shape = Shape::new(1, c, h, 2);
                    let data = (0..shape.numel()).map(|i| seed[0] * i as f32).collect();
                    Entry { name, shape, data }
                })
                .collect();
            let decoded = decode(&encode(&entries)).unwrap();
            prop_assert_eq!(decoded.len(), entries.len());
            for (a, b) in decoded.iter().zip(&entries) {
                prop_assert_eq!(&a.name, &b.name);
                prop_assert_eq!(a.shape, b.shape);
                let bits = |d: &[f32]| d.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
                prop_assert_eq!(bits(&a.data), bits(&b.data));
            }
        }
    }
}
