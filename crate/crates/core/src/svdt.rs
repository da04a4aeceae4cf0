//! Binary tensor containers.
//!
//! A single tensor is stored as an SVDT blob:
//!
//! ```text
//! "SVDT" | version: u32 | rank: u32 | dims: u32 * rank | payload: f32 * prod(dims)
//! ```
//!
//! all little-endian, payload row-major. A [`TensorArchive`] is an ordered list of
//! named SVDT blobs behind a JSON index:
//!
//! ```text
//! "SVDI" | version: u32 | index_len: u32 | index JSON | blob region
//! ```
//!
//! where every index entry records the blob's offset inside the blob region.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SVDT";
pub const ARCHIVE_MAGIC: &[u8; 4] = b"SVDI";
pub const VERSION: u32 = 1;

fn malformed(offset: u64, reason: impl Into<String>) -> Error {
    Error::Malformed {
        offset,
        reason: reason.into(),
    }
}

pub fn encode(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 4 * t.rank() + 4 * t.numel());
    write_tensor(&mut out, t).expect("writing to a Vec cannot fail");
    out
}

pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    let mut payload = Vec::with_capacity(4 * t.numel());
    for v in t.data() {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&payload)
}

/// Decodes one blob starting at `bytes[0]`; returns the tensor and the number
/// of bytes consumed. `base` is the absolute offset used in error reports.
pub fn decode_at(bytes: &[u8], base: u64) -> Result<(Tensor, usize)> {
    let word = |pos: usize| -> Result<u32> {
        bytes
            .get(pos..pos + 4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
            .ok_or_else(|| malformed(base + pos as u64, "unexpected end of data"))
    };
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(malformed(base, "bad magic, expected SVDT"));
    }
    let version = word(4)?;
    if version != VERSION {
        return Err(malformed(
            base + 4,
            format!("unsupported version {version}"),
        ));
    }
    let rank = word(8)? as usize;
    if rank == 0 || rank > 16 {
        return Err(malformed(base + 8, format!("implausible rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for i in 0..rank {
        let d = word(12 + 4 * i)? as usize;
        if d == 0 {
            return Err(malformed(base + 12 + 4 * i as u64, "zero-sized dimension"));
        }
        shape.push(d);
    }
    let start = 12 + 4 * rank;
    let n: usize = shape.iter().product();
    let end = start + 4 * n;
    let payload = bytes.get(start..end).ok_or_else(|| {
        malformed(
            base + bytes.len() as u64,
            format!("payload truncated, need {n} values"),
        )
    })?;
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((Tensor::from_parts(shape, data), end))
}

pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    let (t, used) = decode_at(bytes, 0)?;
    if used != bytes.len() {
        return Err(malformed(used as u64, "trailing bytes after tensor"));
    }
    Ok(t)
}

/// Reads one framed tensor from a stream; `Ok(None)` on clean end of stream.
pub fn read_tensor<R: Read>(r: &mut R, offset: u64) -> Result<Option<Tensor>> {
    let mut head = [0u8; 12];
    let mut got = 0;
    while got < head.len() {
        let n = r.read(&mut head[got..])?;
        if n == 0 {
            break;
        }
        got += n;
    }
    if got == 0 {
        return Ok(None);
    }
    if got < head.len() {
        return Err(malformed(offset + got as u64, "truncated tensor header"));
    }
    let rank = u32::from_le_bytes(head[8..12].try_into().unwrap()) as usize;
    if &head[..4] != MAGIC || rank == 0 || rank > 16 {
        return Err(decode_at(&head, offset)
            .err()
            .unwrap_or_else(|| malformed(offset, "bad header")));
    }
    let mut dims = vec![0u8; 4 * rank];
    r.read_exact(&mut dims)
        .map_err(|_| malformed(offset + 12, "truncated dimensions"))?;
    let n: usize = dims
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
        .product();
    let mut payload = vec![0u8; 4 * n];
    r.read_exact(&mut payload)
        .map_err(|_| malformed(offset + 12 + 4 * rank as u64, "truncated payload"))?;
    let mut all = head.to_vec();
    all.extend_from_slice(&dims);
    all.extend_from_slice(&payload);
    decode(&all).map(Some).map_err(|e| match e {
        Error::Malformed { offset: o, reason } => Error::Malformed {
            offset: offset + o,
            reason,
        },
        other => other,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct IndexEntry {
    pub name: String,
    pub offset: u64,
    pub shape: Vec<usize>,
    pub trainable: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Index {
    version: u32,
    #[serde(default)]
    meta: serde_json::Value,
    tensors: Vec<IndexEntry>,
}

/// Ordered named tensors plus free-form JSON metadata.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorArchive {
    pub meta: serde_json::Value,
    pub entries: Vec<(String, Tensor, bool)>,
}

impl TensorArchive {
    pub fn new(meta: serde_json::Value) -> Self {
        Self {
            meta,
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor, trainable: bool) {
        self.entries.push((name.into(), tensor.detach(), trainable));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries
            .iter()
            .find(|(n, _, _)| n == name)
            .map(|(_, t, _)| t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut blobs = Vec::new();
        let mut tensors = Vec::with_capacity(self.entries.len());
        for (name, t, trainable) in &self.entries {
            tensors.push(IndexEntry {
                name: name.clone(),
                offset: blobs.len() as u64,
                shape: t.shape().to_vec(),
                trainable: *trainable,
            });
            write_tensor(&mut blobs, t)?;
        }
        let index = serde_json::to_vec(&Index {
            version: VERSION,
            meta: self.meta.clone(),
            tensors,
        })?;
        let mut out = Vec::with_capacity(12 + index.len() + blobs.len());
        out.extend_from_slice(ARCHIVE_MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(index.len() as u32).to_le_bytes());
        out.extend_from_slice(&index);
        out.extend_from_slice(&blobs);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..4] != ARCHIVE_MAGIC {
            return Err(malformed(0, "bad magic, expected SVDI"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(malformed(4, format!("unsupported version {version}")));
        }
        let len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let index_bytes = bytes
            .get(12..12 + len)
            .ok_or_else(|| malformed(12, "index truncated"))?;
        let index: Index = serde_json::from_slice(index_bytes)
            .map_err(|e| malformed(12 + e.column() as u64, format!("index JSON: {e}")))?;
        let region = 12 + len;
        let mut entries = Vec::with_capacity(index.tensors.len());
        for e in index.tensors {
            let start = region + e.offset as usize;
            let blob = bytes.get(start..).ok_or_else(|| {
                malformed(start as u64, format!("offset of `{}` past end", e.name))
            })?;
            let (t, _) = decode_at(blob, start as u64)?;
            if t.shape() != e.shape.as_slice() {
                return Err(malformed(
                    start as u64,
                    format!(
                        "`{}` shape {:?} disagrees with index {:?}",
                        e.name,
                        t.shape(),
                        e.shape
                    ),
                ));
            }
            entries.push((e.name, t, e.trainable));
        }
        Ok(Self {
            meta: index.meta,
            entries,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

pub fn save_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    std::fs::write(path, encode(t))?;
    Ok(())
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    decode(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn layout_is_bit_exact() {
        let t = Tensor::new(vec![1, 2], vec![1.0, -2.5]).unwrap();
        let bytes = encode(&t);
        let mut expect = b"SVDT".to_vec();
        for w in [1u32, 2, 1, 2] {
            expect.extend_from_slice(&w.to_le_bytes());
        }
        expect.extend_from_slice(&1.0f32.to_le_bytes());
        expect.extend_from_slice(&(-2.5f32).to_le_bytes());
        assert_eq!(bytes, expect);
    }

    #[test]
    fn corrupted_magic_is_rejected() {
        let mut bytes = encode(&Tensor::scalar(3.0));
        bytes[0] = b'X';
        assert!(matches!(
            decode(&bytes),
            Err(Error::Malformed { offset: 0, .. })
        ));
    }

    #[test]
    fn truncated_payload_reports_offset() {
        let bytes = encode(&Tensor::zeros(&[4, 4]));
        let err = decode(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(matches!(err, Error::Malformed { .. }), "{err}");
    }

    #[test]
    fn stream_reader_frames_tensors() {
        let mut buf = encode(&Tensor::scalar(1.0));
        buf.extend(encode(&Tensor::zeros(&[2, 3])));
        let mut r = buf.as_slice();
        assert_eq!(read_tensor(&mut r, 0).unwrap().unwrap().item(), 1.0);
        assert_eq!(read_tensor(&mut r, 0).unwrap().unwrap().shape(), &[2, 3]);
        assert!(read_tensor(&mut r, 0).unwrap().is_none());
    }

    #[test]
    fn archive_round_trip_and_index() {
        let mut a = TensorArchive::new(serde_json::json!({"kind": "test"}));
        a.push("w", Tensor::from_vec(vec![1.0, 2.0]), true);
        a.push("b", Tensor::zeros(&[3, 1]), false);
        let back = TensorArchive::from_bytes(&a.to_bytes().unwrap()).unwrap();
        assert_eq!(back, a);
        let mut bad = a.to_bytes().unwrap();
        bad[1] = 0;
        assert!(TensorArchive::from_bytes(&bad).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            shape in proptest::collection::vec(1usize..5, 1..4),
            seed in any::<u32>(),
        ) {
            let n: usize = shape.iter().product();
            let data: Vec<f32> = (0..n).map(|i| f32::from_bits(seed.wrapping_mul(2654435761).wrapping_add(i as u32 * 7919) & 0x7f7f_ffff)).collect();
            let t = Tensor::new(shape, data).unwrap();
            let back = decode(&encode(&t)).unwrap();
            prop_assert_eq!(back, t);
        }
    }
}
