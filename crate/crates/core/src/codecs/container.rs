//! QBF1 container.
//!
//! ```text
//! header (24 bytes)
//!   magic          51 42 46 31 ("QBF1")
//!   version        u32 = 1
//!   tensor_count   u32
//!   meta_crc       u32  crc32 of every other header and record-header byte
//!   payload_total  u64  sum of all payload lengths
//! per tensor
//!   name_len u32, name (UTF-8)
//!   role     u8   bits 0..3 role code, bit 7 high-precision path
//!   scheme   u8
//!   rows u32, cols u32, pad_count u32
//!   payload_len u64, payload
//!   crc32 u32 of payload
//! ```
//!
//! Integers are little-endian.

use std::fs;
use std::path::Path;

use super::{QuantScheme, QuantizedTensor};
use crate::error::{Error, Result};
use crate::tensor::{Role, TensorShape};

pub const MAGIC: [u8; 4] = *b"QBF1";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 24;
const HIGH_PRECISION_BIT: u8 = 0x80;
const META_CRC_AT: usize = 12;
/// Name reported by a metadata checksum failure.
const METADATA: &str = "<metadata>";

/// Bounds-checked little-endian cursor over untrusted bytes.
pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub(crate) fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(Error::Truncated {
                offset: self.pos,
                needed: n - self.remaining(),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn magic(&mut self, expected: [u8; 4]) -> Result<()> {
        let found: [u8; 4] = self.take(4)?.try_into().unwrap();
        if found != expected {
            return Err(Error::BadMagic { found, expected });
        }
        Ok(())
    }

    pub(crate) fn name(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| Error::CorruptData("tensor name is not UTF-8".into()))
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.remaining() != 0 {
            return Err(Error::CorruptData(format!(
                "{} trailing bytes after last record",
                self.remaining()
            )));
        }
        Ok(())
    }
}

pub(crate) fn put_name(out: &mut Vec<u8>, name: &str) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
}

pub fn encode_container(tensors: &[QuantizedTensor]) -> Result<Vec<u8>> {
    let total: u64 = tensors.iter().map(|t| t.blocks.len() as u64).sum();
    let mut out = Vec::with_capacity(HEADER_LEN + total as usize + 64 * tensors.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    out.extend_from_slice(&0u32.to_le_bytes());
    out.extend_from_slice(&total.to_le_bytes());
    let mut meta = crc32fast::Hasher::new();
    meta.update(&out[..META_CRC_AT]);
    meta.update(&out[META_CRC_AT + 4..]);
    for t in tensors {
        t.validate()?;
        let dims = [t.shape.rows, t.shape.cols, t.pad_count];
        if dims.iter().any(|&d| d > u32::MAX as usize) {
            return Err(Error::Parameter(format!(
                "{}: dimension exceeds u32",
                t.name
            )));
        }
        let start = out.len();
        put_name(&mut out, &t.name);
        let flag = if t.high_precision {
            HIGH_PRECISION_BIT
        } else {
            0
        };
        out.push(t.role.code() | flag);
        out.push(t.scheme.code());
        for d in dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.extend_from_slice(&(t.blocks.len() as u64).to_le_bytes());
        meta.update(&out[start..]);
        out.extend_from_slice(&t.blocks);
        out.extend_from_slice(&crc32fast::hash(&t.blocks).to_le_bytes());
    }
    let crc = meta.finalize();
    out[META_CRC_AT..META_CRC_AT + 4].copy_from_slice(&crc.to_le_bytes());
    Ok(out)
}

pub fn decode_container(bytes: &[u8]) -> Result<Vec<QuantizedTensor>> {
    let mut r = Reader::new(bytes);
    r.magic(MAGIC)?;
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::VersionMismatch(version));
    }
    let count = r.u32()?;
    let stored_meta = r.u32()?;
    let total = r.u64()?;
    let mut meta = crc32fast::Hasher::new();
    meta.update(&bytes[..META_CRC_AT]);
    meta.update(&bytes[META_CRC_AT + 4..HEADER_LEN]);
    let mut tensors = Vec::new();
    let mut seen_total = 0u64;
    for _ in 0..count {
        let start = r.pos;
        let name = r.name()?;
        let role_byte = r.u8()?;
        let role = Role::from_code(role_byte & !HIGH_PRECISION_BIT)
            .ok_or_else(|| Error::CorruptData(format!("{name}: unknown role {role_byte}")))?;
        let scheme_byte = r.u8()?;
        let scheme = QuantScheme::from_code(scheme_byte)
            .ok_or_else(|| Error::CorruptData(format!("{name}: unknown scheme {scheme_byte}")))?;
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let pad_count = r.u32()? as usize;
        let shape = TensorShape::new(rows, cols)
            .map_err(|_| Error::CorruptData(format!("{name}: zero dimension {rows}x{cols}")))?;
        let len = r.u64()?;
        meta.update(&bytes[start..r.pos]);
        if len > r.remaining() as u64 {
            return Err(Error::Truncated {
                offset: r.pos,
                needed: (len - r.remaining() as u64).min(usize::MAX as u64) as usize,
            });
        }
        let payload = r.take(len as usize)?;
        let stored = r.u32()?;
        let computed = crc32fast::hash(payload);
        if stored != computed {
            return Err(Error::Checksum {
                name,
                stored,
                computed,
            });
        }
        seen_total += len;
        let t = QuantizedTensor {
            name,
            shape,
            scheme,
            role,
            high_precision: role_byte & HIGH_PRECISION_BIT != 0,
            blocks: payload.to_vec(),
            pad_count,
        };
        if t.high_precision && !scheme.splits(role) {
            return Err(Error::CorruptData(format!(
                "{}: high-precision flag on unsplit role",
                t.name
            )));
        }
        t.validate()?;
        tensors.push(t);
    }
    r.finish()?;
    let computed = meta.finalize();
    if computed != stored_meta {
        return Err(Error::Checksum {
            name: METADATA.into(),
            stored: stored_meta,
            computed,
        });
    }
    if seen_total != total {
        return Err(Error::CorruptData(format!(
            "header payload total {total} != {seen_total}"
        )));
    }
    Ok(tensors)
}

pub fn write_container(tensors: &[QuantizedTensor], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_container(tensors)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_container(path: impl AsRef<Path>) -> Result<Vec<QuantizedTensor>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_container(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codecs::quantize_tensor_with;
    use crate::tensor::make_random_tensor;

    fn sample() -> QuantizedTensor {
        let t = make_random_tensor(TensorShape::new(4, 40).unwrap(), Role::Other, 2).unwrap();
        quantize_tensor_with("blk.0".into(), &t, QuantScheme::Q4_0, false, None).unwrap()
    }

    #[test]
    fn empty_is_header_only() {
        let bytes = encode_container(&[]).unwrap();
        assert_eq!(bytes.len(), HEADER_LEN);
        assert!(decode_container(&bytes).unwrap().is_empty());
    }

    #[test]
    fn single_tensor_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.qbf");
        let t = sample();
        write_container(std::slice::from_ref(&t), &path).unwrap();
        let back = read_container(&path).unwrap();
        assert_eq!(back, vec![t.clone()]);
        assert_eq!(encode_container(&back).unwrap(), fs::read(&path).unwrap());
    }

    #[test]
    fn flipped_magic() {
        let mut bytes = encode_container(&[sample()]).unwrap();
        bytes[0] ^= 0xff;
        assert!(matches!(
            decode_container(&bytes),
            Err(Error::BadMagic { .. })
        ));
    }

    #[test]
    fn version_checked() {
        let mut bytes = encode_container(&[]).unwrap();
        bytes[4] = 2;
        assert!(matches!(
            decode_container(&bytes),
            Err(Error::VersionMismatch(2))
        ));
    }

    #[test]
    fn truncation_detected() {
        let bytes = encode_container(&[sample()]).unwrap();
        for cut in [3, 20, 30, bytes.len() - 1] {
            assert!(
                matches!(
                    decode_container(&bytes[..cut]),
                    Err(Error::Truncated { .. })
                ),
                "cut at {cut}"
            );
        }
    }

    #[test]
    fn payload_corruption_fails_checksum() {
        let mut bytes = encode_container(&[sample()]).unwrap();
        let n = bytes.len();
        bytes[n - 10] ^= 1;
        assert!(matches!(
            decode_container(&bytes),
            Err(Error::Checksum { .. })
        ));
    }

    #[test]
    fn name_corruption_fails_metadata_checksum() {
        let mut bytes = encode_container(&[sample()]).unwrap();
        bytes[HEADER_LEN + 4] = b'X';
        assert!(matches!(
            decode_container(&bytes),
            Err(Error::Checksum { name, .. }) if name == METADATA
        ));
    }

    #[test]
    fn missing_file_is_io() {
        assert!(matches!(
            read_container("/nonexistent/x.qbf"),
            Err(Error::Io { .. })
        ));
    }
}
