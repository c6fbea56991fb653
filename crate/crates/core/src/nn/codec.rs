//! Binary weight stream.
//!
//! Layout (little-endian): `"FDMW"`, `u8` version, `u32` entry count, then per
//! entry `u16` path length, UTF-8 path, `u8` rank, `u32` per dim, raw `f32`
//! values; a trailing CRC32 covers every preceding byte.

use super::params::ParamTree;
use super::tensor::Tensor;
use super::NnError;

pub const WEIGHTS_MAGIC: &[u8; 4] = b"FDMW";
pub const WEIGHTS_VERSION: u8 = 1;

pub fn encode_weights(params: &ParamTree) -> Vec<u8> {
    let mut out = Vec::with_capacity(encoded_len(&params.signature()));
    out.extend_from_slice(WEIGHTS_MAGIC);
    out.push(WEIGHTS_VERSION);
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (path, t) in params.iter() {
        out.extend_from_slice(&(path.len() as u16).to_le_bytes());
        out.extend_from_slice(path.as_bytes());
        out.push(t.rank() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

/// Exact stream length for a tree with the given `(path, shape)` signature.
pub fn encoded_len(signature: &[(String, Vec<usize>)]) -> usize {
    let body: usize = signature
        .iter()
        .map(|(p, s)| 2 + p.len() + 1 + 4 * s.len() + 4 * s.iter().product::<usize>())
        .sum();
    4 + 1 + 4 + body + 4
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], NnError> {
        if self.pos + n > self.buf.len() {
            return Err(NnError::Codec {
                offset: self.pos,
                reason: format!("truncated stream while reading {what}"),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8, NnError> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16, NnError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32, NnError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn decode_weights(bytes: &[u8]) -> Result<ParamTree, NnError> {
    const MIN: usize = 4 + 1 + 4 + 4;
    if bytes.len() < MIN {
        return Err(NnError::Codec {
            offset: bytes.len(),
            reason: "stream shorter than header".into(),
        });
    }
    if &bytes[..4] != WEIGHTS_MAGIC {
        return Err(NnError::Codec {
            offset: 0,
            reason: "bad magic".into(),
        });
    }
    let body_end = bytes.len() - 4;
    let stored = u32::from_le_bytes(bytes[body_end..].try_into().unwrap());
    let computed = crc32fast::hash(&bytes[..body_end]);
    if stored != computed {
        return Err(NnError::Checksum {
            offset: body_end,
            stored,
            computed,
        });
    }
    let mut r = Reader {
        buf: &bytes[..body_end],
        pos: 4,
    };
    let version = r.u8("version")?;
    if version != WEIGHTS_VERSION {
        return Err(NnError::Codec {
            offset: 4,
            reason: format!("unsupported version {version}"),
        });
    }
    let count = r.u32("entry count")?;
    let mut params = ParamTree::new();
    for _ in 0..count {
        let at = r.pos;
        let plen = r.u16("path length")? as usize;
        let path = std::str::from_utf8(r.take(plen, "path")?)
            .map_err(|_| NnError::Codec {
                offset: at + 2,
                reason: "path is not UTF-8".into(),
            })?
            .to_string();
        let rank = r.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("dimension")? as usize);
        }
        let n: usize = shape.iter().product();
        if rank == 0 || n == 0 {
            return Err(NnError::Codec {
                offset: at,
                reason: format!("entry {path} has empty shape {shape:?}"),
            });
        }
        let raw = r.take(n * 4, "tensor payload")?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        params
            .insert(path, Tensor::new(&shape, data)?)
            .map_err(|e| NnError::Codec {
                offset: at,
                reason: e.to_string(),
            })?;
    }
    if r.pos != body_end {
        return Err(NnError::Codec {
            offset: r.pos,
            reason: "trailing bytes after last entry".into(),
        });
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample_tree() -> ParamTree {
        let mut p = ParamTree::new();
        p.insert(
            "enc.conv.weight",
            Tensor::new(&[2, 1, 3, 3], (0..18).map(|i| i as f32 * 0.5).collect()).unwrap(),
        )
        .unwrap();
        p.insert(
            "enc.conv.bias",
            Tensor::new(&[2], vec![-0.0, f32::MIN_POSITIVE]).unwrap(),
        )
        .unwrap();
        p
    }

    #[test]
    fn empty_tree_is_header_only() {
        let bytes = encode_weights(&ParamTree::new());
        assert_eq!(bytes.len(), 13);
        assert_eq!(&bytes[..4], b"FDMW");
        assert_eq!(bytes[4], 1);
        assert_eq!(decode_weights(&bytes).unwrap(), ParamTree::new());
    }

    #[test]
    fn layout_is_bit_exact() {
        let mut p = ParamTree::new();
        p.insert("ab", Tensor::new(&[1], vec![1.0]).unwrap())
            .unwrap();
        let bytes = encode_weights(&p);
        let mut want = b"FDMW\x01\x01\x00\x00\x00\x02\x00ab\x01\x01\x00\x00\x00".to_vec();
        want.extend_from_slice(&1.0f32.to_le_bytes());
        let crc = crc32fast::hash(&want);
        want.extend_from_slice(&crc.to_le_bytes());
        assert_eq!(bytes, want);
        assert_eq!(bytes.len(), encoded_len(&p.signature()));
    }

    #[test]
    fn flipped_payload_byte_fails_checksum() {
        let mut bytes = encode_weights(&sample_tree());
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        assert!(matches!(
            decode_weights(&bytes),
            Err(NnError::Checksum { .. })
        ));
    }

    #[test]
    fn truncation_is_reported() {
        let bytes = encode_weights(&sample_tree());
        assert!(decode_weights(&bytes[..bytes.len() - 7]).is_err());
        assert!(matches!(
            decode_weights(&bytes[..6]),
            Err(NnError::Codec { offset: 6, .. })
        ));
    }

    #[test]
    fn bad_framing_with_valid_crc_reports_offset() {
        // entry count claims two entries but only one is present
        let mut bytes = encode_weights(&sample_tree());
        bytes.truncate(bytes.len() - 4);
        bytes[5] = 3;
        let crc = crc32fast::hash(&bytes);
        bytes.extend_from_slice(&crc.to_le_bytes());
        match decode_weights(&bytes) {
            Err(NnError::Codec { offset, .. }) => assert_eq!(offset, bytes.len() - 4),
            other => panic!("unexpected {other:?}"),
        }
    }

    proptest! {
        #[test]
        fn roundtrip_is_bit_identical(
            entries in proptest::collection::btree_map(
                "[a-z]{1,6}(\\.[a-z0-9]{1,6}){0,3}",
                (proptest::collection::vec(1usize..4, 1..4), any::<u32>()),
                0..6,
            )
        ) {
            let mut p = ParamTree::new();
            for (path, (shape, seed)) in entries {
                let n: usize = shape.iter().product();
                let data = (0..n).map(|i| f32::from_bits(seed.wrapping_mul(2654435761).wrapping_add(i as u32 * 97) & 0x7f7f_ffff)).collect();
                p.insert(path, Tensor::new(&shape, data).unwrap()).unwrap();
            }
            let bytes = encode_weights(&p);
            prop_assert_eq!(bytes.len(), encoded_len(&p.signature()));
            let back = decode_weights(&bytes).unwrap();
            prop_assert_eq!(back.signature(), p.signature());
            for ((_, a), (_, b)) in back.iter().zip(p.iter()) {
                let ab: Vec<u32> = a.data().iter().map(|v| v.to_bits()).collect();
                let bb: Vec<u32> = b.data().iter().map(|v| v.to_bits()).collect();
                prop_assert_eq!(ab, bb);
            }
        }
    }
}
