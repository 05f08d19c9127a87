//! Binary checkpoint container shared by the backbone and the baseline.
//!
//! ```text
//! magic "FVQACKPT" | version u32 | kind u8
//! n_dims u32 | dims u32 * n_dims
//! vocab_hash [32] | payload_sha256 [32]
//! payload_len u64 | payload f64 * payload_len           <- frozen section ends
//! "VSTR" | present u8 | [len u32 | values f64 * len | values_sha256 [32]]
//! ```
//!
//! All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"FVQACKPT";
pub const VERSION: u32 = 1;
const PSEUDO_TAG: &[u8; 4] = b"VSTR";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Backbone = 1,
    Baseline = 2,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: Kind,
    pub dims: Vec<u32>,
    pub vocab_hash: [u8; 32],
    pub payload: Vec<f64>,
    pub pseudo: Option<Vec<f64>>,
}

fn f64_bytes(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn sha(bytes: &[u8]) -> [u8; 32] {
    Sha256::digest(bytes).into()
}

impl Checkpoint {
    /// SHA-256 of the parameter payload, hex encoded.
    pub fn payload_checksum(&self) -> String {
        hex::encode(sha(&f64_bytes(&self.payload)))
    }

    pub fn pseudo_checksum(&self) -> Option<String> {
        self.pseudo.as_ref().map(|p| hex::encode(sha(&f64_bytes(p))))
    }

    pub fn encode(&self) -> Vec<u8> {
        let payload = f64_bytes(&self.payload);
        let mut out = Vec::with_capacity(payload.len() + 256);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.kind as u8);
        out.extend_from_slice(&(self.dims.len() as u32).to_le_bytes());
        for d in &self.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        out.extend_from_slice(&self.vocab_hash);
        out.extend_from_slice(&sha(&payload));
        out.extend_from_slice(&(self.payload.len() as u64).to_le_bytes());
        out.extend_from_slice(&payload);
        out.extend_from_slice(PSEUDO_TAG);
        match &self.pseudo {
            None => out.push(0),
            Some(p) => {
                out.push(1);
                out.extend_from_slice(&(p.len() as u32).to_le_bytes());
                let bytes = f64_bytes(p);
                out.extend_from_slice(&bytes);
                out.extend_from_slice(&sha(&bytes));
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> std::result::Result<(Self, usize), String> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err("bad magic".into());
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(format!("unsupported version {version}"));
        }
        let kind = match r.take(1)?[0] {
            1 => Kind::Backbone,
            2 => Kind::Baseline,
            k => return Err(format!("unknown kind {k}")),
        };
        let n = r.u32()? as usize;
        let dims = (0..n).map(|_| r.u32()).collect::<std::result::Result<Vec<_>, _>>()?;
        let vocab_hash: [u8; 32] = r.take(32)?.try_into().unwrap();
        let checksum: [u8; 32] = r.take(32)?.try_into().unwrap();
        let len = r.u64()? as usize;
        let raw = r.take(len.checked_mul(8).ok_or("payload length overflow")?)?;
        if sha(raw) != checksum {
            return Err("parameter checksum mismatch".into());
        }
        let payload = read_f64s(raw);
        let frozen_end = r.pos;
        if r.take(4)? != PSEUDO_TAG {
            return Err("missing pseudo-embedding record".into());
        }
        let pseudo = match r.take(1)?[0] {
            0 => None,
            1 => {
                let n = r.u32()? as usize;
                let raw = r.take(n * 8)?;
                let sum: [u8; 32] = r.take(32)?.try_into().unwrap();
                if sha(raw) != sum {
                    return Err("pseudo-embedding checksum mismatch".into());
                }
                Some(read_f64s(raw))
            }
            f => return Err(format!("bad pseudo flag {f}")),
        };
        if r.pos != bytes.len() {
            return Err("trailing bytes".into());
        }
        Ok((
            Self {
                kind,
                dims,
                vocab_hash,
                payload,
                pseudo,
            },
            frozen_end,
        ))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes).map(|(c, _)| c).map_err(|reason| Error::Corrupt {
            path: path.to_path_buf(),
            reason,
        })
    }
}

/// The header and parameter payload of an encoded checkpoint, excluding the
/// pseudo-embedding record.
pub fn frozen_section(bytes: &[u8]) -> std::result::Result<&[u8], String> {
    let (_, end) = Checkpoint::decode(bytes)?;
    Ok(&bytes[..end])
}

fn read_f64s(raw: &[u8]) -> Vec<f64> {
    raw.chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect()
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len()).ok_or("truncated checkpoint")?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample(pseudo: Option<Vec<f64>>) -> Checkpoint {
        Checkpoint {
            kind: Kind::Backbone,
            dims: vec![32, 2, 2],
            vocab_hash: [7; 32],
            payload: vec![1.0, -2.5, 3.25],
            pseudo,
        }
    }

    proptest! {
        #[test]
        fn encode_decode_identity(payload in proptest::collection::vec(-1e6f64..1e6, 0..40),
                                  pseudo in proptest::option::of(proptest::collection::vec(-1.0f64..1.0, 1..8))) {
            let c = Checkpoint { payload, pseudo, ..sample(None) };
            let (d, _) = Checkpoint::decode(&c.encode()).unwrap();
            prop_assert_eq!(d, c);
        }
    }

    #[test]
    fn frozen_section_ignores_pseudo_record() {
        let a = sample(Some(vec![0.1, 0.2])).encode();
        let b = sample(Some(vec![0.3, 0.4])).encode();
        let c = sample(None).encode();
        assert_ne!(a, b);
        assert_eq!(frozen_section(&a).unwrap(), frozen_section(&b).unwrap());
        assert_eq!(frozen_section(&a).unwrap(), frozen_section(&c).unwrap());
    }

    #[test]
    fn corruption_is_detected() {
        let mut bytes = sample(Some(vec![0.5])).encode();
        let i = bytes.len() - 40;
        bytes[i] ^= 1;
        assert!(Checkpoint::decode(&bytes).unwrap_err().contains("checksum"));
        let mut bytes = sample(None).encode();
        bytes[100] ^= 0xff;
        assert!(Checkpoint::decode(&bytes).is_err());
        assert!(Checkpoint::decode(&sample(None).encode()[..50]).is_err());
        assert!(Checkpoint::decode(b"NOTACKPT").is_err());
    }
}
