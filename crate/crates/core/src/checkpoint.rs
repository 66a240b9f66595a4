//! Little-endian checkpoint files.
//!
//! Layout: `b"MRFN"`, `u32` version, `u32` entry count, then per entry a `u32`
//! name length, the UTF-8 name, a `u8` rank, `rank` × `u64` dims and the `f32`
//! payload. Entries whose names start with [`EXTRA_PREFIX`] carry training
//! state (optimizer moments, step counters) rather than model parameters.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MRFN";
pub const VERSION: u32 = 1;
pub const EXTRA_PREFIX: &str = "__";

/// Named tensors split into model parameters and training extras.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub params: Vec<(String, Tensor<f32>)>,
    pub extras: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn extra(&self, name: &str) -> Option<&Tensor<f32>> {
        self.extras.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn encode(&self) -> Vec<u8> {
        let entries: Vec<&(String, Tensor<f32>)> = self.params.iter().chain(&self.extras).collect();
        let payload: usize = entries.iter().map(|(n, t)| 13 + n.len() + 8 * t.rank() + 4 * t.numel()).sum();
        let mut out = Vec::with_capacity(12 + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
        for (name, t) in entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.rank() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Parses `bytes`; `path` only labels errors.
    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return Err(Error::BadMagic { path: path.into() });
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::VersionMismatch {
                path: path.into(),
                found: version,
                expected: VERSION,
            });
        }
        let count = r.u32("entry count")?;
        let mut ck = Checkpoint::default();
        for _ in 0..count {
            let len = r.u32("name length")? as usize;
            let at = r.pos;
            let name = std::str::from_utf8(r.take(len, "name")?)
                .map_err(|_| r.corrupt(at, "name is not UTF-8"))?
                .to_owned();
            let rank = r.take(1, "rank")?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let d = r.u64("dim")?;
                shape.push(usize::try_from(d).map_err(|_| r.corrupt(r.pos - 8, "dim overflows"))?);
            }
            let at = r.pos;
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .and_then(|n| n.checked_mul(4).map(|b| (n, b)))
                .ok_or_else(|| r.corrupt(at, "tensor size overflows"))?;
            let raw = r.take(n.1, "payload")?;
            let data: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let t = Tensor::new(&shape, data).map_err(|e| r.corrupt(at, &e.to_string()))?;
            if name.starts_with(EXTRA_PREFIX) {
                ck.extras.push((name, t));
            } else {
                ck.params.push((name, t));
            }
        }
        if r.pos != bytes.len() {
            return Err(r.corrupt(r.pos, "trailing bytes"));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, path)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn corrupt(&self, offset: usize, msg: &str) -> Error {
        Error::CorruptCheckpoint {
            path: self.path.into(),
            offset: offset as u64,
            msg: msg.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.corrupt(self.pos, &format!("truncated while reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        Checkpoint {
            params: vec![
                ("a.weight".into(), Tensor::new(&[2, 1, 1, 1], vec![1.5, -2.0]).unwrap()),
                ("a.bias".into(), Tensor::new(&[2], vec![0.0, f32::MIN_POSITIVE]).unwrap()),
            ],
            extras: vec![("__train.step".into(), Tensor::scalar(7.0))],
        }
    }

    #[test]
    fn encode_decode_round_trip() {
        let ck = sample();
        let bytes = ck.encode();
        assert_eq!(&bytes[..4], b"MRFN");
        assert_eq!(Checkpoint::decode(&bytes, Path::new("x")).unwrap(), ck);
    }

    #[test]
    fn every_truncation_is_a_corrupt_error() {
        let bytes = sample().encode();
        for cut in 4..bytes.len() {
            match Checkpoint::decode(&bytes[..cut], Path::new("x")) {
                Err(Error::CorruptCheckpoint { offset, .. }) => assert!(offset as usize <= cut),
                other => panic!("cut at {cut}: {other:?}"),
            }
        }
    }

    #[test]
    fn header_errors_are_distinct() {
        let mut bytes = sample().encode();
        bytes[5] = 9;
        assert!(matches!(
            Checkpoint::decode(&bytes, Path::new("x")),
            Err(Error::VersionMismatch { found, .. }) if found == 9 * 256 + 1
        ));
        bytes[0] = b'X';
        assert!(matches!(Checkpoint::decode(&bytes, Path::new("x")), Err(Error::BadMagic { .. })));
        assert!(matches!(
            Checkpoint::decode(&bytes[..2], Path::new("x")),
            Err(Error::CorruptCheckpoint { .. })
        ));
    }
}
