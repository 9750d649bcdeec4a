//! `gpnf-v1` container: a magic tag, a list of named entries and a
//! SHA-256 trailer over everything before it.
//!
//! Entry kinds are little-endian `f32` arrays with their shape, `u64`
//! counters and UTF-8 text.

use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

const MAGIC: &[u8; 8] = b"gpnf-v1\n";
const DIGEST_LEN: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub enum Entry {
    Array { shape: Vec<usize>, data: Vec<f32> },
    Counter(u64),
    Text(String),
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("not a gpnf-v1 checkpoint")]
    BadMagic,
    #[error("checkpoint is truncated")]
    Truncated,
    #[error("checksum mismatch: checkpoint is corrupt")]
    Checksum,
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("checkpoint has no entry {0:?}")]
    Missing(String),
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    entries: Vec<(String, Entry)>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated)?;
        let s = self.buf.get(self.pos..end).ok_or(CheckpointError::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String, CheckpointError> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| CheckpointError::Malformed("entry text is not UTF-8".into()))
    }
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, entry: Entry) {
        let name = name.into();
        match self.entries.iter_mut().find(|(n, _)| *n == name) {
            Some(slot) => slot.1 = entry,
            None => self.entries.push((name, entry)),
        }
    }

    pub fn entries(&self) -> &[(String, Entry)] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, e)| e)
    }

    pub fn array(&self, name: &str) -> Result<(&[usize], &[f32]), CheckpointError> {
        match self.get(name) {
            Some(Entry::Array { shape, data }) => Ok((shape, data)),
            Some(_) => Err(CheckpointError::Malformed(format!("{name} is not an array"))),
            None => Err(CheckpointError::Missing(name.into())),
        }
    }

    pub fn counter(&self, name: &str) -> Result<u64, CheckpointError> {
        match self.get(name) {
            Some(Entry::Counter(v)) => Ok(*v),
            Some(_) => Err(CheckpointError::Malformed(format!("{name} is not a counter"))),
            None => Err(CheckpointError::Missing(name.into())),
        }
    }

    pub fn text(&self, name: &str) -> Result<&str, CheckpointError> {
        match self.get(name) {
            Some(Entry::Text(s)) => Ok(s),
            Some(_) => Err(CheckpointError::Malformed(format!("{name} is not text"))),
            None => Err(CheckpointError::Missing(name.into())),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = MAGIC.to_vec();
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, entry) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            match entry {
                Entry::Array { shape, data } => {
                    out.push(0);
                    out.push(shape.len() as u8);
                    for &d in shape {
                        out.extend_from_slice(&(d as u32).to_le_bytes());
                    }
                    for &v in data {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
                Entry::Counter(v) => {
                    out.push(1);
                    out.extend_from_slice(&v.to_le_bytes());
                }
                Entry::Text(s) => {
                    out.push(2);
                    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
                    out.extend_from_slice(s.as_bytes());
                }
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        if bytes.len() < MAGIC.len() + 4 + DIGEST_LEN {
            return Err(CheckpointError::Truncated);
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(CheckpointError::Checksum);
        }
        let mut r = Reader {
            buf: body,
            pos: MAGIC.len(),
        };
        let count = r.u32()?;
        let mut ck = Checkpoint::new();
        for _ in 0..count {
            let name = r.string()?;
            let entry = match r.u8()? {
                0 => {
                    let ndim = r.u8()? as usize;
                    let shape = (0..ndim)
                        .map(|_| r.u32().map(|d| d as usize))
                        .collect::<Result<Vec<_>, _>>()?;
                    let n: usize = shape.iter().product();
                    let raw = r.take(n.checked_mul(4).ok_or(CheckpointError::Truncated)?)?;
                    let data = raw
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect();
                    Entry::Array { shape, data }
                }
                1 => Entry::Counter(r.u64()?),
                2 => Entry::Text(r.string()?),
                k => return Err(CheckpointError::Malformed(format!("unknown entry kind {k}"))),
            };
            ck.entries.push((name, entry));
        }
        if r.pos != body.len() {
            return Err(CheckpointError::Malformed("trailing bytes".into()));
        }
        Ok(ck)
    }

    /// Writes through a temporary file so a crash never leaves a half
    /// written checkpoint behind.
    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let io = |e: std::io::Error| CheckpointError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        };
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()).map_err(io)?;
        std::fs::rename(&tmp, path).map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = std::fs::read(path).map_err(|e| CheckpointError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::new();
        c.insert(
            "enc.fc.w",
            Entry::Array {
                shape: vec![2, 3],
                data: vec![1.0, -2.5, 3.25, f32::MIN_POSITIVE, 0.0, -0.0],
            },
        );
        c.insert("iteration", Entry::Counter(7));
        c.insert("config", Entry::Text("seed = 3\n".into()));
        c
    }

    #[test]
    fn bytes_round_trip() {
        let c = sample();
        let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.counter("iteration").unwrap(), 7);
        assert_eq!(back.array("enc.fc.w").unwrap().0, &[2, 3]);
    }

    #[test]
    fn corruption_detected() {
        let mut b = sample().to_bytes();
        let mid = b.len() / 2;
        b[mid] ^= 0x40;
        assert!(matches!(Checkpoint::from_bytes(&b), Err(CheckpointError::Checksum)));
        assert!(matches!(
            Checkpoint::from_bytes(&b[..b.len() - 5]),
            Err(CheckpointError::Checksum | CheckpointError::Truncated)
        ));
        assert!(matches!(Checkpoint::from_bytes(b"nonsense"), Err(CheckpointError::BadMagic)));
    }

    #[test]
    fn missing_entries_named() {
        let c = sample();
        assert!(matches!(c.counter("frames"), Err(CheckpointError::Missing(n)) if n == "frames"));
        assert!(matches!(c.text("iteration"), Err(CheckpointError::Malformed(_))));
    }
}
