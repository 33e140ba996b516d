//! Versioned binary checkpoint container.
//!
//! Layout (little endian):
//!
//! ```text
//! magic   b"PLNKCKPT"
//! u32     format version
//! u8      role tag (0 = link, 1 = chat)
//! u32     dim
//! u32     vocabulary size
//! [u8;32] vocabulary digest (sha256 over newline-joined tokens)
//! u32     vocabulary byte length, then newline-joined tokens
//! f64[]   context embeddings, projection, bias, candidate embeddings, projection, bias
//! ```

use sha2::{Digest, Sha256};
use std::path::Path;
use std::sync::Arc;

use super::model::{BiEncoderParams, Role};
use super::vocab::Vocab;
use crate::error::{Error, Result};
use crate::util;

const MAGIC: &[u8; 8] = b"PLNKCKPT";
pub const FORMAT_VERSION: u32 = 1;

pub(crate) fn encode(p: &BiEncoderParams) -> Vec<u8> {
    let vocab_text = p.vocab.tokens().join("\n");
    let floats: usize = p.buffers().iter().map(|b| b.len()).sum();
    let mut out = Vec::with_capacity(64 + vocab_text.len() + floats * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(match p.role {
        Role::Link => 0,
        Role::Chat => 1,
    });
    out.extend_from_slice(&(p.dim as u32).to_le_bytes());
    out.extend_from_slice(&(p.vocab.len() as u32).to_le_bytes());
    out.extend_from_slice(&Sha256::digest(vocab_text.as_bytes()));
    out.extend_from_slice(&(vocab_text.len() as u32).to_le_bytes());
    out.extend_from_slice(vocab_text.as_bytes());
    for buf in p.buffers() {
        for x in buf {
            out.extend_from_slice(&x.to_le_bytes());
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
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint("truncated file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n * 8)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

pub fn decode(bytes: &[u8]) -> Result<BiEncoderParams> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let role = match r.take(1)?[0] {
        0 => Role::Link,
        1 => Role::Chat,
        t => return Err(Error::Checkpoint(format!("unknown role tag {t}"))),
    };
    let dim = r.u32()? as usize;
    let vocab_size = r.u32()? as usize;
    let digest = r.take(32)?.to_vec();
    let len = r.u32()? as usize;
    let vocab_bytes = r.take(len)?;
    if Sha256::digest(vocab_bytes).as_slice() != digest.as_slice() {
        return Err(Error::Checkpoint("vocabulary digest mismatch".into()));
    }
    let text = std::str::from_utf8(vocab_bytes).map_err(|_| Error::Checkpoint("vocabulary is not UTF-8".into()))?;
    let vocab = Vocab::from_tokens(text.split('\n').map(str::to_string).collect())?;
    if vocab.len() != vocab_size {
        return Err(Error::Checkpoint("vocabulary size mismatch".into()));
    }
    let mut p = BiEncoderParams::zeros(role, Arc::new(vocab), dim);
    for buf in p.buffers_mut() {
        let n = buf.len();
        *buf = r.f64s(n)?;
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after parameters".into()));
    }
    Ok(p)
}

pub fn save_checkpoint(params: &BiEncoderParams, path: &Path) -> Result<()> {
    util::atomic_write(path, &encode(params))
}

/// Loads a checkpoint and, when `expected` is given, rejects other role tags.
pub fn load_checkpoint(path: &Path, expected: Option<Role>) -> Result<BiEncoderParams> {
    let p = decode(&std::fs::read(path)?)?;
    if let Some(role) = expected {
        if p.role != role {
            return Err(Error::Checkpoint(format!("expected a {role} checkpoint, found {}", p.role)));
        }
    }
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::vocab::build_vocab;

    fn params(role: Role) -> BiEncoderParams {
        BiEncoderParams::init(role, Arc::new(build_vocab(["x y z"], 1)), 4, 3).unwrap()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let p = params(Role::Link);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&p, &path).unwrap();
        let q = load_checkpoint(&path, Some(Role::Link)).unwrap();
        assert_eq!(p, q);
        assert_eq!(p.digest(), q.digest());
    }

    #[test]
    fn rejects_truncation_and_wrong_role() {
        let p = params(Role::Chat);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&p, &path).unwrap();
        assert!(load_checkpoint(&path, Some(Role::Link)).is_err());
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(load_checkpoint(&path, None), Err(Error::Checkpoint(_))));
        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(decode(&bad).is_err());
    }
}
