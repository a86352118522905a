//! Self-describing binary container for model artifacts.
//!
//! ```text
//! offset  size  field
//! 0       8     magic  b"LTRBENCH"
//! 8       4     format version (u32 LE)
//! 12      4     payload kind (u32 LE)
//! 16      8     payload length in bytes (u64 LE)
//! 24      32    SHA-256 of the payload
//! 56      ..    payload: UTF-8 JSON
//! ```
//!
//! JSON floats are written in shortest round-trip form and parsed exactly,
//! so 64-bit parameters survive a round trip bit for bit.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MAGIC: [u8; 8] = *b"LTRBENCH";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 56;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u32)]
pub enum Kind {
    Model = 1,
    EmbeddingStore = 2,
}

impl Kind {
    fn from_u32(v: u32) -> Result<Self> {
        match v {
            1 => Ok(Kind::Model),
            2 => Ok(Kind::EmbeddingStore),
            other => Err(Error::Artifact(format!("unknown payload kind {other}"))),
        }
    }
}

pub fn encode<T: Serialize>(kind: Kind, value: &T) -> Result<Vec<u8>> {
    let payload = serde_json::to_vec(value)?;
    let digest = Sha256::digest(&payload);
    let mut out = Vec::with_capacity(HEADER_LEN + payload.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(kind as u32).to_le_bytes());
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&digest);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn decode<T: DeserializeOwned>(bytes: &[u8], expected: Kind) -> Result<T> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Artifact(format!("truncated header ({} bytes)", bytes.len())));
    }
    if bytes[..8] != MAGIC {
        return Err(Error::Artifact("bad magic; not a model artifact".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Artifact(format!(
            "unsupported format version {version} (this build reads {FORMAT_VERSION})"
        )));
    }
    let kind = Kind::from_u32(u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")))?;
    if kind != expected {
        return Err(Error::Artifact(format!("expected a {expected:?} artifact, found {kind:?}")));
    }
    let len = u64::from_le_bytes(bytes[16..24].try_into().expect("8 bytes")) as usize;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != len {
        return Err(Error::Artifact(format!(
            "payload length {} does not match header {len}",
            payload.len()
        )));
    }
    if Sha256::digest(payload).as_slice() != &bytes[24..56] {
        return Err(Error::Artifact("checksum mismatch; artifact is corrupted".into()));
    }
    Ok(serde_json::from_slice(payload)?)
}

pub fn write_file<T: Serialize>(path: &Path, kind: Kind, value: &T) -> Result<()> {
    let bytes = encode(kind, value)?;
    crate::io_util::write_atomic(path, &bytes)
}

pub fn read_file<T: DeserializeOwned>(path: &Path, kind: Kind) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, kind)
}

/// Hex SHA-256 of arbitrary bytes, used for manifests.
pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
