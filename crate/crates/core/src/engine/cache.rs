//! On-disk store of compiled modules.
//!
//! One file per module: `<dir>/<hash-hex>.art`. The file starts with a
//! header carrying the digest and length of the payload so a torn or
//! tampered file is detected before the engine ever sees it.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

const MAGIC: &[u8; 8] = b"MPIWART\x01";
const HEADER_LEN: usize = MAGIC.len() + 32 + 8;

/// 256-bit content digest of a module and the engine that compiled it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ModuleHash(pub [u8; 32]);

impl ModuleHash {
    pub fn to_hex(&self) -> String {
        self.0.iter().map(|b| format!("{b:02x}")).collect()
    }
}

impl std::fmt::Display for ModuleHash {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.to_hex())
    }
}

/// Digest of `bytes ∥ fingerprint`. The module length is hashed first so
/// no (bytes, fingerprint) split can collide with another.
pub fn compute_module_hash(bytes: &[u8], fingerprint: &str) -> ModuleHash {
    let mut h = blake3::Hasher::new();
    h.update(&(bytes.len() as u64).to_le_bytes());
    h.update(bytes);
    h.update(fingerprint.as_bytes());
    ModuleHash(*h.finalize().as_bytes())
}

#[derive(Debug, Error)]
pub enum CacheError {
    #[error("cached artifact {0} failed its integrity check")]
    Corrupt(PathBuf),
    #[error("cache I/O on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

pub fn artifact_path(dir: &Path, hash: &ModuleHash) -> PathBuf {
    dir.join(format!("{}.art", hash.to_hex()))
}

fn encode(payload: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(blake3::hash(payload).as_bytes());
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(payload);
    out
}

fn decode(file: &[u8]) -> Option<&[u8]> {
    if file.len() < HEADER_LEN || &file[..8] != MAGIC {
        return None;
    }
    let digest = &file[8..40];
    let len = u64::from_le_bytes(file[40..48].try_into().unwrap());
    let payload = &file[HEADER_LEN..];
    (payload.len() as u64 == len && blake3::hash(payload).as_bytes() == digest).then_some(payload)
}

/// `Ok(None)` when nothing is cached for `hash`.
pub fn read_artifact(dir: &Path, hash: &ModuleHash) -> Result<Option<Vec<u8>>, CacheError> {
    let path = artifact_path(dir, hash);
    let file = match fs::read(&path) {
        Ok(f) => f,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(None),
        Err(source) => return Err(CacheError::Io { path, source }),
    };
    match decode(&file) {
        Some(payload) => Ok(Some(payload.to_vec())),
        None => Err(CacheError::Corrupt(path)),
    }
}

/// Writes through a temporary file in the same directory and renames it
/// into place, so concurrent readers see either nothing or a whole file.
/// Racing writers each produce a complete file; the last rename wins.
pub fn write_artifact(dir: &Path, hash: &ModuleHash, payload: &[u8]) -> Result<PathBuf, CacheError> {
    let path = artifact_path(dir, hash);
    let io_err = |source| CacheError::Io {
        path: path.clone(),
        source,
    };
    fs::create_dir_all(dir).map_err(io_err)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err)?;
    tmp.write_all(&encode(payload)).map_err(io_err)?;
    tmp.as_file().sync_all().map_err(io_err)?;
    tmp.persist(&path).map_err(|e| io_err(e.error))?;
    Ok(path)
}
