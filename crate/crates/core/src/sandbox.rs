//! Directory grants and guest path resolution.
//!
//! Each granted host directory appears to the guest as a single top-level
//! name, its basename. The guest never learns the rest of the host path.
//! Resolution walks a guest path one component at a time below the granted
//! root and refuses anything that would climb out of it, whether by `..` or
//! through a symlink.

use std::fs;
use std::io;
use std::path::{Component, Path, PathBuf};

use thiserror::Error;

const MAX_SUFFIX: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rights {
    ReadOnly,
    ReadWrite,
}

impl Rights {
    pub fn writable(self) -> bool {
        self == Rights::ReadWrite
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Access {
    Read,
    Write,
}

#[derive(Debug, Error)]
pub enum SandboxError {
    #[error("{0}: not a directory")]
    NotADirectory(PathBuf),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{0}: directory has no usable name")]
    Unnamed(PathBuf),
    #[error("no free guest name for `{0}`")]
    DuplicateAfterSuffixing(String),
    #[error("`{0}` is outside every granted directory")]
    NotCapable(String),
    #[error("`{0}` is read-only")]
    RightsViolation(String),
}

/// One granted directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Preopen {
    /// Canonical host path.
    pub host_path: PathBuf,
    /// Single path component; the guest sees it as `/<guest_name>`.
    pub guest_name: String,
    pub rights: Rights,
}

impl Preopen {
    pub fn guest_path(&self) -> String {
        format!("/{}", self.guest_name)
    }
}

/// Parses a `-d` argument: `DIR` grants read-write, `DIR:ro` read-only.
pub fn parse_grant(arg: &str) -> (PathBuf, Rights) {
    match arg.strip_suffix(":ro") {
        Some(dir) => (PathBuf::from(dir), Rights::ReadOnly),
        None => (PathBuf::from(arg.strip_suffix(":rw").unwrap_or(arg)), Rights::ReadWrite),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Resolved {
    pub host_path: PathBuf,
    pub rights: Rights,
}

/// The instance's directory grants. Fixed once the instance starts.
#[derive(Debug, Clone, Default)]
pub struct PreopenTable {
    entries: Vec<Preopen>,
}

impl PreopenTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entries(&self) -> &[Preopen] {
        &self.entries
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Grants `host_path`. Its guest name is the directory's basename, with
    /// `.2`, `.3`, ... appended when that name is already taken.
    pub fn map_preopen(&mut self, host_path: &Path, rights: Rights) -> Result<&Preopen, SandboxError> {
        let canonical = fs::canonicalize(host_path).map_err(|source| SandboxError::Io {
            path: host_path.to_path_buf(),
            source,
        })?;
        if !canonical.is_dir() {
            return Err(SandboxError::NotADirectory(host_path.to_path_buf()));
        }
        let base = canonical
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| SandboxError::Unnamed(host_path.to_path_buf()))?
            .to_string();
        let taken = |name: &str| self.entries.iter().any(|p| p.guest_name == name);
        let guest_name = std::iter::once(base.clone())
            .chain((2..=MAX_SUFFIX).map(|i| format!("{base}.{i}")))
            .find(|n| !taken(n))
            .ok_or(SandboxError::DuplicateAfterSuffixing(base))?;
        self.entries.push(Preopen {
            host_path: canonical,
            guest_name,
            rights,
        });
        Ok(self.entries.last().unwrap())
    }

    /// Maps an absolute guest path to a host path inside exactly one grant.
    pub fn resolve_path(&self, guest_path: &str, access: Access) -> Result<Resolved, SandboxError> {
        let denied = || SandboxError::NotCapable(guest_path.to_string());
        if !guest_path.starts_with('/') {
            return Err(denied());
        }
        let mut parts = guest_path.split('/').filter(|c| !c.is_empty() && *c != ".");
        let head = parts.next().ok_or_else(denied)?;
        let preopen = self.entries.iter().find(|p| p.guest_name == head).ok_or_else(denied)?;
        let root = &preopen.host_path;

        // Components below the root, already free of `..` and symlinks.
        let mut below: Vec<std::ffi::OsString> = Vec::new();
        for part in parts {
            if part == ".." {
                below.pop().ok_or_else(denied)?;
                continue;
            }
            let candidate = below.iter().fold(root.clone(), |p, c| p.join(c)).join(part);
            let is_link = fs::symlink_metadata(&candidate)
                .map(|m| m.file_type().is_symlink())
                .unwrap_or(false);
            if !is_link {
                below.push(part.into());
                continue;
            }
            // Dangling links cannot be checked, so they are refused too.
            let target = fs::canonicalize(&candidate).map_err(|_| denied())?;
            let rest = target.strip_prefix(root).map_err(|_| denied())?;
            below = rest
                .components()
                .map(|c| match c {
                    Component::Normal(s) => Ok(s.to_os_string()),
                    _ => Err(denied()),
                })
                .collect::<Result<_, _>>()?;
        }
        let host_path = below.iter().fold(root.clone(), |p, c| p.join(c));
        if !host_path.starts_with(root) {
            return Err(denied());
        }
        if access == Access::Write && !preopen.rights.writable() {
            return Err(SandboxError::RightsViolation(guest_path.to_string()));
        }
        Ok(Resolved {
            host_path,
            rights: preopen.rights,
        })
    }
}
