//! Workspace trees: manifests, digests, sandboxed path resolution and the
//! content-addressed object store.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::os::unix::fs::{MetadataExt, PermissionsExt};
use std::path::{Component, Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Directory under the root that holds journals, objects and event logs.
pub const STATE_DIR: &str = ".peros";

#[derive(Debug, Error)]
pub enum SandboxError {
    #[error("path `{0}` escapes the workspace root")]
    Escape(String),
    #[error("io error on `{path}`: {source}")]
    Io { path: String, source: io::Error },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Entry {
    File { mode: u32, sha: String, size: u64 },
    Dir { mode: u32 },
    Link { target: String },
}

impl Entry {
    pub fn sha(&self) -> Option<&str> {
        match self {
            Entry::File { sha, .. } => Some(sha),
            _ => None,
        }
    }

    pub fn size(&self) -> u64 {
        match self {
            Entry::File { size, .. } => *size,
            _ => 0,
        }
    }
}

/// Relative path (forward slashes) to entry, for everything under a root.
pub type Manifest = BTreeMap<String, Entry>;

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn hash_file(path: &Path) -> io::Result<String> {
    let mut file = fs::File::open(path)?;
    let mut hasher = Sha256::new();
    io::copy(&mut file, &mut hasher)?;
    Ok(hex::encode(hasher.finalize()))
}

/// Lists every path under `root` in sorted order, pruning directories for
/// which `skip` returns true. Symlinks are reported, never followed.
pub fn walk(root: &Path, skip: &dyn Fn(&str) -> bool) -> io::Result<Vec<(String, fs::Metadata)>> {
    let mut out = Vec::new();
    let mut stack = vec![String::new()];
    while let Some(rel) = stack.pop() {
        let dir = if rel.is_empty() { root.to_path_buf() } else { root.join(&rel) };
        let mut names: Vec<String> = Vec::new();
        for item in fs::read_dir(&dir)? {
            names.push(item?.file_name().to_string_lossy().into_owned());
        }
        names.sort();
        for name in names.into_iter().rev() {
            let child = if rel.is_empty() { name } else { format!("{rel}/{name}") };
            if skip(&child) {
                continue;
            }
            let meta = fs::symlink_metadata(root.join(&child))?;
            if meta.is_dir() {
                stack.push(child.clone());
            }
            out.push((child, meta));
        }
    }
    out.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(out)
}

pub fn skip_state_dir(rel: &str) -> bool {
    rel == STATE_DIR
}

/// Scans the whole tree except the state directory.
pub fn scan(root: &Path) -> io::Result<Manifest> {
    scan_filtered(root, &skip_state_dir)
}

pub fn scan_filtered(root: &Path, skip: &dyn Fn(&str) -> bool) -> io::Result<Manifest> {
    let mut manifest = Manifest::new();
    for (rel, meta) in walk(root, skip)? {
        let mode = meta.permissions().mode() & 0o7777;
        let entry = if meta.file_type().is_symlink() {
            Entry::Link { target: fs::read_link(root.join(&rel))?.to_string_lossy().into_owned() }
        } else if meta.is_dir() {
            Entry::Dir { mode }
        } else {
            Entry::File { mode, sha: hash_file(&root.join(&rel))?, size: meta.size() }
        };
        manifest.insert(rel, entry);
    }
    Ok(manifest)
}

/// Content-addressed digest over paths, bytes and mode bits.
pub fn digest(manifest: &Manifest) -> String {
    let mut hasher = Sha256::new();
    for (path, entry) in manifest {
        let line = match entry {
            Entry::File { mode, sha, .. } => format!("F {path} {mode:o} {sha}\n"),
            Entry::Dir { mode } => format!("D {path} {mode:o}\n"),
            Entry::Link { target } => format!("L {path} {target}\n"),
        };
        hasher.update(line.as_bytes());
    }
    hex::encode(hasher.finalize())
}

pub fn snapshot(root: &Path) -> io::Result<String> {
    Ok(digest(&scan(root)?))
}

/// Lexically normalizes `rel` against `base` (both inside `root`). Leading
/// slashes are read as workspace-absolute.
pub fn join_inside(base: &str, rel: &str) -> Result<String, SandboxError> {
    let mut parts: Vec<String> = Vec::new();
    let combined = if rel.starts_with('/') { rel.to_string() } else { format!("{base}/{rel}") };
    for comp in Path::new(&combined).components() {
        match comp {
            Component::Normal(p) => parts.push(p.to_string_lossy().into_owned()),
            Component::ParentDir => {
                if parts.pop().is_none() {
                    return Err(SandboxError::Escape(rel.to_string()));
                }
            }
            Component::CurDir | Component::RootDir => {}
            Component::Prefix(_) => return Err(SandboxError::Escape(rel.to_string())),
        }
    }
    Ok(parts.join("/"))
}

/// Resolves a workspace-relative path to an absolute one, following symlinks
/// on the longest existing prefix. Fails if the result leaves `root`.
pub fn resolve(root: &Path, rel: &str) -> Result<PathBuf, SandboxError> {
    let canon_root =
        fs::canonicalize(root).map_err(|source| SandboxError::Io { path: root.display().to_string(), source })?;
    let full = canon_root.join(rel);
    // a dangling final symlink would be created through, so check its target too
    if let Ok(meta) = fs::symlink_metadata(&full) {
        if meta.file_type().is_symlink() {
            let target = fs::read_link(&full).map_err(|source| SandboxError::Io { path: rel.to_string(), source })?;
            let target = if target.is_absolute() { target } else { full.parent().unwrap_or(&canon_root).join(target) };
            let lexical = normalize_abs(&target);
            if !lexical.starts_with(&canon_root) {
                return Err(SandboxError::Escape(rel.to_string()));
            }
        }
    }
    let mut existing = full.clone();
    let mut tail = Vec::new();
    while fs::symlink_metadata(&existing).is_err() {
        match (existing.parent(), existing.file_name()) {
            (Some(parent), Some(name)) => {
                tail.push(name.to_os_string());
                existing = parent.to_path_buf();
            }
            _ => return Err(SandboxError::Escape(rel.to_string())),
        }
    }
    let mut resolved =
        fs::canonicalize(&existing).map_err(|source| SandboxError::Io { path: rel.to_string(), source })?;
    for name in tail.into_iter().rev() {
        resolved.push(name);
    }
    if !resolved.starts_with(&canon_root) {
        return Err(SandboxError::Escape(rel.to_string()));
    }
    Ok(resolved)
}

fn normalize_abs(path: &Path) -> PathBuf {
    let mut out = PathBuf::new();
    for comp in path.components() {
        match comp {
            Component::ParentDir => {
                out.pop();
            }
            Component::CurDir => {}
            other => out.push(other.as_os_str()),
        }
    }
    out
}

/// Objects stored by sha256 under `<root>/.peros/objects/`.
#[derive(Debug, Clone)]
pub struct ObjectStore {
    dir: PathBuf,
}

impl ObjectStore {
    pub fn for_root(root: &Path) -> Self {
        ObjectStore { dir: root.join(STATE_DIR).join("objects") }
    }

    pub fn path(&self, sha: &str) -> PathBuf {
        self.dir.join(sha)
    }

    pub fn contains(&self, sha: &str) -> bool {
        self.path(sha).exists()
    }

    /// Copies `src` in unless an object with `sha` is already present.
    pub fn put_file(&self, src: &Path, sha: &str) -> io::Result<()> {
        if self.contains(sha) {
            return Ok(());
        }
        fs::create_dir_all(&self.dir)?;
        let tmp = self.dir.join(format!(".{sha}.tmp"));
        fs::copy(src, &tmp)?;
        fs::rename(tmp, self.path(sha))
    }

    pub fn read(&self, sha: &str) -> io::Result<Vec<u8>> {
        fs::read(self.path(sha))
    }
}

/// Copies a tree (files, dirs, symlinks, modes), skipping the state directory.
pub fn copy_tree(src: &Path, dst: &Path) -> io::Result<()> {
    fs::create_dir_all(dst)?;
    for (rel, meta) in walk(src, &skip_state_dir)? {
        let to = dst.join(&rel);
        if meta.file_type().is_symlink() {
            std::os::unix::fs::symlink(fs::read_link(src.join(&rel))?, &to)?;
        } else if meta.is_dir() {
            fs::create_dir_all(&to)?;
            fs::set_permissions(&to, meta.permissions())?;
        } else {
            fs::copy(src.join(&rel), &to)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_tree_has_fixed_digest() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let d = snapshot(a.path()).unwrap();
        assert_eq!(d, snapshot(b.path()).unwrap());
        assert_eq!(d, sha256_hex(b""));
    }

    #[test]
    fn digest_is_stable_and_sensitive() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir(dir.path().join("sub")).unwrap();
        fs::write(dir.path().join("sub/a.txt"), b"hello").unwrap();
        let first = snapshot(dir.path()).unwrap();
        assert_eq!(first, snapshot(dir.path()).unwrap());
        fs::write(dir.path().join("sub/a.txt"), b"hellp").unwrap();
        assert_ne!(first, snapshot(dir.path()).unwrap());
    }

    #[test]
    fn mode_bits_count() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("x");
        fs::write(&f, b"x").unwrap();
        let before = snapshot(dir.path()).unwrap();
        fs::set_permissions(&f, fs::Permissions::from_mode(0o755)).unwrap();
        assert_ne!(before, snapshot(dir.path()).unwrap());
    }

    #[test]
    fn state_dir_is_ignored() {
        let dir = tempfile::tempdir().unwrap();
        let before = snapshot(dir.path()).unwrap();
        fs::create_dir(dir.path().join(STATE_DIR)).unwrap();
        fs::write(dir.path().join(STATE_DIR).join("j"), b"x").unwrap();
        assert_eq!(before, snapshot(dir.path()).unwrap());
    }

    #[test]
    fn lexical_join() {
        assert_eq!(join_inside("HappyDog", "data/").unwrap(), "HappyDog/data");
        assert_eq!(join_inside("HappyDog", "/Documents/x").unwrap(), "Documents/x");
        assert_eq!(join_inside("a/b", "../c").unwrap(), "a/c");
        assert!(join_inside("", "../x").is_err());
    }

    #[test]
    fn symlink_escape_is_caught() {
        let outer = tempfile::tempdir().unwrap();
        let root = outer.path().join("root");
        let canary = outer.path().join("canary");
        fs::create_dir_all(&root).unwrap();
        fs::create_dir_all(&canary).unwrap();
        std::os::unix::fs::symlink(&canary, root.join("link")).unwrap();
        assert!(matches!(resolve(&root, "link/file"), Err(SandboxError::Escape(_))));
        std::os::unix::fs::symlink("../canary/new", root.join("dangling")).unwrap();
        assert!(matches!(resolve(&root, "dangling"), Err(SandboxError::Escape(_))));
        assert!(resolve(&root, "fresh/dir/file").unwrap().starts_with(fs::canonicalize(&root).unwrap()));
    }
}
