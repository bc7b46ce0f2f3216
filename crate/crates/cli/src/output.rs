//! Staged command outputs. Every file is collected in memory, then written
//! into a staging directory next to the destination and moved into place in
//! one rename, so a failed command never leaves partial results behind.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::CliError;

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Default)]
pub struct Outputs {
    files: BTreeMap<String, Vec<u8>>,
}

#[derive(Serialize)]
struct ManifestEntry<'a> {
    path: &'a str,
    bytes: usize,
    sha256: String,
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    files: Vec<ManifestEntry<'a>>,
}

fn io(path: &Path, e: std::io::Error) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

impl Outputs {
    pub fn add(&mut self, rel: impl Into<String>, bytes: impl Into<Vec<u8>>) {
        self.files.insert(rel.into(), bytes.into());
    }

    pub fn add_json<T: Serialize>(&mut self, rel: impl Into<String>, value: &T) -> Result<(), CliError> {
        let mut s = serde_json::to_string_pretty(value).map_err(|e| CliError::Internal(e.to_string()))?;
        s.push('\n');
        self.add(rel, s);
        Ok(())
    }

    pub fn manifest(&self, command: &str) -> Result<String, CliError> {
        let files = self
            .files
            .iter()
            .map(|(path, b)| ManifestEntry {
                path,
                bytes: b.len(),
                sha256: hex::encode(Sha256::digest(b)),
            })
            .collect();
        let mut s = serde_json::to_string_pretty(&Manifest { command, files })
            .map_err(|e| CliError::Internal(e.to_string()))?;
        s.push('\n');
        Ok(s)
    }

    /// Writes everything plus the manifest to `dest`, replacing an existing
    /// directory only when `force` is set.
    pub fn commit(&self, command: &str, dest: &Path, force: bool) -> Result<(), CliError> {
        check_destination(dest, force)?;
        let parent = dest.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        fs::create_dir_all(parent).map_err(|e| io(parent, e))?;
        let name = dest
            .file_name()
            .ok_or_else(|| CliError::Io(format!("{}: not a directory name", dest.display())))?
            .to_string_lossy()
            .into_owned();
        let pid = std::process::id();
        let staging = parent.join(format!(".{name}.staging-{pid}"));
        if staging.exists() {
            fs::remove_dir_all(&staging).map_err(|e| io(&staging, e))?;
        }
        let result = self.write_tree(command, &staging).and_then(|()| swap_in(&staging, dest, parent, &name, pid));
        if result.is_err() && staging.exists() {
            let _ = fs::remove_dir_all(&staging);
        }
        result
    }

    fn write_tree(&self, command: &str, root: &Path) -> Result<(), CliError> {
        for (rel, bytes) in &self.files {
            let p = root.join(rel);
            if let Some(dir) = p.parent() {
                fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
            }
            fs::write(&p, bytes).map_err(|e| io(&p, e))?;
        }
        fs::create_dir_all(root).map_err(|e| io(root, e))?;
        let m = root.join(MANIFEST);
        fs::write(&m, self.manifest(command)?).map_err(|e| io(&m, e))
    }
}

/// Fails early when `dest` exists and `force` is off, so no compute is wasted.
pub fn check_destination(dest: &Path, force: bool) -> Result<(), CliError> {
    if dest.exists() && !force {
        return Err(CliError::Io(format!(
            "{} already exists; pass --force to overwrite",
            dest.display()
        )));
    }
    Ok(())
}

fn swap_in(staging: &Path, dest: &Path, parent: &Path, name: &str, pid: u32) -> Result<(), CliError> {
    if !dest.exists() {
        return fs::rename(staging, dest).map_err(|e| io(dest, e));
    }
    let old: PathBuf = parent.join(format!(".{name}.old-{pid}"));
    fs::rename(dest, &old).map_err(|e| io(dest, e))?;
    if let Err(e) = fs::rename(staging, dest) {
        let _ = fs::rename(&old, dest);
        return Err(io(dest, e));
    }
    fs::remove_dir_all(&old).map_err(|e| io(&old, e))
}
