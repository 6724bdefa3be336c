//! Atomic writes and directory manifests.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use walkdir::WalkDir;

use crate::error::CliError;

pub const MANIFEST_FILE: &str = "MANIFEST";

fn data_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(format!(".{suffix}-{}", std::process::id()));
    path.with_file_name(name)
}

/// Writes `bytes` to a temporary sibling and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| data_err(dir, e))?;
    }
    let tmp = sibling(path, "tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| data_err(&tmp, e))?;
    f.write_all(bytes).and_then(|_| f.sync_all()).map_err(|e| data_err(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| data_err(path, e))
}

/// Builds a directory with `fill` in a temporary sibling, then swaps it into place.
pub fn replace_dir_atomic(
    dir: &Path,
    fill: impl FnOnce(&Path) -> Result<(), CliError>,
) -> Result<(), CliError> {
    let tmp = sibling(dir, "tmp");
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| data_err(&tmp, e))?;
    }
    fs::create_dir_all(&tmp).map_err(|e| data_err(&tmp, e))?;
    if let Err(e) = fill(&tmp) {
        let _ = fs::remove_dir_all(&tmp);
        return Err(e);
    }
    if dir.exists() {
        let old = sibling(dir, "old");
        fs::rename(dir, &old).map_err(|e| data_err(dir, e))?;
        fs::rename(&tmp, dir).map_err(|e| data_err(dir, e))?;
        fs::remove_dir_all(&old).map_err(|e| data_err(&old, e))?;
    } else {
        fs::rename(&tmp, dir).map_err(|e| data_err(dir, e))?;
    }
    Ok(())
}

/// `sha256sum`-style listing of every file under `dir` except the manifest itself,
/// sorted by `/`-separated relative path.
pub fn manifest_listing(dir: &Path) -> Result<String, CliError> {
    let mut entries = Vec::new();
    for entry in WalkDir::new(dir).sort_by_file_name() {
        let entry = entry.map_err(|e| data_err(dir, e))?;
        if !entry.file_type().is_file() {
            continue;
        }
        let rel = entry.path().strip_prefix(dir).expect("walk stays under root");
        let rel = rel
            .components()
            .map(|c| c.as_os_str().to_string_lossy())
            .collect::<Vec<_>>()
            .join("/");
        if rel == MANIFEST_FILE {
            continue;
        }
        let bytes = fs::read(entry.path()).map_err(|e| data_err(entry.path(), e))?;
        entries.push((rel, hex::encode(Sha256::digest(&bytes))));
    }
    entries.sort();
    Ok(entries.iter().map(|(p, h)| format!("{h}  {p}\n")).collect())
}

/// SHA-256 of the manifest listing: one hash for the whole directory.
pub fn manifest_hash(listing: &str) -> String {
    hex::encode(Sha256::digest(listing.as_bytes()))
}

/// Writes the manifest into `dir` and returns its hash.
pub fn write_manifest(dir: &Path) -> Result<String, CliError> {
    let listing = manifest_listing(dir)?;
    write_atomic(&dir.join(MANIFEST_FILE), listing.as_bytes())?;
    Ok(manifest_hash(&listing))
}

/// Checks the manifest in `dir` against the files; returns the hash.
pub fn verify_manifest(dir: &Path) -> Result<String, CliError> {
    let path = dir.join(MANIFEST_FILE);
    let stored = fs::read_to_string(&path).map_err(|e| data_err(&path, e))?;
    let actual = manifest_listing(dir)?;
    if stored != actual {
        let (a, b): (BTreeSet<&str>, BTreeSet<&str>) = (stored.lines().collect(), actual.lines().collect());
        let mut differing: Vec<&str> = a
            .symmetric_difference(&b)
            .map(|l| l.split_once("  ").map_or(*l, |(_, p)| p))
            .collect();
        differing.dedup();
        return Err(CliError::Data(format!(
            "{}: contents do not match the manifest: {}",
            dir.display(),
            differing.join(", ")
        )));
    }
    Ok(manifest_hash(&actual))
}
