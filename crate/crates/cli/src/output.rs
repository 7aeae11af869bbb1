use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::Context;
use tempfile::NamedTempFile;

use crate::CliError;

/// Writes `contents` to `dir/name` through a temp file in the same directory
/// and a rename, so readers never see a partial file.
pub fn write_atomic(dir: &Path, name: &str, contents: &str) -> Result<PathBuf, CliError> {
    std::fs::create_dir_all(dir).with_context(|| format!("create {}", dir.display())).map_err(CliError::Io)?;
    let path = dir.join(name);
    let mut tmp = NamedTempFile::new_in(dir)
        .with_context(|| format!("temp file in {}", dir.display()))
        .map_err(CliError::Io)?;
    tmp.write_all(contents.as_bytes())
        .and_then(|_| tmp.as_file().sync_all())
        .with_context(|| format!("write {}", path.display()))
        .map_err(CliError::Io)?;
    tmp.persist(&path)
        .with_context(|| format!("rename into {}", path.display()))
        .map_err(CliError::Io)?;
    Ok(path)
}

pub fn to_json<T: serde::Serialize>(value: &T) -> Result<String, CliError> {
    serde_json::to_string_pretty(value).map_err(|e| CliError::Io(e.into()))
}
