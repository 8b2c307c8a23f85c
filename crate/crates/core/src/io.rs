use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{DpodError, Result};

/// Writes through a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, body: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| DpodError::InvalidConfig(format!("{} is not a file path", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", file_name.to_string_lossy()));
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| DpodError::io(parent, e))?;
    }
    let file = File::create(&tmp).map_err(|e| DpodError::io(&tmp, e))?;
    let mut w = BufWriter::new(file);
    body(&mut w)?;
    w.flush().map_err(|e| DpodError::io(&tmp, e))?;
    drop(w);
    fs::rename(&tmp, path).map_err(|e| DpodError::io(path, e))
}

pub fn write_string_atomic(path: &Path, contents: &str) -> Result<()> {
    write_atomic(path, |w| w.write_all(contents.as_bytes()).map_err(|e| DpodError::io(path, e)))
}
