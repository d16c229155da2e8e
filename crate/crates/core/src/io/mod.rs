//! File formats: the binary tensor container, checkpoints, `key = value`
//! text files and PGM export.

pub mod checkpoint;
pub mod kv;
pub mod pgm;
pub mod tensor_file;

use std::fs;
use std::io::Write;
use std::path::Path;

/// Writes `bytes` to a sibling temporary file, syncs it, then renames it
/// over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| std::io::Error::new(std::io::ErrorKind::InvalidInput, "path has no file name"))?;
    let mut tmp_name = name.to_os_string();
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}
