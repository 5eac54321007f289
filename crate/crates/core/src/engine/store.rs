//! JSON-lines files.

use std::fs::{self, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::Result;

/// Reads every non-blank line of `path` as `T`; a missing file is empty.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for line in BufReader::new(fs::File::open(path)?).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

pub fn append_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    if items.is_empty() {
        return Ok(());
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut buf = Vec::new();
    for item in items {
        serde_json::to_writer(&mut buf, item)?;
        buf.push(b'\n');
    }
    OpenOptions::new().create(true).append(true).open(path)?.write_all(&buf)?;
    Ok(())
}

/// Replaces `path` with `lines`, via a temporary file and rename.
pub fn write_lines(path: &Path, lines: impl IntoIterator<Item = String>) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let tmp = path.with_extension("tmp");
    let mut buf = String::new();
    for l in lines {
        buf.push_str(&l);
        buf.push('\n');
    }
    fs::write(&tmp, buf)?;
    fs::rename(tmp, path)?;
    Ok(())
}

pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    Ok(fs::read_to_string(path)?.lines().filter(|l| !l.trim().is_empty()).map(String::from).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn append_then_read() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub").join("x.jsonl");
        assert!(read_jsonl::<u32>(&p).unwrap().is_empty());
        append_jsonl(&p, &[1u32, 2]).unwrap();
        append_jsonl(&p, &[3u32]).unwrap();
        assert_eq!(read_jsonl::<u32>(&p).unwrap(), vec![1, 2, 3]);
        write_lines(&p, ["7".to_string()]).unwrap();
        assert_eq!(read_jsonl::<u32>(&p).unwrap(), vec![7]);
    }
}
