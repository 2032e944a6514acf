//! Versioned on-disk formats.
//!
//! JSONL artifacts start with one `{"_header": {...}}` line naming the schema,
//! its version, and the hashes of the producing manifest and config. JSON
//! artifacts embed the same header as a `header` field.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Header {
    pub schema: String,
    pub version: u32,
    /// Hash of the manifest of the run that produced the artifact.
    pub manifest: String,
    /// Hash of the resolved configuration of that run.
    pub config: String,
}

impl Header {
    pub fn new(schema: &str, manifest: &str, config: &str) -> Self {
        Self {
            schema: schema.to_string(),
            version: SCHEMA_VERSION,
            manifest: manifest.to_string(),
            config: config.to_string(),
        }
    }

    /// Header for artifacts produced outside a manifest-tracked run.
    pub fn untracked(schema: &str) -> Self {
        Self::new(schema, "", "")
    }

    pub fn expect_schema(&self, schema: &str, path: &Path) -> Result<()> {
        if self.schema != schema || self.version != SCHEMA_VERSION {
            return Err(Error::Schema {
                path: path.to_path_buf(),
                reason: format!(
                    "expected {schema} v{SCHEMA_VERSION}, found {} v{}",
                    self.schema, self.version
                ),
            });
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct HeaderLine {
    #[serde(rename = "_header")]
    header: Header,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    Ok(())
}

pub fn write_jsonl<T: Serialize>(path: &Path, header: &Header, records: &[T]) -> Result<()> {
    ensure_parent(path)?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    serde_json::to_writer(
        &mut out,
        &HeaderLine {
            header: header.clone(),
        },
    )?;
    out.write_all(b"\n").map_err(io)?;
    for record in records {
        serde_json::to_writer(&mut out, record)?;
        out.write_all(b"\n").map_err(io)?;
    }
    out.flush().map_err(io)
}

/// Reads a JSONL artifact, validating the header's schema and version.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path, schema: &str) -> Result<(Header, Vec<T>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let first = lines
        .next()
        .ok_or_else(|| Error::Schema {
            path: path.to_path_buf(),
            reason: "empty file".into(),
        })?
        .map_err(|e| Error::io(path, e))?;
    let header: HeaderLine = serde_json::from_str(&first).map_err(|e| Error::Schema {
        path: path.to_path_buf(),
        reason: format!("bad header line: {e}"),
    })?;
    header.header.expect_schema(schema, path)?;
    let mut records = Vec::new();
    for line in lines {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(serde_json::from_str(&line)?);
    }
    Ok((header.header, records))
}

/// Opens a JSONL log for appending, writing the header if the file is new.
pub fn open_append_log(path: &Path, header: &Header) -> Result<File> {
    ensure_parent(path)?;
    let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let mut file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    if fresh {
        let mut line = serde_json::to_vec(&HeaderLine {
            header: header.clone(),
        })?;
        line.push(b'\n');
        file.write_all(&line).map_err(|e| Error::io(path, e))?;
        file.flush().map_err(|e| Error::io(path, e))?;
    }
    Ok(file)
}

/// Appends one record as a single `write` so concurrent readers never see a partial line.
pub fn append_record<T: Serialize>(file: &mut File, path: &Path, record: &T) -> Result<()> {
    let mut line = serde_json::to_vec(record)?;
    line.push(b'\n');
    file.write_all(&line).map_err(|e| Error::io(path, e))?;
    file.flush().map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    ensure_parent(path)?;
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

pub fn write_text(path: &Path, text: &[u8]) -> Result<()> {
    ensure_parent(path)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Debug, PartialEq, Serialize, Deserialize)]
    struct Rec {
        id: u32,
        name: String,
    }

    #[test]
    fn jsonl_round_trip_and_schema_check() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x/recs.jsonl");
        let header = Header::new("recs", "m1", "c1");
        let recs = vec![
            Rec {
                id: 1,
                name: "a".into(),
            },
            Rec {
                id: 2,
                name: "b".into(),
            },
        ];
        write_jsonl(&path, &header, &recs).unwrap();
        let (h, back): (Header, Vec<Rec>) = read_jsonl(&path, "recs").unwrap();
        assert_eq!(h, header);
        assert_eq!(back, recs);
        let err = read_jsonl::<Rec>(&path, "other").unwrap_err();
        assert_eq!(err.kind(), "schema_mismatch");
    }

    #[test]
    fn append_log_writes_header_once() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.jsonl");
        let header = Header::untracked("recs");
        for id in 0..3 {
            let mut f = open_append_log(&path, &header).unwrap();
            append_record(
                &mut f,
                &path,
                &Rec {
                    id,
                    name: "x".into(),
                },
            )
            .unwrap();
        }
        let (_, back): (Header, Vec<Rec>) = read_jsonl(&path, "recs").unwrap();
        assert_eq!(back.len(), 3);
    }
}
