//! File persistence helpers: JSON documents, JSONL streams and CSV.
//!
//! JSON documents carry a `schema_version` of the form `MAJOR.MINOR`;
//! readers reject any major they do not know.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;
use thiserror::Error;

pub const SCHEMA_VERSION: &str = "1.0";
const SCHEMA_MAJOR: u64 = 1;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {source}")]
    Parse {
        path: PathBuf,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: unsupported schema_version `{found}` (expected major {SCHEMA_MAJOR})")]
    Schema { path: PathBuf, found: String },
    #[error("{path}: {message}")]
    Csv { path: PathBuf, message: String },
    #[error("{path}: {message}")]
    Invalid { path: PathBuf, message: String },
}

impl StoreError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io { path: path.to_path_buf(), source }
    }

    pub fn is_not_found(&self) -> bool {
        matches!(self, Self::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound)
    }
}

fn ensure_parent(path: &Path) -> Result<(), StoreError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| StoreError::io(dir, e))?;
    }
    Ok(())
}

/// Write through a temp file and rename, so readers never see half a file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), StoreError> {
    ensure_parent(path)?;
    let tmp = path.with_extension("tmp~");
    fs::write(&tmp, bytes).map_err(|e| StoreError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| StoreError::io(path, e))
}

/// Pretty JSON with a trailing newline. Map keys serialize in struct order.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), StoreError> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|source| StoreError::Parse {
        path: path.to_path_buf(),
        line: 0,
        source,
    })?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

/// Read a JSON document and check its `schema_version` major.
pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, StoreError> {
    let text = fs::read_to_string(path).map_err(|e| StoreError::io(path, e))?;
    let raw: Value =
        serde_json::from_str(&text).map_err(|source| StoreError::Parse { path: path.to_path_buf(), line: 1, source })?;
    check_schema(path, &raw)?;
    serde_json::from_value(raw).map_err(|source| StoreError::Parse { path: path.to_path_buf(), line: 1, source })
}

pub fn check_schema(path: &Path, raw: &Value) -> Result<(), StoreError> {
    let Some(version) = raw.get("schema_version") else {
        return Ok(());
    };
    let found = version.as_str().unwrap_or_default().to_string();
    let major = found.split('.').next().and_then(|m| m.parse::<u64>().ok());
    if major != Some(SCHEMA_MAJOR) {
        return Err(StoreError::Schema { path: path.to_path_buf(), found });
    }
    Ok(())
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, StoreError> {
    let file = File::open(path).map_err(|e| StoreError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| StoreError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line).map_err(|source| StoreError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            source,
        })?;
        out.push(item);
    }
    Ok(out)
}

pub fn write_jsonl<'a, T: Serialize + 'a>(
    path: &Path,
    items: impl IntoIterator<Item = &'a T>,
) -> Result<(), StoreError> {
    let mut buf = Vec::new();
    for item in items {
        serde_json::to_writer(&mut buf, item).map_err(|source| StoreError::Parse {
            path: path.to_path_buf(),
            line: 0,
            source,
        })?;
        buf.push(b'\n');
    }
    write_atomic(path, &buf)
}

/// Line-oriented appender; each call flushes so a killed process leaves
/// only whole lines behind.
pub struct JsonlAppender {
    path: PathBuf,
    out: BufWriter<File>,
}

impl JsonlAppender {
    pub fn create(path: &Path) -> Result<Self, StoreError> {
        ensure_parent(path)?;
        let file = File::create(path).map_err(|e| StoreError::io(path, e))?;
        Ok(Self { path: path.to_path_buf(), out: BufWriter::new(file) })
    }

    pub fn append_to(path: &Path) -> Result<Self, StoreError> {
        ensure_parent(path)?;
        let file = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| StoreError::io(path, e))?;
        Ok(Self { path: path.to_path_buf(), out: BufWriter::new(file) })
    }

    pub fn push<T: Serialize>(&mut self, item: &T) -> Result<(), StoreError> {
        serde_json::to_writer(&mut self.out, item).map_err(|source| StoreError::Parse {
            path: self.path.clone(),
            line: 0,
            source,
        })?;
        self.out.write_all(b"\n").map_err(|e| StoreError::io(&self.path, e))?;
        self.out.flush().map_err(|e| StoreError::io(&self.path, e))
    }
}

pub fn write_csv<R: Serialize>(path: &Path, rows: impl IntoIterator<Item = R>) -> Result<(), StoreError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row).map_err(|e| StoreError::Csv { path: path.to_path_buf(), message: e.to_string() })?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| StoreError::Csv { path: path.to_path_buf(), message: e.to_string() })?;
    write_atomic(path, &bytes)
}

/// Write raw string rows (header first) to CSV.
pub fn write_csv_records(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<(), StoreError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| StoreError::Csv { path: path.to_path_buf(), message: e.to_string() };
    w.write_record(header).map_err(csv_err)?;
    for row in rows {
        w.write_record(row).map_err(csv_err)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| StoreError::Csv { path: path.to_path_buf(), message: e.to_string() })?;
    write_atomic(path, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Debug, Serialize, Deserialize, PartialEq)]
    struct Doc {
        schema_version: String,
        n: u32,
    }

    #[test]
    fn rejects_unknown_major() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.json");
        write_json(&p, &Doc { schema_version: "1.3".into(), n: 2 }).unwrap();
        assert_eq!(read_json::<Doc>(&p).unwrap().n, 2);
        write_json(&p, &Doc { schema_version: "2.0".into(), n: 2 }).unwrap();
        assert!(matches!(read_json::<Doc>(&p), Err(StoreError::Schema { .. })));
    }

    #[test]
    fn jsonl_reports_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.jsonl");
        fs::write(&p, "{\"schema_version\":\"1.0\",\"n\":1}\n\nnot json\n").unwrap();
        match read_jsonl::<Doc>(&p) {
            Err(StoreError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        assert!(read_jsonl::<Doc>(&dir.path().join("missing")).unwrap_err().is_not_found());
    }
}
