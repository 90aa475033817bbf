//! File formats: JSON-lines detection streams, cameras file, atomic writes.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::detection::{Detection, StreamHeader, SCHEMA_VERSION};
use crate::error::{Error, Result};
use crate::geometry::CameraSet;

/// Writes through a temporary file in the target directory and renames it
/// into place, so the target is either absent, the old file, or complete.
pub fn write_atomic<F>(path: &Path, fill: F) -> Result<()>
where
    F: FnOnce(&mut BufWriter<&mut File>) -> io::Result<()>,
{
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(&dir).map_err(|e| Error::io(&dir, e))?;
    {
        let mut w = BufWriter::new(tmp.as_file_mut());
        fill(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))?;
    }
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn to_json_line<T: Serialize>(value: &T) -> String {
    serde_json::to_string(value).expect("records serialize infallibly")
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("records serialize infallibly");
    write_atomic(path, |w| {
        w.write_all(text.as_bytes())?;
        w.write_all(b"\n")
    })
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        context: path.display().to_string(),
        source,
    })
}

/// Writes an optional header line followed by one record per line.
pub fn write_jsonl<H: Serialize, T: Serialize>(
    path: &Path,
    header: Option<&H>,
    records: &[T],
) -> Result<()> {
    write_atomic(path, |w| {
        if let Some(h) = header {
            writeln!(w, "{}", to_json_line(h))?;
        }
        for r in records {
            writeln!(w, "{}", to_json_line(r))?;
        }
        Ok(())
    })
}

fn lines(path: &Path) -> Result<impl Iterator<Item = (usize, io::Result<String>)>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(BufReader::new(f).lines().enumerate())
}

fn parse_line<T: DeserializeOwned>(path: &Path, lineno: usize, line: &str) -> Result<T> {
    serde_json::from_str(line).map_err(|source| Error::Json {
        context: format!("{}:{}", path.display(), lineno + 1),
        source,
    })
}

/// Every non-empty line parsed as `T`.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (i, line) in lines(path)? {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            out.push(parse_line(path, i, &line)?);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionStream {
    pub header: StreamHeader,
    pub records: Vec<Detection>,
}

impl DetectionStream {
    pub fn new(header: StreamHeader, records: Vec<Detection>) -> Self {
        Self { header, records }
    }

    pub fn validate(&self) -> Result<()> {
        if self.header.schema_version != SCHEMA_VERSION {
            return Err(Error::input(format!(
                "unsupported schema_version {}",
                self.header.schema_version
            )));
        }
        for r in &self.records {
            r.validate(self.header.embedding_dim)?;
        }
        Ok(())
    }

    /// Cameras file named by the header, resolved next to `stream_path`.
    pub fn cameras_path(&self, stream_path: &Path) -> PathBuf {
        let p = Path::new(&self.header.cameras);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            stream_path.parent().unwrap_or(Path::new(".")).join(p)
        }
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut it = lines(path)?;
        let header: StreamHeader = loop {
            match it.next() {
                None => {
                    return Err(Error::input(format!(
                        "{}: missing stream header",
                        path.display()
                    )))
                }
                Some((i, line)) => {
                    let line = line.map_err(|e| Error::io(path, e))?;
                    if !line.trim().is_empty() {
                        break parse_line(path, i, &line)?;
                    }
                }
            }
        };
        let mut records = Vec::new();
        for (i, line) in it {
            let line = line.map_err(|e| Error::io(path, e))?;
            if !line.trim().is_empty() {
                records.push(parse_line(path, i, &line)?);
            }
        }
        let s = Self { header, records };
        s.validate()?;
        Ok(s)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_jsonl(path, Some(&self.header), &self.records)
    }
}

/// How a stream written to `stream_path` should name `cameras`: relative
/// to the stream's directory when possible, so artifacts stay relocatable.
pub fn camera_reference(cameras: &Path, stream_path: &Path) -> String {
    let abs = |p: &Path| std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf());
    let cams = abs(cameras);
    let dir = match stream_path.parent() {
        Some(d) if !d.as_os_str().is_empty() => abs(d),
        _ => abs(Path::new(".")),
    };
    pathdiff::diff_paths(&cams, &dir)
        .unwrap_or(cams)
        .display()
        .to_string()
}

pub fn read_cameras(path: &Path) -> Result<CameraSet> {
    let parsed: CameraSet = read_json(path)?;
    CameraSet::new(parsed.cameras)
}
