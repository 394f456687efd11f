//! Append-only binary file of finished paths.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! header   magic "GFKC" | version u32 | fingerprint [u8; 32] | seed u64
//!          | n_horizons u32 | n_properties u32 | horizons f64 * n_horizons
//! record   index u64 | aborted u8 | singular_hits u64 | n_snapshots u32
//!          | (log_weight f64 | properties f64 * n_properties) * n_snapshots
//! ```
//!
//! A truncated trailing record is ignored and overwritten on resume.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{self, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use thiserror::Error;

use super::{PathResult, Snapshot, WalkParams};

pub const MAGIC: &[u8; 4] = b"GFKC";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("checkpoint {0} is not a checkpoint file")]
    BadMagic(PathBuf),
    #[error("checkpoint {path} has version {found}, expected {FORMAT_VERSION}")]
    Version { path: PathBuf, found: u32 },
    #[error("checkpoint {0} belongs to a different run")]
    Mismatch(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointHeader {
    pub fingerprint: [u8; 32],
    pub seed: u64,
    pub horizons: Vec<f64>,
    pub n_properties: u32,
}

impl CheckpointHeader {
    fn encode(&self) -> Vec<u8> {
        let mut b = Vec::with_capacity(56 + 8 * self.horizons.len());
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        b.extend_from_slice(&self.fingerprint);
        b.extend_from_slice(&self.seed.to_le_bytes());
        b.extend_from_slice(&(self.horizons.len() as u32).to_le_bytes());
        b.extend_from_slice(&self.n_properties.to_le_bytes());
        for h in &self.horizons {
            b.extend_from_slice(&h.to_le_bytes());
        }
        b
    }
}

/// SHA-256 of the walk parameters and `λ_T`.
pub fn fingerprint(params: &WalkParams, lambda_t: f64) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(params).unwrap_or_default());
    h.update(lambda_t.to_le_bytes());
    h.finalize().into()
}

fn io_err(path: &Path) -> impl Fn(io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Option<&[u8]> {
        let s = self.buf.get(self.pos..self.pos + n)?;
        self.pos += n;
        Some(s)
    }
    fn u8(&mut self) -> Option<u8> {
        self.take(1).map(|s| s[0])
    }
    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|s| u32::from_le_bytes(s.try_into().unwrap()))
    }
    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|s| u64::from_le_bytes(s.try_into().unwrap()))
    }
    fn f64(&mut self) -> Option<f64> {
        self.take(8).map(|s| f64::from_le_bytes(s.try_into().unwrap()))
    }
}

fn decode_record(c: &mut Cursor<'_>, header: &CheckpointHeader) -> Option<PathResult> {
    let index = c.u64()?;
    let aborted = c.u8()? != 0;
    let singular_hits = c.u64()?;
    let n = c.u32()? as usize;
    if n > header.horizons.len() {
        return None;
    }
    let mut snapshots = Vec::with_capacity(n);
    for &t in &header.horizons[..n] {
        let log_weight = c.f64()?;
        let properties = (0..header.n_properties).map(|_| c.f64()).collect::<Option<Vec<_>>>()?;
        snapshots.push(Snapshot {
            t,
            log_weight,
            properties,
        });
    }
    Some(PathResult {
        index,
        aborted,
        singular_hits,
        snapshots,
    })
}

fn encode_record(r: &PathResult, out: &mut Vec<u8>) {
    out.extend_from_slice(&r.index.to_le_bytes());
    out.push(r.aborted as u8);
    out.extend_from_slice(&r.singular_hits.to_le_bytes());
    out.extend_from_slice(&(r.snapshots.len() as u32).to_le_bytes());
    for s in &r.snapshots {
        out.extend_from_slice(&s.log_weight.to_le_bytes());
        for p in &s.properties {
            out.extend_from_slice(&p.to_le_bytes());
        }
    }
}

/// Reads the completed paths of a matching checkpoint. A missing file gives
/// an empty map.
pub fn load(path: &Path, header: &CheckpointHeader) -> Result<HashMap<u64, PathResult>, CheckpointError> {
    Ok(read(path, header)?.map(|(m, _)| m).unwrap_or_default())
}

fn read(
    path: &Path,
    header: &CheckpointHeader,
) -> Result<Option<(HashMap<u64, PathResult>, u64)>, CheckpointError> {
    let mut file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(None),
        Err(e) => return Err(io_err(path)(e)),
    };
    let mut buf = Vec::new();
    file.read_to_end(&mut buf).map_err(io_err(path))?;
    let expected = header.encode();
    if buf.len() < 8 || &buf[..4] != MAGIC {
        return Err(CheckpointError::BadMagic(path.to_path_buf()));
    }
    let found = u32::from_le_bytes(buf[4..8].try_into().unwrap());
    if found != FORMAT_VERSION {
        return Err(CheckpointError::Version {
            path: path.to_path_buf(),
            found,
        });
    }
    if buf.len() < expected.len() || buf[..expected.len()] != expected[..] {
        return Err(CheckpointError::Mismatch(path.to_path_buf()));
    }
    let mut c = Cursor {
        buf: &buf,
        pos: expected.len(),
    };
    let mut done = HashMap::new();
    let mut valid_end = c.pos;
    while let Some(r) = decode_record(&mut c, header) {
        valid_end = c.pos;
        done.insert(r.index, r);
    }
    Ok(Some((done, valid_end as u64)))
}

pub struct Writer {
    path: PathBuf,
    out: BufWriter<File>,
    scratch: Vec<u8>,
}

impl Writer {
    /// Opens for appending, writing the header to a new file and dropping a
    /// torn trailing record from an existing one.
    pub fn open(path: &Path, header: &CheckpointHeader) -> Result<Self, CheckpointError> {
        let existing = read(path, header)?;
        let err = io_err(path);
        let mut file = OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(path)
            .map_err(&err)?;
        match existing {
            Some((_, end)) => {
                file.set_len(end).map_err(&err)?;
                file.seek(SeekFrom::End(0)).map_err(&err)?;
            }
            None => {
                file.set_len(0).map_err(&err)?;
                file.write_all(&header.encode()).map_err(&err)?;
            }
        }
        Ok(Writer {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
            scratch: Vec::new(),
        })
    }

    pub fn append(&mut self, r: &PathResult) -> Result<(), CheckpointError> {
        self.scratch.clear();
        encode_record(r, &mut self.scratch);
        self.out.write_all(&self.scratch).map_err(io_err(&self.path))
    }

    pub fn flush(&mut self) -> Result<(), CheckpointError> {
        self.out.flush().map_err(io_err(&self.path))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header() -> CheckpointHeader {
        CheckpointHeader {
            fingerprint: [7; 32],
            seed: 11,
            horizons: vec![1.0, 2.0],
            n_properties: 2,
        }
    }

    fn record(index: u64) -> PathResult {
        PathResult {
            index,
            aborted: false,
            singular_hits: index,
            snapshots: vec![
                Snapshot {
                    t: 1.0,
                    log_weight: -0.25 * index as f64,
                    properties: vec![1.5, -2.0],
                },
                Snapshot {
                    t: 2.0,
                    log_weight: 0.125,
                    properties: vec![f64::MIN_POSITIVE, 3.0],
                },
            ],
        }
    }

    #[test]
    fn round_trip_and_torn_tail() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.ckpt");
        let h = header();
        let mut w = Writer::open(&path, &h).unwrap();
        for i in 0..3 {
            w.append(&record(i)).unwrap();
        }
        w.flush().unwrap();
        drop(w);
        let mut bytes = std::fs::read(&path).unwrap();
        let full = bytes.len();
        bytes.extend_from_slice(&[1, 2, 3]);
        std::fs::write(&path, &bytes).unwrap();

        let got = load(&path, &h).unwrap();
        assert_eq!(got.len(), 3);
        assert_eq!(got[&2], record(2));

        let mut w = Writer::open(&path, &h).unwrap();
        w.append(&record(3)).unwrap();
        w.flush().unwrap();
        drop(w);
        assert!(std::fs::metadata(&path).unwrap().len() > full as u64);
        assert_eq!(load(&path, &h).unwrap().len(), 4);
    }

    #[test]
    fn rejects_other_runs() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.ckpt");
        Writer::open(&path, &header()).unwrap().flush().unwrap();
        let mut other = header();
        other.seed = 12;
        assert!(matches!(load(&path, &other), Err(CheckpointError::Mismatch(_))));
        std::fs::write(&path, b"nope").unwrap();
        assert!(matches!(load(&path, &header()), Err(CheckpointError::BadMagic(_))));
    }
}
