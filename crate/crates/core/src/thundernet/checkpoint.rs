//! Binary tensor container.
//!
//! Layout: magic `EGOSEG01` | u32 entry count | per entry: u16 name length, UTF-8
//! name, u8 dtype (0 = f32), u8 rank, rank x u32 dims, f32 data | u32 CRC32 of all
//! preceding bytes. All integers and floats are little-endian.

use std::path::{Path, PathBuf};

pub const MAGIC: &[u8; 8] = b"EGOSEG01";
const DTYPE_F32: u8 = 0;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("{path}: not a checkpoint (bad magic)")]
    BadMagic { path: PathBuf },

    #[error("{path}: truncated at byte {offset} while reading {what}")]
    Truncated {
        path: PathBuf,
        offset: usize,
        what: &'static str,
    },

    #[error("{path}: checksum mismatch (stored {stored:#010x}, computed {computed:#010x})")]
    BadChecksum { path: PathBuf, stored: u32, computed: u32 },

    #[error("{path}: {count} unexpected bytes after the checksum")]
    TrailingBytes { path: PathBuf, count: usize },

    #[error("{path}: unsupported dtype code {code} for tensor {name}")]
    UnsupportedDtype { path: PathBuf, name: String, code: u8 },

    #[error("{path}: tensor name is not valid UTF-8")]
    BadName { path: PathBuf },

    #[error("{path}: tensor {name} appears twice")]
    DuplicateTensor { path: PathBuf, name: String },

    #[error("checkpoint is missing tensor {name}")]
    MissingTensor { name: String },

    #[error("checkpoint has unexpected tensor {name}")]
    UnexpectedTensor { name: String },

    #[error("tensor {name} has shape {found:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("checkpoint metadata is invalid: {0}")]
    BadMetadata(String),
}

/// One named tensor in a container.
#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl Entry {
    pub fn new(name: impl Into<String>, dims: Vec<usize>, data: Vec<f32>) -> Self {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        Self {
            name: name.into(),
            dims,
            data,
        }
    }
}

pub fn encode(entries: &[Entry]) -> Vec<u8> {
    let payload: usize = entries.iter().map(|e| 4 + e.name.len() + 4 * (e.dims.len() + e.data.len())).sum();
    let mut out = Vec::with_capacity(16 + payload);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for e in entries {
        out.extend_from_slice(&(e.name.len() as u16).to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.push(DTYPE_F32);
        out.push(e.dims.len() as u8);
        for &d in &e.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &e.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        if self.bytes.len() - self.pos < n {
            return Err(CheckpointError::Truncated {
                path: self.path.to_path_buf(),
                offset: self.bytes.len(),
                what,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

/// Parses a container. `path` is used only for error messages.
pub fn decode(bytes: &[u8], path: &Path) -> Result<Vec<Entry>, CheckpointError> {
    let p = || path.to_path_buf();
    let head = &bytes[..bytes.len().min(MAGIC.len())];
    if head != &MAGIC[..head.len()] {
        return Err(CheckpointError::BadMagic { path: p() });
    }
    let mut r = Reader { bytes, pos: 0, path };
    r.take(MAGIC.len(), "magic")?;
    let count = r.u32("entry count")? as usize;
    let mut entries: Vec<Entry> = Vec::with_capacity(count.min(4096));
    let mut seen = std::collections::HashSet::new();
    for _ in 0..count {
        let len = u16::from_le_bytes(r.take(2, "name length")?.try_into().expect("2 bytes")) as usize;
        let name = std::str::from_utf8(r.take(len, "tensor name")?)
            .map_err(|_| CheckpointError::BadName { path: p() })?
            .to_string();
        let head = r.take(2, "tensor header")?;
        let (dtype, rank) = (head[0], head[1] as usize);
        if dtype != DTYPE_F32 {
            return Err(CheckpointError::UnsupportedDtype { path: p(), name, code: dtype });
        }
        let dims = (0..rank)
            .map(|_| r.u32("tensor dims").map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let len = dims.iter().product::<usize>();
        let raw = r.take(len * 4, "tensor data")?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        if !seen.insert(name.clone()) {
            return Err(CheckpointError::DuplicateTensor { path: p(), name });
        }
        entries.push(Entry { name, dims, data });
    }
    let body_end = r.pos;
    let stored = r.u32("checksum")?;
    let computed = crc32fast::hash(&bytes[..body_end]);
    if stored != computed {
        return Err(CheckpointError::BadChecksum { path: p(), stored, computed });
    }
    if r.pos != bytes.len() {
        return Err(CheckpointError::TrailingBytes {
            path: p(),
            count: bytes.len() - r.pos,
        });
    }
    Ok(entries)
}

pub fn write_entries(path: &Path, entries: &[Entry]) -> crate::Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| crate::Error::io(parent, e))?;
    }
    // write then rename so a crash never leaves a half-written checkpoint behind
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, encode(entries)).map_err(|e| crate::Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| crate::Error::io(path, e))
}

pub fn read_entries(path: &Path) -> crate::Result<Vec<Entry>> {
    let bytes = std::fs::read(path).map_err(|e| crate::Error::io(path, e))?;
    Ok(decode(&bytes, path)?)
}
