//! Dense vector store and the `VSEMVEC1` binary format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic     8 bytes  "VSEMVEC1"
//! version   u32      1
//! dim       u32
//! count     u64
//! metric    u8       0 = cosine, 1 = dot
//! normalized u8      0 / 1
//! count × { id_len u16, id bytes (UTF-8), dim × f32 }
//! ```

use std::collections::HashMap;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use super::{norm, EmbedError, Embedding, Metric, UNIT_NORM_TOLERANCE};

const MAGIC: &[u8; 8] = b"VSEMVEC1";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum VectorFileError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic {0:?}")]
    BadMagic([u8; 8]),
    #[error("unsupported version {0}")]
    UnsupportedVersion(u32),
    #[error("unknown metric byte {0}")]
    UnknownMetric(u8),
    #[error("invalid normalized flag {0}")]
    BadFlag(u8),
    #[error("file truncated in record {record}")]
    Truncated { record: u64 },
    #[error("record {record} id is not valid UTF-8")]
    InvalidId { record: u64 },
    #[error("id of {0} bytes does not fit the u16 length prefix")]
    IdTooLong(usize),
    #[error("dimension must be positive")]
    ZeroDim,
    #[error("duplicate id {0:?}")]
    DuplicateId(String),
    #[error("trailing bytes after the last record")]
    TrailingBytes,
    #[error("vector {id:?}: {source}")]
    Vector {
        id: String,
        #[source]
        source: EmbedError,
    },
}

/// Id-addressed vectors of one dimension, stored contiguously in insertion order.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorStore {
    dim: usize,
    metric: Metric,
    normalized: bool,
    ids: Vec<String>,
    data: Vec<f32>,
    index: HashMap<String, usize>,
}

impl VectorStore {
    pub fn new(dim: usize, metric: Metric, normalized: bool) -> Result<Self, VectorFileError> {
        if dim == 0 {
            return Err(VectorFileError::ZeroDim);
        }
        Ok(VectorStore {
            dim,
            metric,
            normalized,
            ids: Vec::new(),
            data: Vec::new(),
            index: HashMap::new(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn metric(&self) -> Metric {
        self.metric
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn insert(&mut self, id: impl Into<String>, vector: &[f32]) -> Result<(), VectorFileError> {
        let id = id.into();
        if id.len() > u16::MAX as usize {
            return Err(VectorFileError::IdTooLong(id.len()));
        }
        let fail = |source| VectorFileError::Vector {
            id: id.clone(),
            source,
        };
        if vector.len() != self.dim {
            return Err(fail(EmbedError::DimensionMismatch {
                expected: self.dim,
                got: vector.len(),
            }));
        }
        if let Some(index) = vector.iter().position(|v| !v.is_finite()) {
            return Err(fail(EmbedError::NonFinite { index }));
        }
        let n = norm(vector);
        if self.normalized && (n - 1.0).abs() > UNIT_NORM_TOLERANCE {
            return Err(fail(EmbedError::NotNormalized { norm: n }));
        }
        if self.metric == Metric::Cosine && n == 0.0 {
            return Err(fail(EmbedError::ZeroVector));
        }
        if self.index.contains_key(&id) {
            return Err(VectorFileError::DuplicateId(id));
        }
        self.index.insert(id.clone(), self.ids.len());
        self.ids.push(id);
        self.data.extend_from_slice(vector);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&[f32]> {
        self.index.get(id).map(|&i| self.row(i))
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn id(&self, i: usize) -> &str {
        &self.ids[i]
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f32])> {
        self.ids
            .iter()
            .zip(self.data.chunks_exact(self.dim))
            .map(|(id, v)| (id.as_str(), v))
    }

    pub fn embedding(&self, id: &str) -> Option<Embedding> {
        self.get(id).map(|v| Embedding(v.to_vec()))
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), VectorFileError> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        w.write_all(&(self.len() as u64).to_le_bytes())?;
        w.write_all(&[self.metric.to_byte(), self.normalized as u8])?;
        for (id, v) in self.iter() {
            w.write_all(&(id.len() as u16).to_le_bytes())?;
            w.write_all(id.as_bytes())?;
            for x in v {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, VectorFileError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(VectorFileError::BadMagic(magic));
        }
        let version = u32::from_le_bytes(read_array(&mut r)?);
        if version != VERSION {
            return Err(VectorFileError::UnsupportedVersion(version));
        }
        let dim = u32::from_le_bytes(read_array(&mut r)?) as usize;
        let count = u64::from_le_bytes(read_array(&mut r)?);
        let [metric, normalized] = read_array::<2>(&mut r)?;
        let metric = Metric::from_byte(metric).ok_or(VectorFileError::UnknownMetric(metric))?;
        let normalized = match normalized {
            0 => false,
            1 => true,
            other => return Err(VectorFileError::BadFlag(other)),
        };
        let mut store = VectorStore::new(dim, metric, normalized)?;

        let mut row = vec![0f32; dim];
        let mut raw = vec![0u8; dim * 4];
        for record in 0..count {
            let truncated = |e: io::Error| match e.kind() {
                io::ErrorKind::UnexpectedEof => VectorFileError::Truncated { record },
                _ => VectorFileError::Io(e),
            };
            let id_len = u16::from_le_bytes(read_array(&mut r).map_err(truncated)?) as usize;
            let mut id = vec![0u8; id_len];
            r.read_exact(&mut id).map_err(truncated)?;
            let id = String::from_utf8(id).map_err(|_| VectorFileError::InvalidId { record })?;
            r.read_exact(&mut raw).map_err(truncated)?;
            for (dst, chunk) in row.iter_mut().zip(raw.chunks_exact(4)) {
                *dst = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
            }
            store.insert(id, &row)?;
        }
        let mut probe = [0u8; 1];
        if r.read(&mut probe)? != 0 {
            return Err(VectorFileError::TrailingBytes);
        }
        Ok(store)
    }
}

fn read_array<const N: usize>(r: &mut impl Read) -> io::Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

pub fn write_vectors(store: &VectorStore, path: impl AsRef<Path>) -> Result<(), VectorFileError> {
    store.write_to(BufWriter::new(File::create(path)?))
}

pub fn read_vectors(path: impl AsRef<Path>) -> Result<VectorStore, VectorFileError> {
    VectorStore::read_from(BufReader::new(File::open(path)?))
}
