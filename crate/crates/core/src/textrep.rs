//! Fixed-dimension text embeddings: a deterministic signed hashed
//! bag-of-words, or rows imported from a `T2FE` file written by an external
//! encoder.
//!
//! `T2FE` layout (little-endian): magic `T2FE`, u16 version = 1, u32 count,
//! u32 dim, then per row a u16 id length, the UTF-8 id, and `dim` f32 values.

use std::collections::HashMap;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_DIM: usize = 64;
pub const MAGIC: &[u8; 4] = b"T2FE";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingSource {
    HashedBow,
    Imported,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextEmbedding {
    pub vector: Vec<f64>,
    pub source: EmbeddingSource,
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

/// Lowercased alphanumeric tokens.
pub fn tokenize(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
}

/// Signed bucket counts before normalization.
pub fn hashed_counts(text: &str, dim: usize) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    for tok in tokenize(text) {
        let h = fnv1a64(tok.as_bytes());
        let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
        v[(h % dim as u64) as usize] += sign;
    }
    v
}

/// Signed hashed bag-of-words, L2-normalized unless every bucket is zero.
pub fn embed_hashed_bow(text: &str, dim: usize) -> Result<TextEmbedding> {
    if dim < 8 {
        return Err(Error::invalid("embed_hashed_bow", format!("dim {dim} < 8")));
    }
    let mut v = hashed_counts(text, dim);
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    Ok(TextEmbedding {
        vector: v,
        source: EmbeddingSource::HashedBow,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingFile {
    pub dim: usize,
    pub ids: Vec<String>,
    pub rows: Vec<Vec<f32>>,
    index: HashMap<String, usize>,
}

impl EmbeddingFile {
    pub fn new(dim: usize, ids: Vec<String>, rows: Vec<Vec<f32>>) -> Result<Self> {
        if ids.len() != rows.len() {
            return Err(Error::Format(format!(
                "{} ids for {} rows",
                ids.len(),
                rows.len()
            )));
        }
        let mut index = HashMap::with_capacity(ids.len());
        for (i, (id, row)) in ids.iter().zip(&rows).enumerate() {
            if row.len() != dim {
                return Err(Error::Format(format!(
                    "row `{id}` has {} values, expected {dim}",
                    row.len()
                )));
            }
            if index.insert(id.clone(), i).is_some() {
                return Err(Error::DuplicateId(id.clone()));
            }
        }
        Ok(Self {
            dim,
            ids,
            rows,
            index,
        })
    }

    pub fn count(&self) -> usize {
        self.rows.len()
    }

    pub fn lookup(&self, id: &str) -> Result<TextEmbedding> {
        let i = *self
            .index
            .get(id)
            .ok_or_else(|| Error::UnknownId(id.to_string()))?;
        Ok(TextEmbedding {
            vector: self.rows[i].iter().map(|&v| v as f64).collect(),
            source: EmbeddingSource::Imported,
        })
    }

    pub fn write<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.count() as u32).to_le_bytes())?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        for (id, row) in self.ids.iter().zip(&self.rows) {
            let len =
                u16::try_from(id.len()).map_err(|_| Error::Format(format!("id too long: {id}")))?;
            w.write_all(&len.to_le_bytes())?;
            w.write_all(id.as_bytes())?;
            for v in row {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        fill(r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format(format!("bad magic {magic:?}, expected T2FE")));
        }
        let mut b2 = [0u8; 2];
        fill(r, &mut b2)?;
        let version = u16::from_le_bytes(b2);
        if version != VERSION {
            return Err(Error::Version(version));
        }
        let mut b4 = [0u8; 4];
        fill(r, &mut b4)?;
        let count = u32::from_le_bytes(b4) as usize;
        fill(r, &mut b4)?;
        let dim = u32::from_le_bytes(b4) as usize;
        let mut ids = Vec::with_capacity(count.min(1 << 20));
        let mut rows = Vec::with_capacity(count.min(1 << 20));
        let mut raw = vec![0u8; dim * 4];
        for _ in 0..count {
            fill(r, &mut b2)?;
            let mut id = vec![0u8; u16::from_le_bytes(b2) as usize];
            fill(r, &mut id)?;
            let id = String::from_utf8(id).map_err(|_| Error::Format("id is not UTF-8".into()))?;
            fill(r, &mut raw)?;
            rows.push(
                raw.chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            );
            ids.push(id);
        }
        Self::new(dim, ids, rows)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write(&mut w)?;
        w.flush()?;
        Ok(())
    }
}

fn fill<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => Error::Truncated,
        _ => Error::Io(e),
    })
}

pub fn load_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingFile> {
    EmbeddingFile::read(&mut BufReader::new(File::open(path)?))
}

/// Where a run's text embeddings come from.
#[derive(Debug, Clone)]
pub enum Embedder {
    HashedBow { dim: usize },
    Imported(EmbeddingFile),
}

impl Embedder {
    pub fn dim(&self) -> usize {
        match self {
            Embedder::HashedBow { dim } => *dim,
            Embedder::Imported(f) => f.dim,
        }
    }

    /// Embed `text`, or look up `id` for imported embeddings.
    pub fn embed(&self, id: &str, text: &str) -> Result<TextEmbedding> {
        match self {
            Embedder::HashedBow { dim } => embed_hashed_bow(text, *dim),
            Embedder::Imported(f) => f.lookup(id),
        }
    }
}
