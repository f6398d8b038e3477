//! Embedding sets and the similarity primitive shared by every stage.
//!
//! Rows are stored as `f32`; every reduction (norms, dot products, means)
//! accumulates in `f64` in a fixed left-to-right order so results do not
//! depend on how work is split across threads.

mod clips;
pub mod iemb;

pub use clips::{
    pool_clips, read_clip_table, segment_video, validate_clip_table, write_clip_table, Clip,
};
pub use iemb::{load_embeddings, save_embeddings};

use rayon::prelude::*;
use thiserror::Error;

/// Tolerance used when a file claims its rows are unit-norm.
pub const NORMALIZED_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("Io: {0}")]
    Io(#[from] std::io::Error),
    #[error("MagicMismatch: expected \"IEMB\", found {0:?}")]
    MagicMismatch([u8; 4]),
    #[error("VersionUnsupported: {0}")]
    VersionUnsupported(u32),
    #[error("TruncatedFile: needed {needed} bytes, file has {actual}")]
    TruncatedFile { needed: u64, actual: u64 },
    #[error("TrailingData: {0} unexpected bytes after the embedding payload")]
    TrailingData(u64),
    #[error("NonFiniteValue in row id {0}")]
    NonFiniteValue(u64),
    #[error("DuplicateId: {0}")]
    DuplicateId(u64),
    #[error("UnsortedIds: id {0} follows a larger id")]
    UnsortedIds(u64),
    #[error("ZeroVectorRow: row id {0}")]
    ZeroVectorRow(u64),
    #[error("ZeroVector")]
    ZeroVector,
    #[error("DimMismatch: {left} vs {right}")]
    DimMismatch { left: usize, right: usize },
    #[error("NotNormalized: row id {0} is not unit-norm")]
    NotNormalized(u64),
    #[error("ShapeMismatch: {ids} ids, dim {dim}, {values} values")]
    ShapeMismatch {
        ids: usize,
        dim: usize,
        values: usize,
    },
    #[error("InvalidDim: dimension must be positive")]
    InvalidDim,
    #[error("UnknownId: {0}")]
    UnknownId(u64),
    #[error("EmptyClip: clip {0} has no frame rows")]
    EmptyClip(u64),
    #[error("RangeOutOfBounds: clip {clip_id} covers rows {start}..{end} of {rows}")]
    RangeOutOfBounds {
        clip_id: u64,
        start: usize,
        end: usize,
        rows: usize,
    },
    #[error("InvalidClipTable: {0}")]
    InvalidClipTable(String),
    #[error("MalformedChunk: {0}")]
    MalformedChunk(String),
    #[error("Json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = EmbedError> = std::result::Result<T, E>;

/// Dense row-major matrix of embeddings keyed by ascending, unique ids.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    ids: Vec<u64>,
    dim: usize,
    data: Vec<f32>,
    normalized: bool,
}

impl EmbeddingSet {
    /// Builds a set from ids and row-major data. The result is not flagged as
    /// normalized; use [`normalize`] for that.
    pub fn new(ids: Vec<u64>, dim: usize, data: Vec<f32>) -> Result<Self> {
        Self::validate(&ids, dim, &data)?;
        Ok(Self {
            ids,
            dim,
            data,
            normalized: false,
        })
    }

    /// Like [`EmbeddingSet::new`], but trusts a normalized flag after checking
    /// every row norm is within [`NORMALIZED_TOLERANCE`] of one.
    pub fn with_flag(ids: Vec<u64>, dim: usize, data: Vec<f32>, normalized: bool) -> Result<Self> {
        let mut set = Self::new(ids, dim, data)?;
        if normalized {
            for (id, row) in set.iter() {
                if (l2_norm(row) - 1.0).abs() > NORMALIZED_TOLERANCE {
                    return Err(EmbedError::NotNormalized(id));
                }
            }
            set.normalized = true;
        }
        Ok(set)
    }

    pub fn from_rows(ids: Vec<u64>, rows: &[Vec<f32>]) -> Result<Self> {
        let dim = rows.first().map(Vec::len).ok_or(EmbedError::InvalidDim)?;
        let mut data = Vec::with_capacity(rows.len() * dim);
        for row in rows {
            if row.len() != dim {
                return Err(EmbedError::DimMismatch {
                    left: dim,
                    right: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Self::new(ids, dim, data)
    }

    fn validate(ids: &[u64], dim: usize, data: &[f32]) -> Result<()> {
        if dim == 0 {
            return Err(EmbedError::InvalidDim);
        }
        if data.len() != ids.len() * dim {
            return Err(EmbedError::ShapeMismatch {
                ids: ids.len(),
                dim,
                values: data.len(),
            });
        }
        for pair in ids.windows(2) {
            if pair[0] == pair[1] {
                return Err(EmbedError::DuplicateId(pair[1]));
            }
            if pair[0] > pair[1] {
                return Err(EmbedError::UnsortedIds(pair[1]));
            }
        }
        for (id, row) in ids.iter().zip(data.chunks_exact(dim)) {
            if row.iter().any(|v| !v.is_finite()) {
                return Err(EmbedError::NonFiniteValue(*id));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn row(&self, index: usize) -> &[f32] {
        &self.data[index * self.dim..(index + 1) * self.dim]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f32> {
        self.data.chunks_exact(self.dim)
    }

    pub fn iter(&self) -> impl Iterator<Item = (u64, &[f32])> {
        self.ids.iter().copied().zip(self.rows())
    }

    /// Row index of `id`, by binary search over the sorted ids.
    pub fn index_of(&self, id: u64) -> Option<usize> {
        self.ids.binary_search(&id).ok()
    }

    /// Subset containing the given ids (in ascending id order).
    pub fn select(&self, ids: &[u64]) -> Result<Self> {
        let mut wanted = ids.to_vec();
        wanted.sort_unstable();
        wanted.dedup();
        let mut data = Vec::with_capacity(wanted.len() * self.dim);
        for &id in &wanted {
            let index = self.index_of(id).ok_or(EmbedError::UnknownId(id))?;
            data.extend_from_slice(self.row(index));
        }
        Ok(Self {
            ids: wanted,
            dim: self.dim,
            data,
            normalized: self.normalized,
        })
    }

    fn require_normalized(&self) -> Result<()> {
        if self.normalized {
            Ok(())
        } else {
            Err(EmbedError::NotNormalized(
                self.ids.first().copied().unwrap_or(0),
            ))
        }
    }
}

/// Fixed-order dot product with an `f64` accumulator.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    let mut acc = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        acc += f64::from(*x) * f64::from(*y);
    }
    acc
}

#[inline]
pub fn l2_norm(a: &[f32]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity of two raw vectors.
pub fn cosine_sim(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(EmbedError::DimMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    let (na, nb) = (l2_norm(a), l2_norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(EmbedError::ZeroVector);
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Scales every row to unit L2 norm.
pub fn normalize(set: &EmbeddingSet) -> Result<EmbeddingSet> {
    let mut data = Vec::with_capacity(set.data.len());
    for (id, row) in set.iter() {
        let norm = l2_norm(row);
        if norm == 0.0 {
            return Err(EmbedError::ZeroVectorRow(id));
        }
        data.extend(row.iter().map(|&v| (f64::from(v) / norm) as f32));
    }
    Ok(EmbeddingSet {
        ids: set.ids.clone(),
        dim: set.dim,
        data,
        normalized: true,
    })
}

/// Dense `texts.len() × videos.len()` score matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SimMatrix {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl SimMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }
}

/// Cosine similarities between two normalized sets. Rows are computed in
/// parallel; each entry is a fixed-order [`dot`], so the output is identical
/// for any worker count.
pub fn sim_matrix(texts: &EmbeddingSet, videos: &EmbeddingSet) -> Result<SimMatrix> {
    if texts.dim != videos.dim {
        return Err(EmbedError::DimMismatch {
            left: texts.dim,
            right: videos.dim,
        });
    }
    texts.require_normalized()?;
    videos.require_normalized()?;
    let cols = videos.len();
    let mut values = vec![0.0f64; texts.len() * cols];
    if cols > 0 {
        values
            .par_chunks_mut(cols)
            .enumerate()
            .for_each(|(i, out)| {
                let t = texts.row(i);
                for (slot, v) in out.iter_mut().zip(videos.rows()) {
                    *slot = dot(t, v);
                }
            });
    }
    Ok(SimMatrix {
        rows: texts.len(),
        cols,
        values,
    })
}

/// Checks two normalized sets share a dimension; used by stages that take a
/// query side and a clip side.
pub(crate) fn check_pair(a: &EmbeddingSet, b: &EmbeddingSet) -> Result<()> {
    if a.dim != b.dim {
        return Err(EmbedError::DimMismatch {
            left: a.dim,
            right: b.dim,
        });
    }
    a.require_normalized()?;
    b.require_normalized()
}
