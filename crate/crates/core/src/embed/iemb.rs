//! IEMB binary container.
//!
//! Layout (little-endian):
//!
//! ```text
//! "IEMB" | version u32 = 1 | count u64 | dim u32 | flags u32
//! ids: count × u64
//! rows: count × dim × f32, row-major
//! [chunks, only when flags bit 1 is set]: tag [u8; 4] | len u64 | len bytes
//! ```
//!
//! Flag bit 0 marks unit-norm rows. Model files (style transforms, adapters)
//! are containers with an empty embedding payload and one tagged chunk.

use std::fs;
use std::path::Path;

use super::{EmbedError, EmbeddingSet, Result};

pub const MAGIC: [u8; 4] = *b"IEMB";
pub const VERSION: u32 = 1;
pub const FLAG_NORMALIZED: u32 = 1;
pub const FLAG_CHUNKS: u32 = 1 << 1;
const HEADER_LEN: usize = 24;

/// A tagged sub-chunk carried after the embedding payload.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Chunk {
    pub tag: [u8; 4],
    pub payload: Vec<u8>,
}

pub fn encode(set: &EmbeddingSet, chunks: &[Chunk]) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + set.len() * (8 + 4 * set.dim()));
    let mut flags = 0;
    if set.is_normalized() {
        flags |= FLAG_NORMALIZED;
    }
    if !chunks.is_empty() {
        flags |= FLAG_CHUNKS;
    }
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(set.len() as u64).to_le_bytes());
    out.extend_from_slice(&(set.dim() as u32).to_le_bytes());
    out.extend_from_slice(&flags.to_le_bytes());
    for id in set.ids() {
        out.extend_from_slice(&id.to_le_bytes());
    }
    for v in set.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for chunk in chunks {
        out.extend_from_slice(&chunk.tag);
        out.extend_from_slice(&(chunk.payload.len() as u64).to_le_bytes());
        out.extend_from_slice(&chunk.payload);
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<(EmbeddingSet, Vec<Chunk>)> {
    let actual = bytes.len() as u64;
    if bytes.len() < 4 {
        return Err(EmbedError::TruncatedFile {
            needed: HEADER_LEN as u64,
            actual,
        });
    }
    let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(EmbedError::MagicMismatch(magic));
    }
    if bytes.len() < HEADER_LEN {
        return Err(EmbedError::TruncatedFile {
            needed: HEADER_LEN as u64,
            actual,
        });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(EmbedError::VersionUnsupported(version));
    }
    let count = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let dim = u32::from_le_bytes(bytes[16..20].try_into().expect("4 bytes")) as u64;
    let flags = u32::from_le_bytes(bytes[20..24].try_into().expect("4 bytes"));

    let payload = count
        .checked_mul(8 + 4 * dim)
        .and_then(|p| p.checked_add(HEADER_LEN as u64))
        .ok_or(EmbedError::TruncatedFile {
            needed: u64::MAX,
            actual,
        })?;
    if actual < payload {
        return Err(EmbedError::TruncatedFile {
            needed: payload,
            actual,
        });
    }
    let count = count as usize;
    let ids_end = HEADER_LEN + 8 * count;
    let ids: Vec<u64> = bytes[HEADER_LEN..ids_end]
        .chunks_exact(8)
        .map(|b| u64::from_le_bytes(b.try_into().expect("8 bytes")))
        .collect();
    let data: Vec<f32> = bytes[ids_end..payload as usize]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
        .collect();
    let set = EmbeddingSet::with_flag(ids, dim as usize, data, flags & FLAG_NORMALIZED != 0)?;

    let mut rest = &bytes[payload as usize..];
    let mut chunks = Vec::new();
    if flags & FLAG_CHUNKS == 0 {
        if !rest.is_empty() {
            return Err(EmbedError::TrailingData(rest.len() as u64));
        }
        return Ok((set, chunks));
    }
    while !rest.is_empty() {
        if rest.len() < 12 {
            return Err(EmbedError::TruncatedFile {
                needed: actual + (12 - rest.len()) as u64,
                actual,
            });
        }
        let tag: [u8; 4] = rest[..4].try_into().expect("4 bytes");
        let len = u64::from_le_bytes(rest[4..12].try_into().expect("8 bytes"));
        let body = &rest[12..];
        if (body.len() as u64) < len {
            return Err(EmbedError::TruncatedFile {
                needed: actual - body.len() as u64 + len,
                actual,
            });
        }
        chunks.push(Chunk {
            tag,
            payload: body[..len as usize].to_vec(),
        });
        rest = &body[len as usize..];
    }
    Ok((set, chunks))
}

pub fn save_embeddings(path: impl AsRef<Path>, set: &EmbeddingSet) -> Result<()> {
    fs::write(path, encode(set, &[]))?;
    Ok(())
}

/// Reads an embedding set. Any trailing chunks are ignored.
pub fn load_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingSet> {
    let bytes = fs::read(path)?;
    decode(&bytes).map(|(set, _)| set)
}

pub fn save_container(path: impl AsRef<Path>, set: &EmbeddingSet, chunks: &[Chunk]) -> Result<()> {
    fs::write(path, encode(set, chunks))?;
    Ok(())
}

pub fn load_container(path: impl AsRef<Path>) -> Result<(EmbeddingSet, Vec<Chunk>)> {
    let bytes = fs::read(path)?;
    decode(&bytes)
}

/// Finds the first chunk with `tag`.
pub fn find_chunk<'a>(chunks: &'a [Chunk], tag: &[u8; 4]) -> Result<&'a Chunk> {
    chunks.iter().find(|c| &c.tag == tag).ok_or_else(|| {
        EmbedError::MalformedChunk(format!("missing {} chunk", String::from_utf8_lossy(tag)))
    })
}

/// Little-endian cursor over a chunk payload.
pub struct ChunkReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ChunkReader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                EmbedError::MalformedChunk(format!(
                    "payload ends at {} but {} more bytes were needed",
                    self.bytes.len(),
                    n
                ))
            })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    pub fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    pub fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let raw = self.take(len)?;
        String::from_utf8(raw.to_vec()).map_err(|e| EmbedError::MalformedChunk(e.to_string()))
    }

    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f64()).collect()
    }

    pub fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        (0..n).map(|_| self.f32()).collect()
    }

    pub fn finish(&self) -> Result<()> {
        if self.pos == self.bytes.len() {
            Ok(())
        } else {
            Err(EmbedError::MalformedChunk(format!(
                "{} unread bytes",
                self.bytes.len() - self.pos
            )))
        }
    }
}

#[derive(Default)]
pub struct ChunkWriter {
    bytes: Vec<u8>,
}

impl ChunkWriter {
    pub fn u32(&mut self, v: u32) -> &mut Self {
        self.bytes.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.bytes.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn f64(&mut self, v: f64) -> &mut Self {
        self.bytes.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn string(&mut self, s: &str) -> &mut Self {
        self.u32(s.len() as u32);
        self.bytes.extend_from_slice(s.as_bytes());
        self
    }

    pub fn f64s(&mut self, values: &[f64]) -> &mut Self {
        for v in values {
            self.f64(*v);
        }
        self
    }

    pub fn f32s(&mut self, values: impl IntoIterator<Item = f32>) -> &mut Self {
        for v in values {
            self.bytes.extend_from_slice(&v.to_le_bytes());
        }
        self
    }

    pub fn into_chunk(self, tag: [u8; 4]) -> Chunk {
        Chunk {
            tag,
            payload: self.bytes,
        }
    }
}
