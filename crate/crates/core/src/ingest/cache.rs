//! On-disk embedding cache for one partition.
//!
//! Layout, little-endian: magic `NSEMBCAC`, version u32, dim u32, count u64,
//! then per chunk `note_id u64, ordinal u32, dim × f32`, then a crc32 of
//! everything before it.

use std::path::Path;

use super::IngestError;
use crate::chunker::Chunk;
use crate::embedding::EmbeddingVector;

const MAGIC: &[u8; 8] = b"NSEMBCAC";
const VERSION: u32 = 1;

pub(super) fn encode(chunks: &[Chunk], vectors: &[EmbeddingVector], dim: usize) -> Vec<u8> {
    let mut b = Vec::with_capacity(24 + chunks.len() * (12 + 4 * dim) + 4);
    b.extend_from_slice(MAGIC);
    b.extend_from_slice(&VERSION.to_le_bytes());
    b.extend_from_slice(&(dim as u32).to_le_bytes());
    b.extend_from_slice(&(chunks.len() as u64).to_le_bytes());
    for (c, v) in chunks.iter().zip(vectors) {
        b.extend_from_slice(&c.note_id.0.to_le_bytes());
        b.extend_from_slice(&c.ordinal.to_le_bytes());
        for x in v.as_slice() {
            b.extend_from_slice(&x.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&b);
    b.extend_from_slice(&crc.to_le_bytes());
    b
}

/// Reads the cache back, checking that it covers exactly `chunks`.
pub(super) fn read(path: &Path, chunks: &[Chunk], dim: usize) -> Result<(Vec<u8>, Vec<EmbeddingVector>), IngestError> {
    let bytes = std::fs::read(path)?;
    let bad = |m: &str| IngestError::Format(format!("{}: {m}", path.display()));
    let record = 12 + 4 * dim;
    if bytes.len() < 28 || &bytes[..8] != MAGIC {
        return Err(bad("not an embedding cache"));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 4);
    if crc32fast::hash(body) != u32::from_le_bytes(trailer.try_into().unwrap()) {
        return Err(bad("checksum mismatch"));
    }
    let u32_at = |i: usize| u32::from_le_bytes(body[i..i + 4].try_into().unwrap());
    if u32_at(8) != VERSION || u32_at(12) as usize != dim {
        return Err(bad("version or dimension mismatch"));
    }
    let count = u64::from_le_bytes(body[16..24].try_into().unwrap()) as usize;
    if count != chunks.len() || body.len() != 24 + count * record {
        return Err(bad("chunk count mismatch"));
    }
    let mut vectors = Vec::with_capacity(count);
    for (c, rec) in chunks.iter().zip(body[24..].chunks_exact(record)) {
        let note = u64::from_le_bytes(rec[..8].try_into().unwrap());
        let ordinal = u32::from_le_bytes(rec[8..12].try_into().unwrap());
        if note != c.note_id.0 || ordinal != c.ordinal {
            return Err(bad("chunk ids differ from the partition's chunks"));
        }
        let v = rec[12..].chunks_exact(4).map(|x| f32::from_le_bytes(x.try_into().unwrap())).collect();
        vectors.push(EmbeddingVector::from_unit(v));
    }
    Ok((bytes, vectors))
}
