//! Binary index file. See `docs/index-format.md` for the byte layout.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::filter::Dictionary;
use super::index::{Payload, PartitionBlock, PartitionedIndex};
use super::quantize::Quantization;
use super::{IndexConfig, IndexError, NumericBounds};
use crate::ids::{ChunkId, NoteId};

pub const MAGIC: [u8; 8] = *b"NSVECIDX";
pub const FORMAT_VERSION: u32 = 1;

pub(crate) const HEADER_LEN: usize = 128;
pub(crate) const DIRECTORY_ENTRY_LEN: usize = 24;
const TRAILER_LEN: usize = 4;
const HEADER_CRC_AT: usize = 124;

pub(crate) fn entry_record_len(dim: usize) -> usize {
    8 + 4 + 7 * 4 + 2 * 8 + 4 * dim + 4
}

fn member_len(dim: usize, quantization: Quantization) -> usize {
    let payload = match quantization {
        Quantization::Scalar8 => 8 + dim,
        Quantization::None => 4 * dim,
    };
    4 + 8 + 4 + 7 * 4 + 2 * 8 + payload
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Header {
    pub(crate) config: IndexConfig,
    pub(crate) dim: usize,
    pub(crate) trained: bool,
    pub(crate) entry_count: u64,
    pub(crate) generation: u64,
    pub(crate) centroids_offset: u64,
    pub(crate) meta_offset: u64,
    pub(crate) entries_offset: u64,
    pub(crate) directory_offset: u64,
    pub(crate) file_len: u64,
    pub(crate) meta_crc: u32,
    pub(crate) directory_crc: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct DirectoryEntry {
    pub(crate) offset: u64,
    pub(crate) byte_len: u64,
    pub(crate) members: u32,
    pub(crate) crc: u32,
}

impl Header {
    fn encode(&self) -> [u8; HEADER_LEN] {
        let mut b = Vec::with_capacity(HEADER_LEN);
        b.extend_from_slice(&MAGIC);
        put_u32(&mut b, FORMAT_VERSION);
        put_u32(&mut b, self.dim as u32);
        put_u32(&mut b, self.config.num_partitions as u32);
        put_u32(&mut b, self.config.nprobe as u32);
        put_u32(&mut b, self.config.spill as u32);
        b.push(self.config.quantization.tag() as u8);
        b.push(self.trained as u8);
        b.extend_from_slice(&[0, 0]);
        put_u64(&mut b, self.config.rescore_budget as u64);
        put_u64(&mut b, self.entry_count);
        put_u64(&mut b, self.generation);
        put_u64(&mut b, self.centroids_offset);
        put_u64(&mut b, self.meta_offset);
        put_u64(&mut b, self.entries_offset);
        put_u64(&mut b, self.directory_offset);
        put_u64(&mut b, self.file_len);
        put_u32(&mut b, self.meta_crc);
        put_u32(&mut b, self.directory_crc);
        b.resize(HEADER_CRC_AT, 0);
        let crc = crc32fast::hash(&b);
        put_u32(&mut b, crc);
        b.try_into().expect("header is fixed size")
    }

    pub(crate) fn decode(b: &[u8]) -> Result<Self, IndexError> {
        if b.len() < MAGIC.len() || b[..MAGIC.len()] != MAGIC {
            return Err(if b.len() < MAGIC.len() { IndexError::Truncated } else { IndexError::BadMagic });
        }
        if b.len() < HEADER_LEN {
            return Err(IndexError::Truncated);
        }
        let mut r = Bytes::new(&b[MAGIC.len()..HEADER_LEN]);
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(IndexError::UnsupportedVersion(version));
        }
        let stored = u32::from_le_bytes(b[HEADER_CRC_AT..HEADER_LEN].try_into().unwrap());
        if crc32fast::hash(&b[..HEADER_CRC_AT]) != stored {
            return Err(IndexError::ChecksumMismatch("header"));
        }
        let dim = r.u32()? as usize;
        let num_partitions = r.u32()? as usize;
        let nprobe = r.u32()? as usize;
        let spill = r.u32()? as usize;
        let quantization = Quantization::from_tag(r.u8()? as u32)
            .ok_or_else(|| IndexError::Corrupt("unknown quantization tag".into()))?;
        let trained = r.u8()? != 0;
        r.take(2)?;
        let rescore_budget = r.u64()? as usize;
        let config = IndexConfig { num_partitions, nprobe, spill, rescore_budget, quantization };
        config.validate().map_err(|e| IndexError::Corrupt(e.to_string()))?;
        if dim == 0 {
            return Err(IndexError::Corrupt("zero dimension".into()));
        }
        Ok(Self {
            config,
            dim,
            trained,
            entry_count: r.u64()?,
            generation: r.u64()?,
            centroids_offset: r.u64()?,
            meta_offset: r.u64()?,
            entries_offset: r.u64()?,
            directory_offset: r.u64()?,
            file_len: r.u64()?,
            meta_crc: r.u32()?,
            directory_crc: r.u32()?,
        })
    }

    pub(crate) fn centroid_count(&self) -> usize {
        if self.trained {
            self.config.num_partitions
        } else {
            0
        }
    }

    /// Checks that the section offsets are consistent with the sizes they imply.
    pub(crate) fn check_layout(&self) -> Result<(), IndexError> {
        let centroids_len = (self.centroid_count() * self.dim * 4) as u64;
        let entries_len = self.entry_count.checked_mul(entry_record_len(self.dim) as u64);
        let ok = self.centroids_offset == HEADER_LEN as u64
            && self.meta_offset == self.centroids_offset + centroids_len
            && self.entries_offset >= self.meta_offset
            && entries_len.is_some_and(|l| self.entries_offset.checked_add(l).is_some_and(|e| e <= self.directory_offset))
            && self.directory_offset + (self.config.num_partitions * DIRECTORY_ENTRY_LEN) as u64 + TRAILER_LEN as u64
                <= self.file_len;
        if ok {
            Ok(())
        } else {
            Err(IndexError::Corrupt("inconsistent section offsets".into()))
        }
    }
}

/// Little-endian cursor over a byte slice.
pub(crate) struct Bytes<'a> {
    buf: &'a [u8],
}

impl<'a> Bytes<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8], IndexError> {
        if self.buf.len() < n {
            return Err(IndexError::Truncated);
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }

    pub(crate) fn u8(&mut self) -> Result<u8, IndexError> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u32(&mut self) -> Result<u32, IndexError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64, IndexError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f32(&mut self) -> Result<f32, IndexError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self) -> Result<f64, IndexError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f32s(&mut self, n: usize, out: &mut Vec<f32>) -> Result<(), IndexError> {
        let raw = self.take(n * 4)?;
        out.extend(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())));
        Ok(())
    }

    fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }
}

fn put_u32(b: &mut Vec<u8>, v: u32) {
    b.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(b: &mut Vec<u8>, v: u64) {
    b.extend_from_slice(&v.to_le_bytes());
}

fn put_f32s(b: &mut Vec<u8>, v: &[f32]) {
    for x in v {
        b.extend_from_slice(&x.to_le_bytes());
    }
}

fn put_attrs(b: &mut Vec<u8>, cat: &[u32; 7], num: &[f64; 2]) {
    for c in cat {
        put_u32(b, *c);
    }
    for n in num {
        b.extend_from_slice(&n.to_le_bytes());
    }
}

fn read_attrs(r: &mut Bytes<'_>) -> Result<([u32; 7], [f64; 2]), IndexError> {
    let mut cat = [0u32; 7];
    for c in &mut cat {
        *c = r.u32()?;
    }
    Ok((cat, [r.f64()?, r.f64()?]))
}

fn encode_meta(dict: &Dictionary, bounds: &[Option<NumericBounds>; 2]) -> Vec<u8> {
    let mut b = Vec::new();
    for tokens in &dict.tokens {
        put_u32(&mut b, tokens.len() as u32);
        for t in tokens {
            put_u32(&mut b, t.len() as u32);
            b.extend_from_slice(t.as_bytes());
        }
    }
    for bound in bounds {
        match bound {
            Some(NumericBounds { min, max }) => {
                b.push(1);
                b.extend_from_slice(&min.to_le_bytes());
                b.extend_from_slice(&max.to_le_bytes());
            }
            None => b.extend_from_slice(&[0; 17]),
        }
    }
    b
}

pub(crate) fn decode_meta(bytes: &[u8]) -> Result<(Dictionary, [Option<NumericBounds>; 2]), IndexError> {
    let mut r = Bytes::new(bytes);
    let mut tokens: [Vec<String>; 7] = Default::default();
    for field in &mut tokens {
        let count = r.u32()? as usize;
        for _ in 0..count {
            let len = r.u32()? as usize;
            let s = std::str::from_utf8(r.take(len)?).map_err(|_| IndexError::Corrupt("dictionary token is not UTF-8".into()))?;
            field.push(s.to_string());
        }
    }
    let mut bounds = [None; 2];
    for b in &mut bounds {
        let present = r.u8()?;
        let (min, max) = (r.f64()?, r.f64()?);
        if present != 0 {
            *b = Some(NumericBounds { min, max });
        }
    }
    if !r.is_empty() {
        return Err(IndexError::Corrupt("trailing bytes in dictionary section".into()));
    }
    Ok((Dictionary::from_tokens(tokens), bounds))
}

fn encode_entry(b: &mut Vec<u8>, id: ChunkId, cat: &[u32; 7], num: &[f64; 2], vector: &[f32]) {
    let start = b.len();
    put_u64(b, id.note.0);
    put_u32(b, id.ordinal);
    put_attrs(b, cat, num);
    put_f32s(b, vector);
    let crc = crc32fast::hash(&b[start..]);
    put_u32(b, crc);
}

pub(crate) struct EntryRecord {
    pub(crate) chunk_id: ChunkId,
    pub(crate) cat: [u32; 7],
    pub(crate) num: [f64; 2],
}

/// Decodes one entry record, appending its vector to `vector`.
pub(crate) fn decode_entry(bytes: &[u8], dim: usize, vector: &mut Vec<f32>) -> Result<EntryRecord, IndexError> {
    let body = bytes.len() - 4;
    let stored = u32::from_le_bytes(bytes[body..].try_into().unwrap());
    if crc32fast::hash(&bytes[..body]) != stored {
        return Err(IndexError::ChecksumMismatch("entry record"));
    }
    let mut r = Bytes::new(&bytes[..body]);
    let chunk_id = ChunkId { note: NoteId(r.u64()?), ordinal: r.u32()? };
    let (cat, num) = read_attrs(&mut r)?;
    r.f32s(dim, vector)?;
    Ok(EntryRecord { chunk_id, cat, num })
}

fn encode_block(b: &mut Vec<u8>, block: &PartitionBlock, dim: usize) {
    for i in 0..block.len() {
        put_u32(b, block.ords[i]);
        put_u64(b, block.chunk_ids[i].note.0);
        put_u32(b, block.chunk_ids[i].ordinal);
        put_attrs(b, &block.cat[i], &block.num[i]);
        match &block.payload {
            Payload::Scalar8 { params, codes } => {
                let [min, scale] = params[i];
                b.extend_from_slice(&min.to_le_bytes());
                b.extend_from_slice(&scale.to_le_bytes());
                b.extend_from_slice(&codes[i * dim..(i + 1) * dim]);
            }
            Payload::Full(v) => put_f32s(b, &v[i * dim..(i + 1) * dim]),
        }
    }
}

pub(crate) fn decode_block(
    bytes: &[u8],
    members: usize,
    dim: usize,
    quantization: Quantization,
) -> Result<PartitionBlock, IndexError> {
    if bytes.len() != members * member_len(dim, quantization) {
        return Err(IndexError::Corrupt("partition block length does not match member count".into()));
    }
    let mut block = PartitionBlock::empty(quantization);
    let mut r = Bytes::new(bytes);
    for _ in 0..members {
        block.ords.push(r.u32()?);
        block.chunk_ids.push(ChunkId { note: NoteId(r.u64()?), ordinal: r.u32()? });
        let (cat, num) = read_attrs(&mut r)?;
        block.cat.push(cat);
        block.num.push(num);
        match &mut block.payload {
            Payload::Scalar8 { params, codes } => {
                params.push([r.f32()?, r.f32()?]);
                codes.extend_from_slice(r.take(dim)?);
            }
            Payload::Full(v) => r.f32s(dim, v)?,
        }
    }
    Ok(block)
}

pub(crate) fn decode_directory(bytes: &[u8]) -> Result<Vec<DirectoryEntry>, IndexError> {
    let mut r = Bytes::new(bytes);
    let mut out = Vec::with_capacity(bytes.len() / DIRECTORY_ENTRY_LEN);
    while !r.is_empty() {
        out.push(DirectoryEntry { offset: r.u64()?, byte_len: r.u64()?, members: r.u32()?, crc: r.u32()? });
    }
    Ok(out)
}

struct CrcWriter<W> {
    inner: W,
    hasher: crc32fast::Hasher,
}

impl<W: Write> CrcWriter<W> {
    fn put(&mut self, bytes: &[u8]) -> std::io::Result<()> {
        self.hasher.update(bytes);
        self.inner.write_all(bytes)
    }
}

/// Writes the index atomically: a sibling temp file is fully written and
/// synced, then renamed over `path`.
pub fn save(index: &PartitionedIndex, path: &Path) -> Result<(), IndexError> {
    let dim = index.dim;
    let config = index.config;
    let meta = encode_meta(&index.dict, &index.bounds());
    let centroids_len = (index.centroids.len() * 4) as u64;
    let entries_offset = HEADER_LEN as u64 + centroids_len + meta.len() as u64;
    let entries_len = (index.len() * entry_record_len(dim)) as u64;

    let mut scratch = Vec::new();
    let mut directory = Vec::with_capacity(index.partitions.len());
    let mut offset = entries_offset + entries_len;
    for block in &index.partitions {
        scratch.clear();
        encode_block(&mut scratch, block, dim);
        directory.push(DirectoryEntry {
            offset,
            byte_len: scratch.len() as u64,
            members: block.len() as u32,
            crc: crc32fast::hash(&scratch),
        });
        offset += scratch.len() as u64;
    }
    let directory_offset = offset;
    let mut dir_bytes = Vec::with_capacity(directory.len() * DIRECTORY_ENTRY_LEN);
    for d in &directory {
        put_u64(&mut dir_bytes, d.offset);
        put_u64(&mut dir_bytes, d.byte_len);
        put_u32(&mut dir_bytes, d.members);
        put_u32(&mut dir_bytes, d.crc);
    }
    let mut centroid_bytes = Vec::with_capacity(centroids_len as usize);
    put_f32s(&mut centroid_bytes, &index.centroids);
    let mut meta_hasher = crc32fast::Hasher::new();
    meta_hasher.update(&centroid_bytes);
    meta_hasher.update(&meta);

    let header = Header {
        config,
        dim,
        trained: index.is_trained(),
        entry_count: index.len() as u64,
        generation: index.generation,
        centroids_offset: HEADER_LEN as u64,
        meta_offset: HEADER_LEN as u64 + centroids_len,
        entries_offset,
        directory_offset,
        file_len: directory_offset + dir_bytes.len() as u64 + TRAILER_LEN as u64,
        meta_crc: meta_hasher.finalize(),
        directory_crc: crc32fast::hash(&dir_bytes),
    };

    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let tmp = tempfile_path(path);
    let result = (|| -> Result<(), IndexError> {
        let file = File::create(&tmp)?;
        let mut w = CrcWriter { inner: BufWriter::with_capacity(1 << 20, file), hasher: crc32fast::Hasher::new() };
        w.put(&header.encode())?;
        w.put(&centroid_bytes)?;
        w.put(&meta)?;
        for ord in 0..index.len() {
            scratch.clear();
            encode_entry(&mut scratch, index.chunk_ids[ord], &index.cat[ord], &index.num[ord], index.vector_at(ord as u32));
            w.put(&scratch)?;
        }
        for block in &index.partitions {
            scratch.clear();
            encode_block(&mut scratch, block, dim);
            w.put(&scratch)?;
        }
        w.put(&dir_bytes)?;
        let trailer = w.hasher.clone().finalize();
        w.inner.write_all(&trailer.to_le_bytes())?;
        let file = w.inner.into_inner().map_err(|e| e.into_error())?;
        file.sync_all()?;
        Ok(())
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(e);
    }
    fs::rename(&tmp, path)?;
    if let Ok(d) = File::open(dir) {
        let _ = d.sync_all();
    }
    Ok(())
}

fn tempfile_path(path: &Path) -> std::path::PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(format!(".tmp-{}", std::process::id()));
    path.with_file_name(name)
}

struct CrcReader<R> {
    inner: R,
    hasher: crc32fast::Hasher,
}

impl<R: Read> CrcReader<R> {
    fn read_vec(&mut self, n: usize) -> Result<Vec<u8>, IndexError> {
        let mut buf = vec![0u8; n];
        self.read_into(&mut buf)?;
        Ok(buf)
    }

    fn read_into(&mut self, buf: &mut [u8]) -> Result<(), IndexError> {
        self.inner.read_exact(buf).map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => IndexError::Truncated,
            _ => IndexError::Io(e),
        })?;
        self.hasher.update(buf);
        Ok(())
    }
}

/// Loads an index file fully into memory, verifying every checksum.
pub fn load(path: &Path) -> Result<PartitionedIndex, IndexError> {
    let file = File::open(path)?;
    let actual_len = file.metadata()?.len();
    let mut r = CrcReader { inner: BufReader::with_capacity(1 << 20, file), hasher: crc32fast::Hasher::new() };

    let mut head = vec![0u8; HEADER_LEN.min(actual_len as usize)];
    r.read_into(&mut head)?;
    let header = Header::decode(&head)?;
    if header.file_len != actual_len {
        return Err(if actual_len < header.file_len { IndexError::Truncated } else { IndexError::Corrupt("trailing bytes after index".into()) });
    }
    header.check_layout()?;
    let dim = header.dim;
    let p = header.config.num_partitions;

    let centroid_bytes = r.read_vec(header.centroid_count() * dim * 4)?;
    let meta_bytes = r.read_vec((header.entries_offset - header.meta_offset) as usize)?;
    let mut meta_hasher = crc32fast::Hasher::new();
    meta_hasher.update(&centroid_bytes);
    meta_hasher.update(&meta_bytes);
    if meta_hasher.finalize() != header.meta_crc {
        return Err(IndexError::ChecksumMismatch("dictionary"));
    }
    let mut centroids = Vec::with_capacity(centroid_bytes.len() / 4);
    Bytes::new(&centroid_bytes).f32s(centroid_bytes.len() / 4, &mut centroids)?;
    let (dict, _) = decode_meta(&meta_bytes)?;

    let n = header.entry_count as usize;
    let mut chunk_ids = Vec::with_capacity(n);
    let mut vectors = Vec::with_capacity(n * dim);
    let mut cat = Vec::with_capacity(n);
    let mut num = Vec::with_capacity(n);
    let mut record = vec![0u8; entry_record_len(dim)];
    for _ in 0..n {
        r.read_into(&mut record)?;
        let e = decode_entry(&record, dim, &mut vectors)?;
        chunk_ids.push(e.chunk_id);
        cat.push(e.cat);
        num.push(e.num);
    }

    let blocks_len = (header.directory_offset - header.entries_offset) as usize - n * entry_record_len(dim);
    let block_bytes = r.read_vec(blocks_len)?;
    let dir_bytes = r.read_vec(p * DIRECTORY_ENTRY_LEN)?;
    if crc32fast::hash(&dir_bytes) != header.directory_crc {
        return Err(IndexError::ChecksumMismatch("directory"));
    }
    let computed = r.hasher.clone().finalize();
    let mut trailer = [0u8; TRAILER_LEN];
    r.inner.read_exact(&mut trailer).map_err(|_| IndexError::Truncated)?;
    if u32::from_le_bytes(trailer) != computed {
        return Err(IndexError::ChecksumMismatch("file"));
    }

    let blocks_start = header.entries_offset + (n * entry_record_len(dim)) as u64;
    let mut partitions = Vec::with_capacity(p);
    for d in decode_directory(&dir_bytes)? {
        let start = d.offset.checked_sub(blocks_start).ok_or_else(|| IndexError::Corrupt("block offset".into()))? as usize;
        let bytes = block_bytes
            .get(start..start + d.byte_len as usize)
            .ok_or_else(|| IndexError::Corrupt("block extends past section".into()))?;
        if crc32fast::hash(bytes) != d.crc {
            return Err(IndexError::ChecksumMismatch("partition block"));
        }
        let block = decode_block(bytes, d.members as usize, dim, header.config.quantization)?;
        for (ord, id) in block.ords.iter().zip(&block.chunk_ids) {
            if chunk_ids.get(*ord as usize) != Some(id) {
                return Err(IndexError::Corrupt(format!("partition member {id} does not match entry {ord}")));
            }
        }
        partitions.push(block);
    }
    Ok(PartitionedIndex::from_parts(
        header.config,
        dim,
        centroids,
        chunk_ids,
        vectors,
        cat,
        num,
        dict,
        partitions,
        header.generation,
    ))
}
