use std::borrow::Cow;
use std::fs::File;
use std::os::unix::fs::FileExt;
use std::path::Path;

use super::filter::{CategoricalField, CompiledFilter, Dictionary, FilterSpec, NumericField};
use super::format::{
    decode_block, decode_directory, decode_entry, decode_meta, entry_record_len, Bytes, DirectoryEntry, Header,
    DIRECTORY_ENTRY_LEN, HEADER_LEN,
};
use super::index::{probe_order, resolve_scan, ScanState};
use super::{IndexError, NumericBounds, SearchOverrides, SearchResult, VectorIndex, Vocabulary};
use crate::embedding::EmbeddingVector;

/// Searches an index file in place. Only the header, centroids, dictionary and
/// partition directory are held in memory; probed partition blocks and the
/// entry records of rescored candidates are read per query with positioned
/// reads, each verified against its checksum.
#[derive(Debug)]
pub struct DiskIndex {
    file: File,
    header: Header,
    centroids: Vec<f32>,
    dict: Dictionary,
    bounds: [Option<NumericBounds>; 2],
    directory: Vec<DirectoryEntry>,
}

impl DiskIndex {
    pub fn open(path: &Path) -> Result<Self, IndexError> {
        let file = File::open(path)?;
        let actual_len = file.metadata()?.len();
        let mut head = vec![0u8; HEADER_LEN.min(actual_len as usize)];
        read_at(&file, &mut head, 0)?;
        let header = Header::decode(&head)?;
        if header.file_len != actual_len {
            return Err(if actual_len < header.file_len {
                IndexError::Truncated
            } else {
                IndexError::Corrupt("trailing bytes after index".into())
            });
        }
        header.check_layout()?;

        let mut meta = vec![0u8; (header.entries_offset - header.centroids_offset) as usize];
        read_at(&file, &mut meta, header.centroids_offset)?;
        if crc32fast::hash(&meta) != header.meta_crc {
            return Err(IndexError::ChecksumMismatch("dictionary"));
        }
        let centroid_len = header.centroid_count() * header.dim;
        let mut centroids = Vec::with_capacity(centroid_len);
        Bytes::new(&meta).f32s(centroid_len, &mut centroids)?;
        let (dict, bounds) = decode_meta(&meta[centroid_len * 4..])?;

        let mut dir = vec![0u8; header.config.num_partitions * DIRECTORY_ENTRY_LEN];
        read_at(&file, &mut dir, header.directory_offset)?;
        if crc32fast::hash(&dir) != header.directory_crc {
            return Err(IndexError::ChecksumMismatch("directory"));
        }
        let directory = decode_directory(&dir)?;
        let blocks_start = header.entries_offset + header.entry_count * entry_record_len(header.dim) as u64;
        if directory.iter().any(|d| d.offset < blocks_start || d.offset + d.byte_len > header.directory_offset) {
            return Err(IndexError::Corrupt("partition block outside its section".into()));
        }
        Ok(Self { file, header, centroids, dict, bounds, directory })
    }

    pub fn partition_sizes(&self) -> Vec<usize> {
        self.directory.iter().map(|d| d.members as usize).collect()
    }

    fn read_vector(&self, ord: u32) -> Result<Vec<f32>, IndexError> {
        if ord as u64 >= self.header.entry_count {
            return Err(IndexError::Corrupt(format!("entry ordinal {ord} out of range")));
        }
        let len = entry_record_len(self.header.dim);
        let mut buf = vec![0u8; len];
        read_at(&self.file, &mut buf, self.header.entries_offset + ord as u64 * len as u64)?;
        let mut v = Vec::with_capacity(self.header.dim);
        decode_entry(&buf, self.header.dim, &mut v)?;
        Ok(v)
    }
}

fn read_at(file: &File, buf: &mut [u8], offset: u64) -> Result<(), IndexError> {
    file.read_exact_at(buf, offset).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => IndexError::Truncated,
        _ => IndexError::Io(e),
    })
}

impl VectorIndex for DiskIndex {
    fn search(
        &self,
        query: &EmbeddingVector,
        k: usize,
        filter: &FilterSpec,
        overrides: SearchOverrides,
    ) -> Result<Vec<SearchResult>, IndexError> {
        let (nprobe, budget) = resolve_scan(&self.header.config, k, overrides)?;
        if !self.is_trained() {
            return Err(IndexError::Untrained);
        }
        let dim = self.header.dim;
        if query.dim() != dim {
            return Err(IndexError::DimensionMismatch { expected: dim, got: query.dim() });
        }
        filter.validate()?;
        let compiled = CompiledFilter::compile(filter, &self.dict);
        let q = query.as_slice();
        let mut state = ScanState::new(q, &compiled, self.header.entry_count as usize, budget);
        let mut buf = Vec::new();
        for p in probe_order(&self.centroids, dim, q, nprobe) {
            let d = self.directory[p];
            buf.resize(d.byte_len as usize, 0);
            read_at(&self.file, &mut buf, d.offset)?;
            if crc32fast::hash(&buf) != d.crc {
                return Err(IndexError::ChecksumMismatch("partition block"));
            }
            let block = decode_block(&buf, d.members as usize, dim, self.header.config.quantization)?;
            if block.ords.iter().any(|&o| o as u64 >= self.header.entry_count) {
                return Err(IndexError::Corrupt("partition member ordinal out of range".into()));
            }
            state.scan(&block);
        }
        state.finish(k, &self.dict, |ord| self.read_vector(ord).map(Cow::Owned))
    }

    fn len(&self) -> usize {
        self.header.entry_count as usize
    }

    fn dim(&self) -> usize {
        self.header.dim
    }

    fn is_trained(&self) -> bool {
        self.header.trained
    }

    fn generation(&self) -> u64 {
        self.header.generation
    }

    fn vocabulary(&self) -> Vocabulary {
        let mut vocab = Vocabulary::default();
        for field in CategoricalField::ALL {
            let mut tokens = self.dict.tokens[field.index()].clone();
            tokens.sort();
            vocab.categorical.insert(field, tokens);
        }
        for field in NumericField::ALL {
            vocab.numeric.insert(field, self.bounds[field.index()]);
        }
        vocab
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ann::{save, AttributeSet, IndexConfig, PartitionedIndex, Quantization, VectorEntry};
    use crate::embedding::l2_normalize;
    use crate::ids::ChunkId;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn disk_search_matches_memory_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let dim = 12;
        let vecs: Vec<_> = (0..300)
            .map(|_| l2_normalize((0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect()).unwrap())
            .collect();
        let cfg = IndexConfig { num_partitions: 8, nprobe: 3, spill: 2, rescore_budget: 30, quantization: Quantization::Scalar8 };
        let mut idx = PartitionedIndex::new(cfg, dim).unwrap();
        idx.train(&vecs, 1).unwrap();
        idx.insert(
            vecs.iter()
                .enumerate()
                .map(|(i, v)| VectorEntry {
                    chunk_id: ChunkId::new(i as u64, 0),
                    vector: v.clone(),
                    attributes: AttributeSet::default().with(CategoricalField::Department, format!("d{}", i % 4)),
                })
                .collect(),
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("i.bin");
        save(&idx, &path).unwrap();
        let disk = DiskIndex::open(&path).unwrap();
        assert_eq!(disk.vocabulary(), idx.vocabulary());
        assert_eq!(disk.partition_sizes(), idx.partition_sizes());
        let filter = FilterSpec::new().include(CategoricalField::Department, ["d1", "d2"]);
        for q in vecs.iter().step_by(17) {
            for f in [FilterSpec::new(), filter.clone()] {
                for o in [SearchOverrides::default(), SearchOverrides::exhaustive()] {
                    assert_eq!(disk.search(q, 7, &f, o).unwrap(), idx.search(q, 7, &f, o).unwrap());
                }
            }
        }
    }
}
