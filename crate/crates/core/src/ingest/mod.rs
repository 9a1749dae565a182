//! Corpus pipeline: partition notes by filed month, chunk, embed, insert into
//! the index and store the notes. Each partition leaves a manifest so a
//! failed or repeated run resumes without duplicating work.

mod cache;
mod synth;

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use synth::{
    generate_synthetic_corpus, read_facts, FactKind, PlantedFact, SyntheticCorpus, SyntheticCorpusSpec, CONDITIONS,
    FACTS_FILE, INJURIES, NOTES_FILE, ONSET_AGES,
};

use crate::ann::{IndexConfig, IndexError, PartitionedIndex, SharedIndex, VectorEntry};
use crate::chunker::{Chunk, ChunkError, Chunker, ChunkingConfig};
use crate::embedding::{embed_with_retry, EmbedError, Embedder, EmbeddingVector};
use crate::ids::NoteId;
use crate::store::{NoteRecord, NoteStore, StoreError};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("invalid corpus spec: {0}")]
    InvalidSpec(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed file: {0}")]
    Format(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Chunk(#[from] ChunkError),
    #[error("injected failure after the {0:?} stage")]
    Injected(Stage),
    #[error("partition {key} failed: {message}")]
    Partition { key: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Embed,
    Insert,
    Store,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionStatus {
    Pending,
    /// Chunk embeddings are cached on disk.
    Embedded,
    /// Vectors are in the index and notes are in the store.
    Indexed,
    Failed,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Checksums {
    /// SHA-256 over the partition's input notes, one JSON line each, in id order.
    pub notes: String,
    /// SHA-256 over the chunk manifest lines.
    pub chunks: String,
    /// SHA-256 of the embedding cache file.
    pub embeddings: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionManifest {
    /// `YYYY-MM` of the notes' filed time.
    pub partition_key: String,
    /// Set for incremental batches, which get their own manifest.
    pub batch: Option<String>,
    pub note_count: usize,
    pub chunk_count: usize,
    pub status: PartitionStatus,
    /// Furthest stage completed; survives a failure so a rerun can resume.
    pub progress: PartitionStatus,
    pub checksums: Checksums,
    pub excluded_note_ids: Vec<NoteId>,
    pub error: Option<String>,
}

impl PartitionManifest {
    pub fn name(&self) -> String {
        match &self.batch {
            Some(b) => format!("{}~{b}", self.partition_key),
            None => self.partition_key.clone(),
        }
    }
}

pub type NotePredicate = Arc<dyn Fn(&NoteRecord) -> bool + Send + Sync>;

#[derive(Clone)]
pub struct IngestOptions {
    pub embed_batch: usize,
    pub embed_attempts: usize,
    pub retry_backoff: Duration,
    /// Notes for which this returns true are never chunked, embedded or stored.
    pub exclude: Option<NotePredicate>,
    /// Testing hook: fail right after the given stage completes.
    pub fail_after: Option<Stage>,
}

impl Default for IngestOptions {
    fn default() -> Self {
        Self { embed_batch: 64, embed_attempts: 3, retry_backoff: Duration::from_millis(200), exclude: None, fail_after: None }
    }
}

impl std::fmt::Debug for IngestOptions {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("IngestOptions")
            .field("embed_batch", &self.embed_batch)
            .field("embed_attempts", &self.embed_attempts)
            .field("exclude", &self.exclude.is_some())
            .field("fail_after", &self.fail_after)
            .finish()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UpdateReport {
    pub added_notes: usize,
    pub added_chunks: usize,
    pub skipped_duplicates: Vec<NoteId>,
    pub excluded: Vec<NoteId>,
    pub manifests: Vec<String>,
}

/// Groups notes by `YYYY-MM` of their filed time.
pub fn partition_notes(notes: &[NoteRecord]) -> BTreeMap<String, Vec<NoteRecord>> {
    let mut out: BTreeMap<String, Vec<NoteRecord>> = BTreeMap::new();
    for n in notes {
        out.entry(n.partition_key()).or_default().push(n.clone());
    }
    for v in out.values_mut() {
        v.sort_by_key(|n| n.note_id);
    }
    out
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn notes_checksum(notes: &[NoteRecord]) -> String {
    let mut sorted: Vec<&NoteRecord> = notes.iter().collect();
    sorted.sort_by_key(|n| n.note_id);
    let mut h = Sha256::new();
    for n in sorted {
        h.update(serde_json::to_vec(n).expect("note serializes"));
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::File::open(&tmp)?.sync_all()?;
    std::fs::rename(tmp, path)
}

/// Chunks and embeddings of a partition, ready to commit.
struct Prepared {
    manifest: PartitionManifest,
    notes: Vec<NoteRecord>,
    chunks: Vec<Chunk>,
    vectors: Vec<EmbeddingVector>,
}

pub struct IngestPipeline {
    embedder: Arc<dyn Embedder>,
    index: Arc<SharedIndex>,
    store: Arc<NoteStore>,
    chunker: Chunker,
    work_dir: PathBuf,
    options: IngestOptions,
}

impl std::fmt::Debug for IngestPipeline {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("IngestPipeline").field("work_dir", &self.work_dir).field("options", &self.options).finish()
    }
}

impl IngestPipeline {
    /// `work_dir` holds manifests, chunk manifests and the embedding cache.
    pub fn new(
        embedder: Arc<dyn Embedder>,
        index: Arc<SharedIndex>,
        store: Arc<NoteStore>,
        chunking: ChunkingConfig,
        work_dir: &Path,
        options: IngestOptions,
    ) -> Result<Self, IngestError> {
        for sub in ["manifests", "chunks", "embeddings"] {
            std::fs::create_dir_all(work_dir.join(sub))?;
        }
        Ok(Self { embedder, index, store, chunker: Chunker::new(chunking)?, work_dir: work_dir.to_path_buf(), options })
    }

    pub fn options_mut(&mut self) -> &mut IngestOptions {
        &mut self.options
    }

    fn manifest_path(&self, name: &str) -> PathBuf {
        self.work_dir.join("manifests").join(format!("{name}.json"))
    }

    pub fn load_manifest(&self, name: &str) -> Result<Option<PartitionManifest>, IngestError> {
        let path = self.manifest_path(name);
        if !path.exists() {
            return Ok(None);
        }
        let m = serde_json::from_slice(&std::fs::read(&path)?).map_err(|e| IngestError::Format(format!("{}: {e}", path.display())))?;
        Ok(Some(m))
    }

    /// Every manifest in the work directory, by name.
    pub fn manifests(&self) -> Result<Vec<PartitionManifest>, IngestError> {
        let mut names: Vec<String> = std::fs::read_dir(self.work_dir.join("manifests"))?
            .filter_map(|e| e.ok())
            .filter_map(|e| e.file_name().to_str().and_then(|n| n.strip_suffix(".json")).map(str::to_string))
            .collect();
        names.sort();
        names.iter().filter_map(|n| self.load_manifest(n).transpose()).collect()
    }

    fn save_manifest(&self, m: &PartitionManifest) -> Result<(), IngestError> {
        let bytes = serde_json::to_vec_pretty(m).map_err(|e| IngestError::Format(e.to_string()))?;
        write_atomic(&self.manifest_path(&m.name()), &bytes)?;
        Ok(())
    }

    fn check_fault(&self, stage: Stage) -> Result<(), IngestError> {
        if self.options.fail_after == Some(stage) {
            return Err(IngestError::Injected(stage));
        }
        Ok(())
    }

    /// Runs every stage for one partition. Rerunning a completed partition
    /// with the same notes changes nothing.
    pub fn run_partition(&self, partition_key: &str, notes: &[NoteRecord]) -> Result<PartitionManifest, IngestError> {
        self.run_named(partition_key, None, notes)
    }

    fn run_named(&self, key: &str, batch: Option<String>, notes: &[NoteRecord]) -> Result<PartitionManifest, IngestError> {
        match self.prepare(key, batch, notes)? {
            Ok(done) => Ok(done),
            Err(prepared) => self.commit(prepared),
        }
    }

    /// Ingests a whole corpus: partitions are chunked and embedded in
    /// parallel, then committed one at a time in key order.
    pub fn ingest(&self, notes: &[NoteRecord]) -> Result<Vec<PartitionManifest>, IngestError> {
        let partitions = partition_notes(notes);
        let prepared: Vec<_> = partitions
            .par_iter()
            .map(|(key, notes)| self.prepare(key, None, notes))
            .collect::<Result<Vec<_>, _>>()?;
        prepared
            .into_iter()
            .map(|p| match p {
                Ok(done) => Ok(done),
                Err(prepared) => self.commit(prepared),
            })
            .collect()
    }

    /// `Ok(manifest)` when the partition is already complete, otherwise the
    /// prepared work to commit.
    fn prepare(
        &self,
        key: &str,
        batch: Option<String>,
        notes: &[NoteRecord],
    ) -> Result<Result<PartitionManifest, Prepared>, IngestError> {
        let name = match &batch {
            Some(b) => format!("{key}~{b}"),
            None => key.to_string(),
        };
        let notes_sum = notes_checksum(notes);
        let previous = self.load_manifest(&name)?;
        if let Some(p) = &previous {
            if p.status == PartitionStatus::Indexed && p.checksums.notes == notes_sum {
                return Ok(Ok(p.clone()));
            }
        }
        let (eligible, excluded): (Vec<NoteRecord>, Vec<NoteRecord>) = notes
            .iter()
            .cloned()
            .partition(|n| n.validate().is_ok() && !self.options.exclude.as_ref().is_some_and(|f| f(n)));
        let mut manifest = PartitionManifest {
            partition_key: key.to_string(),
            batch,
            note_count: eligible.len(),
            chunk_count: 0,
            status: PartitionStatus::Pending,
            progress: PartitionStatus::Pending,
            checksums: Checksums { notes: notes_sum, ..Checksums::default() },
            excluded_note_ids: excluded.iter().map(|n| n.note_id).collect(),
            error: None,
        };
        let result = self.chunk_and_embed(&name, &mut manifest, &eligible, previous.as_ref());
        match result {
            Ok((chunks, vectors)) => Ok(Err(Prepared { manifest, notes: eligible, chunks, vectors })),
            Err(e) => Err(self.fail(manifest, e)),
        }
    }

    fn chunk_and_embed(
        &self,
        name: &str,
        manifest: &mut PartitionManifest,
        notes: &[NoteRecord],
        previous: Option<&PartitionManifest>,
    ) -> Result<(Vec<Chunk>, Vec<EmbeddingVector>), IngestError> {
        let chunks: Vec<Chunk> = notes.iter().flat_map(|n| self.chunker.chunk(n.note_id, &n.text)).collect();
        let mut lines = Vec::new();
        for c in &chunks {
            serde_json::to_writer(&mut lines, &c.manifest_line()).map_err(|e| IngestError::Format(e.to_string()))?;
            lines.push(b'\n');
        }
        write_atomic(&self.work_dir.join("chunks").join(format!("{name}.jsonl")), &lines)?;
        manifest.chunk_count = chunks.len();
        manifest.checksums.chunks = sha256_hex(&lines);

        let cache_path = self.work_dir.join("embeddings").join(format!("{name}.bin"));
        let reusable = previous.filter(|p| {
            p.progress >= PartitionStatus::Embedded
                && p.checksums.notes == manifest.checksums.notes
                && p.checksums.chunks == manifest.checksums.chunks
        });
        if let Some(p) = reusable {
            if let Ok((bytes, vectors)) = cache::read(&cache_path, &chunks, self.embedder.dimension()) {
                if sha256_hex(&bytes) == p.checksums.embeddings {
                    manifest.checksums.embeddings = p.checksums.embeddings.clone();
                    manifest.status = PartitionStatus::Embedded;
                    manifest.progress = PartitionStatus::Embedded;
                    return Ok((chunks, vectors));
                }
            }
            tracing::warn!(partition = name, "embedding cache unusable, re-embedding");
        }

        let mut vectors = Vec::with_capacity(chunks.len());
        for batch in chunks.chunks(self.options.embed_batch.max(1)) {
            let texts: Vec<String> = batch.iter().map(|c| c.text.clone()).collect();
            let got = embed_with_retry(self.embedder.as_ref(), &texts, self.options.embed_attempts, self.options.retry_backoff)?;
            if got.len() != texts.len() {
                return Err(EmbedError::Permanent(format!("expected {} vectors, got {}", texts.len(), got.len())).into());
            }
            vectors.extend(got);
        }
        let bytes = cache::encode(&chunks, &vectors, self.embedder.dimension());
        write_atomic(&cache_path, &bytes)?;
        manifest.checksums.embeddings = sha256_hex(&bytes);
        manifest.status = PartitionStatus::Embedded;
        manifest.progress = PartitionStatus::Embedded;
        self.save_manifest(manifest)?;
        self.check_fault(Stage::Embed)?;
        Ok((chunks, vectors))
    }

    fn commit(&self, prepared: Prepared) -> Result<PartitionManifest, IngestError> {
        let Prepared { mut manifest, notes, chunks, vectors } = prepared;
        let result = (|| -> Result<(), IngestError> {
            let by_id: BTreeMap<NoteId, &NoteRecord> = notes.iter().map(|n| (n.note_id, n)).collect();
            let entries: Vec<VectorEntry> = chunks
                .iter()
                .zip(vectors)
                .filter(|(c, _)| !self.index.contains(&c.id()))
                .map(|(c, vector)| VectorEntry { chunk_id: c.id(), vector, attributes: by_id[&c.note_id].attributes() })
                .collect();
            self.index.insert(entries)?;
            self.check_fault(Stage::Insert)?;
            for batch in notes.chunks(self.store.batch_cap()) {
                self.store.put_notes(batch)?;
            }
            self.check_fault(Stage::Store)?;
            Ok(())
        })();
        match result {
            Ok(()) => {
                manifest.status = PartitionStatus::Indexed;
                manifest.progress = PartitionStatus::Indexed;
                manifest.error = None;
                self.save_manifest(&manifest)?;
                Ok(manifest)
            }
            Err(e) => Err(self.fail(manifest, e)),
        }
    }

    fn fail(&self, mut manifest: PartitionManifest, e: IngestError) -> IngestError {
        manifest.status = PartitionStatus::Failed;
        manifest.error = Some(e.to_string());
        if let Err(save) = self.save_manifest(&manifest) {
            tracing::error!(partition = %manifest.name(), error = %save, "could not record partition failure");
        }
        e
    }

    /// Adds new notes to the live index. Notes already stored, or repeated
    /// within the batch, are skipped and reported.
    pub fn incremental_update(&self, notes: &[NoteRecord]) -> Result<UpdateReport, IngestError> {
        let mut report = UpdateReport::default();
        let mut seen = HashSet::new();
        let mut fresh = Vec::new();
        for n in notes {
            if !seen.insert(n.note_id) || self.store.contains(n.note_id)? {
                report.skipped_duplicates.push(n.note_id);
            } else {
                fresh.push(n.clone());
            }
        }
        for (key, group) in partition_notes(&fresh) {
            let ids: Vec<u8> = group.iter().flat_map(|n| n.note_id.0.to_le_bytes()).collect();
            let batch = sha256_hex(&ids)[..12].to_string();
            let m = self.run_named(&key, Some(batch), &group)?;
            report.added_notes += m.note_count;
            report.added_chunks += m.chunk_count;
            report.excluded.extend(m.excluded_note_ids.iter().copied());
            report.manifests.push(m.name());
        }
        Ok(report)
    }
}

/// Trains a fresh index on the embeddings of a seeded sample of chunks.
pub fn train_index(
    notes: &[NoteRecord],
    embedder: &dyn Embedder,
    chunking: ChunkingConfig,
    config: IndexConfig,
    seed: u64,
    sample_size: usize,
) -> Result<PartitionedIndex, IngestError> {
    let chunker = Chunker::new(chunking)?;
    let mut sorted: Vec<&NoteRecord> = notes.iter().filter(|n| n.validate().is_ok()).collect();
    sorted.sort_by_key(|n| n.note_id);
    let chunks: Vec<Chunk> = sorted.iter().flat_map(|n| chunker.chunk(n.note_id, &n.text)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked: Vec<usize> = (0..chunks.len()).collect::<Vec<_>>().choose_multiple(&mut rng, sample_size).copied().collect();
    picked.sort_unstable();
    let mut sample = Vec::with_capacity(picked.len());
    for batch in picked.chunks(256) {
        let texts: Vec<String> = batch.iter().map(|&i| chunks[i].text.clone()).collect();
        sample.extend(embedder.embed_documents(&texts)?);
    }
    let mut index = PartitionedIndex::new(config, embedder.dimension())?;
    index.train(&sample, seed)?;
    Ok(index)
}
