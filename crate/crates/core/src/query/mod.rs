//! Governed search: embed, filtered ANN search, chunk-to-note collapse,
//! per-patient caps, allowlist, hydration and audit.

mod allowlist;
mod audit;
mod cohort;

use std::collections::{BTreeSet, HashMap, HashSet};
use std::sync::Arc;
use std::time::Instant;

use base64::engine::general_purpose::URL_SAFE_NO_PAD;
use base64::Engine as _;
use chrono::Utc;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use allowlist::Allowlist;
pub use audit::{read_audit_log, AuditLog, AuditOutcome, AuditRecord, StageLatency, AUDIT_SCHEMA_VERSION};
pub use cohort::{CohortAction, CohortStore, CohortWorkspace};

use crate::ann::{CategoricalField, FilterError, FilterSpec, IndexError, SearchOverrides, SearchResult, VectorIndex, Vocabulary};
use crate::chunker::{ChunkError, Chunker, ChunkingConfig};
use crate::embedding::{EmbedError, Embedder};
use crate::ids::NoteId;
use crate::store::{NoteRecord, NoteStore, StoreError};

pub const DEFAULT_NOTES_TO_RETRIEVE: usize = 20;
pub const DEFAULT_CANDIDATE_MULTIPLIER: usize = 5;

#[derive(Debug, Error)]
pub enum QueryError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error(transparent)]
    Filter(#[from] FilterError),
    #[error("embedding failed: {0}")]
    Embed(#[from] EmbedError),
    #[error("index error: {0}")]
    Index(IndexError),
    #[error("note store error: {0}")]
    Store(#[from] StoreError),
    #[error("search more requires a cursor from a previous response")]
    MissingCursor,
    #[error("cursor is malformed or belongs to a different request")]
    InvalidCursor,
    #[error("the index changed since this cursor was issued; run the search again")]
    StaleCursor,
    #[error("unknown workspace {0:?}")]
    UnknownWorkspace(String),
    /// Deliberately carries no note id.
    #[error("note is not available to this deployment")]
    Forbidden,
    #[error("note not found")]
    NotFound,
    #[error("storage error: {0}")]
    Storage(String),
    #[error("audit log unavailable: {0}")]
    Audit(#[from] std::io::Error),
}

impl From<IndexError> for QueryError {
    fn from(e: IndexError) -> Self {
        match e {
            IndexError::Filter(f) => QueryError::Filter(f),
            other => QueryError::Index(other),
        }
    }
}

/// Where the allowlist sits relative to the per-patient cap.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AllowlistStage {
    /// Cap first, then drop unapproved notes. A patient whose capped notes are
    /// all unapproved contributes nothing.
    #[default]
    AfterCap,
    /// Drop unapproved notes first so the cap only counts displayable notes.
    BeforeCap,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EngineConfig {
    /// Chunks retrieved per requested note, before collapsing to notes.
    pub candidate_multiplier: usize,
    /// Must match the chunking used at ingest; highlights are recovered by re-chunking.
    pub chunking: ChunkingConfig,
    pub allowlist_stage: AllowlistStage,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            candidate_multiplier: DEFAULT_CANDIDATE_MULTIPLIER,
            chunking: ChunkingConfig::default(),
            allowlist_stage: AllowlistStage::default(),
        }
    }
}

fn default_k() -> usize {
    DEFAULT_NOTES_TO_RETRIEVE
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchRequest {
    pub question: String,
    #[serde(default)]
    pub filter: FilterSpec,
    /// Number of notes (not chunks) per page.
    #[serde(default = "default_k")]
    pub notes_to_retrieve: usize,
    /// `None` means unlimited.
    #[serde(default)]
    pub notes_per_patient: Option<usize>,
    #[serde(default)]
    pub include_mrns: Vec<String>,
    #[serde(default)]
    pub exclude_mrns: Vec<String>,
    /// Cohort workspace whose excluded MRNs are removed from results.
    #[serde(default)]
    pub workspace: Option<String>,
    #[serde(default)]
    pub index: SearchOverrides,
}

impl SearchRequest {
    pub fn new(question: impl Into<String>) -> Self {
        Self {
            question: question.into(),
            filter: FilterSpec::default(),
            notes_to_retrieve: DEFAULT_NOTES_TO_RETRIEVE,
            notes_per_patient: None,
            include_mrns: Vec::new(),
            exclude_mrns: Vec::new(),
            workspace: None,
            index: SearchOverrides::default(),
        }
    }

    pub fn validate(&self) -> Result<(), QueryError> {
        if self.question.trim().is_empty() {
            return Err(QueryError::InvalidRequest("question must not be empty".into()));
        }
        if self.notes_to_retrieve == 0 {
            return Err(QueryError::InvalidRequest("notes_to_retrieve must be at least 1".into()));
        }
        if self.notes_per_patient == Some(0) {
            return Err(QueryError::InvalidRequest("notes_per_patient must be at least 1".into()));
        }
        let include: HashSet<&String> = self.include_mrns.iter().collect();
        if let Some(both) = self.exclude_mrns.iter().find(|m| include.contains(m)) {
            return Err(QueryError::InvalidRequest(format!("mrn {both:?} is both included and excluded")));
        }
        self.filter.validate()?;
        Ok(())
    }

    fn fingerprint(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("request serializes");
        hex::encode(&Sha256::digest(&canonical)[..16])
    }
}

/// Merges MRN scoping and workspace exclusions into the request's filter.
/// Requested MRNs narrow any existing patient include list; exclusions are
/// unioned and win over inclusions.
pub fn scoped_filter(req: &SearchRequest, workspace: Option<&CohortWorkspace>) -> FilterSpec {
    let mut filter = req.filter.clone();
    let mut clause = filter.categorical.remove(&CategoricalField::PatientId).unwrap_or_default();
    if !req.include_mrns.is_empty() {
        let requested: BTreeSet<String> = req.include_mrns.iter().cloned().collect();
        clause.include = Some(match clause.include.take() {
            Some(existing) => existing.intersection(&requested).cloned().collect(),
            None => requested,
        });
    }
    clause.exclude.extend(req.exclude_mrns.iter().cloned());
    if let Some(ws) = workspace {
        clause.exclude.extend(ws.excluded_mrns.iter().cloned());
    }
    if let Some(include) = &mut clause.include {
        include.retain(|m| !clause.exclude.contains(m));
    }
    if clause.include.is_some() || !clause.exclude.is_empty() {
        filter.categorical.insert(CategoricalField::PatientId, clause);
    }
    filter
}

/// A note with the score and ordinal of its best chunk.
#[derive(Debug, Clone, PartialEq)]
pub struct NoteCandidate {
    pub note_id: NoteId,
    pub patient_id: Option<String>,
    pub score: f64,
    pub best_chunk: u32,
}

/// Collapses ranked chunks to notes, keeping each note's first (best) chunk.
pub fn collapse_to_notes(chunks: &[SearchResult]) -> Vec<NoteCandidate> {
    let mut seen = HashSet::new();
    chunks
        .iter()
        .filter(|r| seen.insert(r.note_id))
        .map(|r| NoteCandidate {
            note_id: r.note_id,
            patient_id: r.patient_id.clone(),
            score: r.score,
            best_chunk: r.chunk_id.ordinal,
        })
        .collect()
}

/// Keeps at most `cap` notes per patient, in the given order. Notes without
/// a patient are never capped.
pub fn cap_per_patient(notes: Vec<NoteCandidate>, cap: Option<usize>) -> Vec<NoteCandidate> {
    let Some(cap) = cap else { return notes };
    let mut counts: HashMap<String, usize> = HashMap::new();
    notes
        .into_iter()
        .filter(|n| match &n.patient_id {
            Some(p) => {
                let c = counts.entry(p.clone()).or_default();
                *c += 1;
                *c <= cap
            }
            None => true,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Highlight {
    pub chunk_ordinal: u32,
    /// Byte offsets into the note text.
    pub char_start: usize,
    pub char_end: usize,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchHit {
    /// 1-based across pages.
    pub rank: usize,
    pub score: f64,
    pub note: NoteRecord,
    pub best_chunk: Option<Highlight>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResponse {
    pub request_id: String,
    /// 0-based; each search more increments it.
    pub page: usize,
    pub hits: Vec<SearchHit>,
    /// Pass back to fetch the next page.
    pub cursor: String,
    pub generation: u64,
    pub latency: StageLatency,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct Cursor {
    v: u32,
    generation: u64,
    page: usize,
    fingerprint: String,
    returned: Vec<NoteId>,
}

impl Cursor {
    fn encode(&self) -> String {
        URL_SAFE_NO_PAD.encode(serde_json::to_vec(self).expect("cursor serializes"))
    }

    fn decode(s: &str) -> Result<Self, QueryError> {
        let bytes = URL_SAFE_NO_PAD.decode(s.trim()).map_err(|_| QueryError::InvalidCursor)?;
        let c: Cursor = serde_json::from_slice(&bytes).map_err(|_| QueryError::InvalidCursor)?;
        if c.v != 1 {
            return Err(QueryError::InvalidCursor);
        }
        Ok(c)
    }
}

pub struct Engine {
    embedder: Arc<dyn Embedder>,
    index: Arc<dyn VectorIndex>,
    store: Arc<NoteStore>,
    audit: Arc<AuditLog>,
    cohorts: Arc<CohortStore>,
    chunker: Chunker,
    config: EngineConfig,
}

impl std::fmt::Debug for Engine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Engine").field("config", &self.config).field("indexed", &self.index.len()).finish()
    }
}

struct Page {
    hits: Vec<SearchHit>,
    latency: StageLatency,
    filter: FilterSpec,
}

impl Engine {
    pub fn new(
        embedder: Arc<dyn Embedder>,
        index: Arc<dyn VectorIndex>,
        store: Arc<NoteStore>,
        audit: Arc<AuditLog>,
        cohorts: Arc<CohortStore>,
        config: EngineConfig,
    ) -> Result<Self, ChunkError> {
        let chunker = Chunker::new(config.chunking)?;
        Ok(Self { embedder, index, store, audit, cohorts, chunker, config })
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn index(&self) -> &Arc<dyn VectorIndex> {
        &self.index
    }

    pub fn store(&self) -> &Arc<NoteStore> {
        &self.store
    }

    pub fn audit(&self) -> &Arc<AuditLog> {
        &self.audit
    }

    pub fn cohorts(&self) -> &Arc<CohortStore> {
        &self.cohorts
    }

    pub fn vocabulary(&self) -> Vocabulary {
        self.index.vocabulary()
    }

    /// First page of results. Exactly one audit record is written per call.
    pub fn execute_search(&self, req: &SearchRequest, user: &str, allowlist: &Allowlist) -> Result<SearchResponse, QueryError> {
        self.audited("search", req, user, || {
            req.validate()?;
            let generation = self.index.generation();
            let page = self.run(req, 0, &HashSet::new(), allowlist)?;
            Ok((page, generation, 0, Vec::new(), req.fingerprint()))
        })
    }

    /// The next page after `cursor`: same ordering, minus every note already returned.
    pub fn search_more(
        &self,
        req: &SearchRequest,
        cursor: Option<&str>,
        user: &str,
        allowlist: &Allowlist,
    ) -> Result<SearchResponse, QueryError> {
        self.audited("search_more", req, user, || {
            req.validate()?;
            let cursor = Cursor::decode(cursor.ok_or(QueryError::MissingCursor)?)?;
            let fingerprint = req.fingerprint();
            if cursor.fingerprint != fingerprint {
                return Err(QueryError::InvalidCursor);
            }
            let generation = self.index.generation();
            if cursor.generation != generation {
                return Err(QueryError::StaleCursor);
            }
            let page_no = cursor.page + 1;
            let returned: HashSet<NoteId> = cursor.returned.iter().copied().collect();
            let page = self.run(req, page_no, &returned, allowlist)?;
            Ok((page, generation, page_no, cursor.returned, fingerprint))
        })
    }

    fn audited<F>(&self, action: &str, req: &SearchRequest, user: &str, body: F) -> Result<SearchResponse, QueryError>
    where
        F: FnOnce() -> Result<(Page, u64, usize, Vec<NoteId>, String), QueryError>,
    {
        let request_id = uuid::Uuid::new_v4().to_string();
        let started = Instant::now();
        let outcome = body();
        let total_ms = started.elapsed().as_secs_f64() * 1e3;
        let mut record = AuditRecord {
            schema_version: AUDIT_SCHEMA_VERSION,
            timestamp: Utc::now(),
            request_id: request_id.clone(),
            user: user.to_string(),
            action: action.to_string(),
            query: Some(req.question.clone()),
            filter: Some(req.filter.to_json()),
            requested_note_id: None,
            returned_note_ids: Vec::new(),
            result_count: 0,
            latency: StageLatency { total_ms, ..StageLatency::default() },
            outcome: AuditOutcome::Ok,
            error: None,
        };
        match outcome {
            Ok((page, generation, page_no, mut returned, fingerprint)) => {
                let latency = StageLatency { total_ms, ..page.latency };
                let ids: Vec<NoteId> = page.hits.iter().map(|h| h.note.note_id).collect();
                record.filter = Some(page.filter.to_json());
                record.returned_note_ids = ids.clone();
                record.result_count = ids.len();
                record.latency = latency;
                self.audit.append(&record)?;
                returned.extend(ids);
                let cursor = Cursor { v: 1, generation, page: page_no, fingerprint, returned };
                Ok(SearchResponse {
                    request_id,
                    page: page_no,
                    hits: page.hits,
                    cursor: cursor.encode(),
                    generation,
                    latency,
                })
            }
            Err(e) => {
                record.outcome = AuditOutcome::Error;
                record.error = Some(e.to_string());
                self.audit.append(&record)?;
                Err(e)
            }
        }
    }

    fn run(&self, req: &SearchRequest, page: usize, returned: &HashSet<NoteId>, allowlist: &Allowlist) -> Result<Page, QueryError> {
        let workspace = match &req.workspace {
            Some(id) => Some(self.cohorts.get(id).ok_or_else(|| QueryError::UnknownWorkspace(id.clone()))?),
            None => None,
        };
        let filter = scoped_filter(req, workspace.as_ref());
        let mut latency = StageLatency::default();

        let t = Instant::now();
        let query = self.embedder.embed_query(&req.question)?;
        latency.embed_ms = t.elapsed().as_secs_f64() * 1e3;

        let t = Instant::now();
        let k = req.notes_to_retrieve;
        let chunk_k = self
            .config
            .candidate_multiplier
            .max(1)
            .saturating_mul(k)
            .saturating_mul(page + 1)
            .min(self.index.len().max(1));
        let chunks = self.index.search(&query, chunk_k, &filter, req.index)?;
        let mut notes = collapse_to_notes(&chunks);
        match self.config.allowlist_stage {
            AllowlistStage::AfterCap => {
                notes = cap_per_patient(notes, req.notes_per_patient);
                notes.retain(|n| allowlist.permits(n.note_id));
            }
            AllowlistStage::BeforeCap => {
                notes.retain(|n| allowlist.permits(n.note_id));
                notes = cap_per_patient(notes, req.notes_per_patient);
            }
        }
        let selected: Vec<NoteCandidate> = notes.into_iter().filter(|n| !returned.contains(&n.note_id)).take(k).collect();
        latency.search_ms = t.elapsed().as_secs_f64() * 1e3;

        let t = Instant::now();
        let ids: Vec<NoteId> = selected.iter().map(|n| n.note_id).collect();
        let mut hydrated = self.store.get_notes(&ids)?;
        if !hydrated.missing.is_empty() {
            tracing::warn!(missing = hydrated.missing.len(), "indexed notes absent from the note store");
        }
        let first_rank = returned.len() + 1;
        let hits = selected
            .into_iter()
            .filter_map(|n| {
                let note = hydrated.records.remove(&n.note_id)?;
                let best_chunk = self.highlight(&note, n.best_chunk);
                Some((n.score, note, best_chunk))
            })
            .enumerate()
            .map(|(i, (score, note, best_chunk))| SearchHit { rank: first_rank + i, score, note, best_chunk })
            .collect();
        latency.hydrate_ms = t.elapsed().as_secs_f64() * 1e3;
        Ok(Page { hits, latency, filter })
    }

    fn highlight(&self, note: &NoteRecord, ordinal: u32) -> Option<Highlight> {
        let chunk = self.chunker.chunk(note.note_id, &note.text).into_iter().nth(ordinal as usize)?;
        Some(Highlight { chunk_ordinal: ordinal, char_start: chunk.char_start, char_end: chunk.char_end, text: chunk.text })
    }

    /// Full record for display. Checks the allowlist before touching the
    /// store; every call, including denials, is audited.
    pub fn fetch_note(&self, id: NoteId, user: &str, allowlist: &Allowlist) -> Result<NoteRecord, QueryError> {
        let started = Instant::now();
        let result = if !allowlist.permits(id) {
            Err(QueryError::Forbidden)
        } else {
            self.store.get_note(id).map_err(QueryError::from).and_then(|r| r.ok_or(QueryError::NotFound))
        };
        let outcome = match &result {
            Ok(_) => AuditOutcome::Ok,
            Err(QueryError::Forbidden) => AuditOutcome::Denied,
            Err(_) => AuditOutcome::Error,
        };
        self.audit.append(&AuditRecord {
            schema_version: AUDIT_SCHEMA_VERSION,
            timestamp: Utc::now(),
            request_id: uuid::Uuid::new_v4().to_string(),
            user: user.to_string(),
            action: "get_note".into(),
            query: None,
            filter: None,
            requested_note_id: Some(id),
            returned_note_ids: result.as_ref().map(|r| vec![r.note_id]).unwrap_or_default(),
            result_count: result.is_ok() as usize,
            latency: StageLatency { total_ms: started.elapsed().as_secs_f64() * 1e3, ..StageLatency::default() },
            outcome,
            error: result.as_ref().err().map(ToString::to_string),
        })?;
        result
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ann::{IndexConfig, NumericField, PartitionedIndex, Quantization, SharedIndex, VectorEntry};
    use crate::chunker::chunk_note;
    use crate::embedding::ReferenceEmbedder;
    use crate::store::{Author, Patient};
    use chrono::{NaiveDate, TimeZone};

    fn note(id: u64, mrn: &str, text: &str) -> NoteRecord {
        NoteRecord {
            note_id: NoteId(id),
            text: text.into(),
            patient: Patient { mrn: mrn.into(), name: "X".into(), birth_date: NaiveDate::from_ymd_opt(2015, 1, 1).unwrap(), sex: "M".into() },
            note_category: "Progress Note".into(),
            encounter_type: "Office Visit".into(),
            department: "Oncology".into(),
            specialty: "Pediatric Oncology".into(),
            author: Author { name: "Doe, J".into(), role: "Physician".into() },
            filed_time: Utc.with_ymd_and_hms(2021, 6, 1, 12, 0, 0).unwrap(),
            creation_time: Utc.with_ymd_and_hms(2021, 6, 1, 11, 0, 0).unwrap(),
        }
    }

    fn small_chunks() -> ChunkingConfig {
        ChunkingConfig::new(8, 2, 3).unwrap()
    }

    fn engine(notes: &[NoteRecord]) -> Engine {
        let embedder = Arc::new(ReferenceEmbedder::with_instruction(64, ""));
        let cfg = IndexConfig { num_partitions: 1, nprobe: 1, spill: 1, rescore_budget: 1000, quantization: Quantization::Scalar8 };
        let mut index = PartitionedIndex::new(cfg, 64).unwrap();
        index.set_centroids(vec![crate::embedding::EmbeddingVector::basis(64, 0)]).unwrap();
        let mut entries = Vec::new();
        for n in notes {
            let chunks = chunk_note(n.note_id, &n.text, &small_chunks()).unwrap();
            let texts: Vec<String> = chunks.iter().map(|c| c.text.clone()).collect();
            for (c, v) in chunks.iter().zip(embedder.embed_documents(&texts).unwrap()) {
                entries.push(VectorEntry { chunk_id: c.id(), vector: v, attributes: n.attributes() });
            }
        }
        index.insert(entries).unwrap();
        let store = NoteStore::in_memory();
        store.put_notes(notes).unwrap();
        let config = EngineConfig { chunking: small_chunks(), ..EngineConfig::default() };
        Engine::new(
            embedder,
            SharedIndex::new(index),
            Arc::new(store),
            Arc::new(AuditLog::in_memory()),
            Arc::new(CohortStore::in_memory()),
            config,
        )
        .unwrap()
    }

    fn ids(resp: &SearchResponse) -> Vec<u64> {
        resp.hits.iter().map(|h| h.note.note_id.0).collect()
    }

    fn req(q: &str, k: usize) -> SearchRequest {
        SearchRequest { notes_to_retrieve: k, ..SearchRequest::new(q) }
    }

    #[test]
    fn singleton_corpus_highlights_matching_chunk() {
        let text = "alpha beta gamma delta epsilon zeta eta theta iota kappa lambda mu nu xi omicron pi rho sigma tau";
        let e = engine(&[note(1, "001", text)]);
        let resp = e.execute_search(&req("sigma tau rho", 3), "u", &Allowlist::Disabled).unwrap();
        assert_eq!(ids(&resp), [1]);
        let h = resp.hits[0].best_chunk.as_ref().unwrap();
        assert!(h.text.contains("sigma tau"));
        assert_eq!(&text[h.char_start..h.char_end], h.text);
        assert_eq!(resp.hits[0].rank, 1);
    }

    #[test]
    fn duplicate_chunks_collapse_to_max() {
        let para = "febrile seizure lasting two minutes resolved spontaneously today";
        let text = format!("{para}\n\nunrelated words about knee pain and physical therapy plans\n\n{para}");
        let e = engine(&[note(1, "001", &text), note(2, "002", "knee pain after soccer injury on field")]);
        let resp = e.execute_search(&req("febrile seizure two minutes", 5), "u", &Allowlist::Disabled).unwrap();
        assert_eq!(ids(&resp).iter().filter(|&&i| i == 1).count(), 1);
        let chunks = chunk_note(NoteId(1), &text, &small_chunks()).unwrap();
        let q = ReferenceEmbedder::with_instruction(64, "").embed_query("febrile seizure two minutes").unwrap();
        let best = chunks
            .iter()
            .map(|c| q.dot(&ReferenceEmbedder::with_instruction(64, "").embed_documents(&[c.text.clone()]).unwrap()[0]))
            .fold(f64::NEG_INFINITY, f64::max);
        assert!((resp.hits[0].score - best).abs() < 1e-6);
    }

    #[test]
    fn per_patient_cap() {
        let notes = [
            note(1, "P", "asthma exacerbation wheeze"),
            note(2, "P", "asthma exacerbation wheeze albuterol"),
            note(3, "P", "asthma exacerbation"),
            note(4, "Q", "asthma follow up"),
            note(5, "R", "asthma"),
        ];
        let e = engine(&notes);
        let mut r = req("asthma exacerbation wheeze", 3);
        let uncapped = e.execute_search(&r, "u", &Allowlist::Disabled).unwrap();
        assert!(uncapped.hits.iter().take(3).all(|h| h.note.patient.mrn == "P"));
        r.notes_per_patient = Some(1);
        let capped = e.execute_search(&r, "u", &Allowlist::Disabled).unwrap();
        let mrns: Vec<_> = capped.hits.iter().map(|h| h.note.patient.mrn.as_str()).collect();
        assert_eq!(mrns, ["P", "R", "Q"]);
        assert_eq!(capped.hits[0].note.note_id, uncapped.hits[0].note.note_id);
    }

    #[test]
    fn pagination_is_disjoint_and_exhausts() {
        let notes: Vec<_> = (1..=5).map(|i| note(i, &format!("{i:03}"), &format!("lymphoma staging scan {i}"))).collect();
        let e = engine(&notes);
        let r = req("lymphoma staging", 3);
        let p1 = e.execute_search(&r, "u", &Allowlist::Disabled).unwrap();
        let p2 = e.search_more(&r, Some(&p1.cursor), "u", &Allowlist::Disabled).unwrap();
        let p3 = e.search_more(&r, Some(&p2.cursor), "u", &Allowlist::Disabled).unwrap();
        assert_eq!((p1.hits.len(), p2.hits.len(), p3.hits.len()), (3, 2, 0));
        let mut all: Vec<u64> = ids(&p1).into_iter().chain(ids(&p2)).collect();
        assert_eq!(p2.hits[0].rank, 4);
        all.sort();
        assert_eq!(all, [1, 2, 3, 4, 5]);
        assert!(matches!(e.search_more(&r, None, "u", &Allowlist::Disabled), Err(QueryError::MissingCursor)));
        assert!(matches!(e.search_more(&r, Some("???"), "u", &Allowlist::Disabled), Err(QueryError::InvalidCursor)));
        let other = req("different question", 3);
        assert!(matches!(e.search_more(&other, Some(&p1.cursor), "u", &Allowlist::Disabled), Err(QueryError::InvalidCursor)));
        assert_eq!(e.audit().records().unwrap().len(), 6);
    }

    #[test]
    fn stale_cursor_after_insert() {
        let notes: Vec<_> = (1..=4).map(|i| note(i, "001", &format!("renal biopsy {i}"))).collect();
        let embedder = Arc::new(ReferenceEmbedder::with_instruction(16, ""));
        let cfg = IndexConfig { num_partitions: 1, nprobe: 1, spill: 1, rescore_budget: 10, quantization: Quantization::None };
        let mut index = PartitionedIndex::new(cfg, 16).unwrap();
        index.set_centroids(vec![crate::embedding::EmbeddingVector::basis(16, 0)]).unwrap();
        let shared = SharedIndex::new(index);
        let insert = |n: &NoteRecord| {
            let v = embedder.embed_documents(&[n.text.clone()]).unwrap().remove(0);
            shared.insert(vec![VectorEntry { chunk_id: crate::ids::ChunkId::new(n.note_id, 0), vector: v, attributes: n.attributes() }]).unwrap();
        };
        insert(&notes[0]);
        let store = NoteStore::in_memory();
        store.put_notes(&notes).unwrap();
        let e = Engine::new(
            embedder.clone(),
            shared.clone(),
            Arc::new(store),
            Arc::new(AuditLog::in_memory()),
            Arc::new(CohortStore::in_memory()),
            EngineConfig::default(),
        )
        .unwrap();
        let r = req("renal biopsy", 1);
        let p1 = e.execute_search(&r, "u", &Allowlist::Disabled).unwrap();
        insert(&notes[1]);
        assert!(matches!(e.search_more(&r, Some(&p1.cursor), "u", &Allowlist::Disabled), Err(QueryError::StaleCursor)));
    }

    #[test]
    fn scoping_and_workspace_exclusions() {
        let notes: Vec<_> = (1..=6).map(|i| note(i, &format!("{:03}", (i - 1) % 3 + 1), &format!("hip dysplasia {i}"))).collect();
        let e = engine(&notes);
        let mut r = req("hip dysplasia", 10);
        r.include_mrns = vec!["001".into(), "002".into()];
        let resp = e.execute_search(&r, "u", &Allowlist::Disabled).unwrap();
        assert!(resp.hits.iter().all(|h| ["001", "002"].contains(&h.note.patient.mrn.as_str())));
        assert_eq!(resp.hits.len(), 4);

        e.cohorts().create("w").unwrap();
        e.cohorts().update("w", CohortAction::Exclude, "002").unwrap();
        r.workspace = Some("w".into());
        let resp = e.execute_search(&r, "u", &Allowlist::Disabled).unwrap();
        assert!(resp.hits.iter().all(|h| h.note.patient.mrn == "001"));

        r.exclude_mrns = vec!["001".into()];
        assert!(matches!(e.execute_search(&r, "u", &Allowlist::Disabled), Err(QueryError::InvalidRequest(_))));
        r.exclude_mrns.clear();
        r.workspace = Some("missing".into());
        assert!(matches!(e.execute_search(&r, "u", &Allowlist::Disabled), Err(QueryError::UnknownWorkspace(_))));
        let audit = e.audit().records().unwrap();
        assert_eq!(audit.len(), 4);
        assert_eq!(audit.iter().filter(|a| a.outcome == AuditOutcome::Error).count(), 2);
    }

    #[test]
    fn scoped_filter_merging() {
        let mut r = SearchRequest::new("q");
        r.filter = FilterSpec::new().include(CategoricalField::PatientId, ["a", "b", "c"]).range(NumericField::Date, Some(1.0), None);
        r.include_mrns = vec!["b".into(), "c".into(), "d".into()];
        r.exclude_mrns = vec!["x".into()];
        let mut ws = CohortWorkspace::new("w");
        ws.apply(CohortAction::Exclude, "c");
        let f = scoped_filter(&r, Some(&ws));
        let clause = &f.categorical[&CategoricalField::PatientId];
        assert_eq!(clause.include.as_ref().unwrap().iter().collect::<Vec<_>>(), ["b"]);
        assert_eq!(clause.exclude.iter().collect::<Vec<_>>(), ["c", "x"]);
        assert!(f.validate().is_ok());
        assert_eq!(scoped_filter(&SearchRequest::new("q"), None), FilterSpec::new());
    }

    #[test]
    fn allowlist_and_fetch() {
        let notes: Vec<_> = (1..=4).map(|i| note(i, &format!("{i:03}"), &format!("scoliosis brace {i}"))).collect();
        let e = engine(&notes);
        let allow = Allowlist::enforced([NoteId(2), NoteId(3)]);
        let resp = e.execute_search(&req("scoliosis brace", 10), "u", &allow).unwrap();
        let mut got = ids(&resp);
        got.sort();
        assert_eq!(got, [2, 3]);
        assert!(e.execute_search(&req("scoliosis", 10), "u", &Allowlist::enforced([])).unwrap().hits.is_empty());

        assert_eq!(e.fetch_note(NoteId(2), "u", &allow).unwrap().note_id, NoteId(2));
        let denied = e.fetch_note(NoteId(1), "u", &allow).unwrap_err();
        assert!(matches!(denied, QueryError::Forbidden));
        assert!(!denied.to_string().contains('1'));
        assert!(matches!(e.fetch_note(NoteId(99), "u", &Allowlist::Disabled), Err(QueryError::NotFound)));
        let audit = e.audit().records().unwrap();
        let fetches: Vec<_> = audit.iter().filter(|a| a.action == "get_note").map(|a| a.outcome).collect();
        assert_eq!(fetches, [AuditOutcome::Ok, AuditOutcome::Denied, AuditOutcome::Error]);
    }

    #[test]
    fn allowlist_stage_changes_capped_results() {
        let notes = [note(1, "P", "gait ataxia gait ataxia"), note(2, "P", "gait ataxia"), note(3, "Q", "ataxia")];
        let mut e = engine(&notes);
        let allow = Allowlist::enforced([NoteId(2), NoteId(3)]);
        let mut r = req("gait ataxia", 5);
        r.notes_per_patient = Some(1);
        assert_eq!(ids(&e.execute_search(&r, "u", &allow).unwrap()), [3]);
        e.config.allowlist_stage = AllowlistStage::BeforeCap;
        assert_eq!(ids(&e.execute_search(&r, "u", &allow).unwrap()), [2, 3]);
    }

    #[test]
    fn request_wire_defaults() {
        let r: SearchRequest = serde_json::from_str(r#"{"question":"q"}"#).unwrap();
        assert_eq!(r, SearchRequest::new("q"));
        assert_eq!(r.notes_to_retrieve, 20);
        let bad: Result<SearchRequest, _> = serde_json::from_str(r#"{"question":"q","filter":{"ward":{}}}"#);
        assert!(bad.unwrap_err().to_string().contains("ward"));
    }
}
