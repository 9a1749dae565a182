//! Ingest to disk, reopen everything, and check the served results.

use std::sync::Arc;

use notesearch_core::ann::{self, DiskIndex, IndexConfig, Quantization, SharedIndex, VectorIndex};
use notesearch_core::chunker::ChunkingConfig;
use notesearch_core::embedding::{Embedder, ReferenceEmbedder};
use notesearch_core::ingest::{generate_synthetic_corpus, train_index, IngestOptions, IngestPipeline, SyntheticCorpusSpec};
use notesearch_core::query::{Allowlist, AuditLog, CohortAction, CohortStore, Engine, EngineConfig, QueryError, SearchRequest};
use notesearch_core::store::NoteStore;

fn chunking() -> ChunkingConfig {
    ChunkingConfig::new(40, 8, 5).unwrap()
}

fn engine(index: Arc<dyn VectorIndex>, store: Arc<NoteStore>, audit: AuditLog, cohorts: CohortStore) -> Engine {
    Engine::new(
        Arc::new(ReferenceEmbedder::new(128)),
        index,
        store,
        Arc::new(audit),
        Arc::new(cohorts),
        EngineConfig { chunking: chunking(), ..Default::default() },
    )
    .unwrap()
}

#[test]
fn reopened_deployment_serves_identical_results() {
    let corpus = generate_synthetic_corpus(&SyntheticCorpusSpec { num_patients: 12, seed: 4, ..Default::default() }).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let embedder: Arc<dyn Embedder> = Arc::new(ReferenceEmbedder::new(128));
    let config = IndexConfig { num_partitions: 6, nprobe: 3, spill: 2, rescore_budget: 60, quantization: Quantization::Scalar8 };

    let questions: Vec<SearchRequest> =
        corpus.facts.iter().take(12).map(|f| SearchRequest { notes_to_retrieve: 5, ..SearchRequest::new(f.question.clone()) }).collect();
    let live_results = {
        let index = SharedIndex::new(train_index(&corpus.notes, embedder.as_ref(), chunking(), config, 2, 300).unwrap());
        let store = Arc::new(NoteStore::open(&root.join("notes.kv")).unwrap());
        IngestPipeline::new(embedder.clone(), index.clone(), store.clone(), chunking(), &root.join("work"), IngestOptions::default())
            .unwrap()
            .ingest(&corpus.notes)
            .unwrap();
        index.save(&root.join("index.nsx")).unwrap();
        let cohorts = CohortStore::open(&root.join("cohorts")).unwrap();
        cohorts.create("study").unwrap();
        cohorts.update("study", CohortAction::Exclude, &corpus.notes[0].patient.mrn).unwrap();
        let e = engine(index, store, AuditLog::open(&root.join("audit.jsonl")).unwrap(), cohorts);
        questions.iter().map(|q| e.execute_search(q, "u1", &Allowlist::Disabled).unwrap().hits).collect::<Vec<_>>()
    };

    let store = Arc::new(NoteStore::open(&root.join("notes.kv")).unwrap());
    assert_eq!(store.len(), corpus.notes.len());
    for (index, label) in [
        (Arc::new(ann::load(&root.join("index.nsx")).unwrap()) as Arc<dyn VectorIndex>, "memory"),
        (Arc::new(DiskIndex::open(&root.join("index.nsx")).unwrap()) as Arc<dyn VectorIndex>, "disk"),
    ] {
        let audit = AuditLog::open(&root.join("audit.jsonl")).unwrap();
        let e = engine(index, store.clone(), audit, CohortStore::open(&root.join("cohorts")).unwrap());
        for (q, live) in questions.iter().zip(&live_results) {
            let hits = e.execute_search(q, "u2", &Allowlist::Disabled).unwrap().hits;
            assert_eq!(&hits, live, "{label}: {}", q.question);
        }
        // cohort state survived the restart
        let ws = e.cohorts().get("study").unwrap();
        assert!(ws.excluded_mrns.contains(&corpus.notes[0].patient.mrn));
        let scoped = SearchRequest { workspace: Some("study".into()), notes_to_retrieve: 100, ..SearchRequest::new("visit") };
        let hits = e.execute_search(&scoped, "u2", &Allowlist::Disabled).unwrap().hits;
        assert!(hits.iter().all(|h| h.note.patient.mrn != corpus.notes[0].patient.mrn), "{label}");
    }
    // the audit log is append-only across restarts
    let records = AuditLog::open(&root.join("audit.jsonl")).unwrap().records().unwrap();
    assert_eq!(records.len(), 12 + 2 * 13);
    assert_eq!(records.iter().filter(|r| r.user == "u1").count(), 12);
}

#[test]
fn fetch_checks_allowlist_before_existence() {
    let corpus = generate_synthetic_corpus(&SyntheticCorpusSpec { num_patients: 3, ..Default::default() }).unwrap();
    let embedder: Arc<dyn Embedder> = Arc::new(ReferenceEmbedder::new(128));
    let config = IndexConfig { num_partitions: 2, nprobe: 2, spill: 1, rescore_budget: 20, quantization: Quantization::None };
    let index = SharedIndex::new(train_index(&corpus.notes, embedder.as_ref(), chunking(), config, 1, 100).unwrap());
    let store = Arc::new(NoteStore::in_memory());
    let dir = tempfile::tempdir().unwrap();
    IngestPipeline::new(embedder, index.clone(), store.clone(), chunking(), dir.path(), IngestOptions::default())
        .unwrap()
        .ingest(&corpus.notes)
        .unwrap();
    let e = engine(index, store, AuditLog::in_memory(), CohortStore::in_memory());
    let present = corpus.notes[0].note_id;
    let absent = notesearch_core::NoteId(42);
    let only_present = Allowlist::enforced([present]);
    assert!(matches!(e.fetch_note(absent, "u", &only_present), Err(QueryError::Forbidden)));
    assert!(matches!(e.fetch_note(absent, "u", &Allowlist::Disabled), Err(QueryError::NotFound)));
    assert_eq!(e.fetch_note(present, "u", &only_present).unwrap().note_id, present);
}
