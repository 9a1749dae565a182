use std::sync::Arc;

use notesearch_core::ann::{IndexConfig, PartitionedIndex, Quantization, SharedIndex};
use notesearch_core::chunker::ChunkingConfig;
use notesearch_core::embedding::{Embedder, ReferenceEmbedder};
use notesearch_core::ingest::{generate_synthetic_corpus, train_index, IngestOptions, IngestPipeline, SyntheticCorpusSpec};
use notesearch_core::query::{AuditLog, CohortStore, Engine, EngineConfig, SearchRequest};
use notesearch_core::store::NoteStore;
use notesearch_eval::latency::{latency_bench, BenchConfig, PrecomputedEmbedder};
use notesearch_eval::EvalError;

fn engine(patients: usize) -> (tempfile::TempDir, Engine, Vec<SearchRequest>) {
    let corpus = generate_synthetic_corpus(&SyntheticCorpusSpec { num_patients: patients, ..Default::default() }).unwrap();
    let chunking = ChunkingConfig::new(48, 10, 6).unwrap();
    let reference: Arc<dyn Embedder> = Arc::new(ReferenceEmbedder::new(128));
    let config = IndexConfig { num_partitions: 8, nprobe: 3, spill: 2, rescore_budget: 100, quantization: Quantization::Scalar8 };
    let index = SharedIndex::new(train_index(&corpus.notes, reference.as_ref(), chunking, config, 1, 400).unwrap());
    let store = Arc::new(NoteStore::in_memory());
    let dir = tempfile::tempdir().unwrap();
    IngestPipeline::new(reference.clone(), index.clone(), store.clone(), chunking, dir.path(), IngestOptions::default())
        .unwrap()
        .ingest(&corpus.notes)
        .unwrap();
    let requests: Vec<SearchRequest> = corpus.facts.iter().map(|f| SearchRequest::new(f.question.clone())).collect();
    let embedder = PrecomputedEmbedder::warm(reference, requests.iter().map(|r| r.question.as_str())).unwrap();
    let engine = Engine::new(
        Arc::new(embedder),
        index,
        store,
        Arc::new(AuditLog::in_memory()),
        Arc::new(CohortStore::in_memory()),
        EngineConfig { chunking, ..Default::default() },
    )
    .unwrap();
    (dir, engine, requests)
}

#[test]
fn every_level_reports_stage_timings() {
    let (_dir, engine, requests) = engine(12);
    let config = BenchConfig { levels: vec![1, 2, 4], queries_per_worker: 6, warmup: 3 };
    let report = latency_bench(&engine, &requests, &config, true).unwrap();
    assert_eq!(report.levels.iter().map(|l| l.level).collect::<Vec<_>>(), [1, 2, 4]);
    assert_eq!(report.vectors, engine.index().len());
    for l in &report.levels {
        assert_eq!((l.queries, l.errors, l.samples.len()), (6 * l.level, 0, 6 * l.level));
        assert!(l.search.median_ms > 0.0 && l.search.p95_ms >= l.search.median_ms);
        assert!(l.throughput_qps > 0.0);
        for s in &l.samples {
            let parts = s.embed_ms + s.search_ms + s.hydrate_ms;
            assert!(parts <= s.total_ms + 1e-9, "{s:?}");
            assert!(s.total_ms - parts < 0.25 * s.total_ms + 1.0, "{s:?}");
        }
    }
    // warmup plus every measured query went through the audited engine path
    assert_eq!(engine.audit().records().unwrap().len(), 3 + 6 + 12 + 24);
}

#[test]
fn larger_corpus_still_completes_every_level() {
    for patients in [10, 20] {
        let (_dir, engine, requests) = engine(patients);
        let config = BenchConfig { levels: vec![1, 3], queries_per_worker: 4, warmup: 0 };
        let report = latency_bench(&engine, &requests, &config, false).unwrap();
        assert!(report.levels.iter().all(|l| l.errors == 0 && l.total.median_ms > 0.0 && l.samples.is_empty()));
    }
}

#[test]
fn refuses_an_unusable_engine() {
    let (_dir, engine, requests) = engine(4);
    assert!(matches!(latency_bench(&engine, &[], &BenchConfig::default(), false), Err(EvalError::Setup(_))));
    let bad = BenchConfig { levels: vec![0], ..Default::default() };
    assert!(matches!(latency_bench(&engine, &requests, &bad, false), Err(EvalError::Setup(_))));

    let untrained = SharedIndex::new(PartitionedIndex::new(IndexConfig::default(), 8).unwrap());
    let empty = Engine::new(
        Arc::new(ReferenceEmbedder::new(8)),
        untrained,
        Arc::new(NoteStore::in_memory()),
        Arc::new(AuditLog::in_memory()),
        Arc::new(CohortStore::in_memory()),
        EngineConfig::default(),
    )
    .unwrap();
    assert!(matches!(latency_bench(&empty, &requests, &BenchConfig::default(), false), Err(EvalError::Setup(_))));
}
