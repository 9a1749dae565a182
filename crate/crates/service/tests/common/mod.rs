#![allow(dead_code)]

use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use notesearch_core::ann::{IndexConfig, PartitionedIndex, Quantization, SharedIndex};
use notesearch_core::chunker::ChunkingConfig;
use notesearch_core::embedding::{Embedder, ReferenceEmbedder};
use notesearch_core::ingest::{
    generate_synthetic_corpus, train_index, IngestOptions, IngestPipeline, SyntheticCorpus, SyntheticCorpusSpec,
};
use notesearch_core::query::{Allowlist, AuditLog, CohortStore, Engine, EngineConfig};
use notesearch_core::store::NoteStore;
use notesearch_service::api::{router, AppState};
use serde_json::Value;
use tower::ServiceExt;

pub const DIM: usize = 256;

pub fn chunking() -> ChunkingConfig {
    ChunkingConfig::new(48, 10, 6).unwrap()
}

pub fn corpus(patients: usize, seed: u64) -> SyntheticCorpus {
    let spec = SyntheticCorpusSpec {
        seed,
        num_patients: patients,
        specialties: ["Pediatric Oncology", "Pediatric Neurology", "Pulmonology"].map(String::from).to_vec(),
        ..Default::default()
    };
    generate_synthetic_corpus(&spec).unwrap()
}

/// An engine over `corpus`, fully ingested into a trained in-memory index.
pub fn engine(corpus: &SyntheticCorpus, dir: &std::path::Path) -> Engine {
    let embedder: Arc<dyn Embedder> = Arc::new(ReferenceEmbedder::new(DIM));
    let config = IndexConfig { num_partitions: 8, nprobe: 8, spill: 2, rescore_budget: 200, quantization: Quantization::Scalar8 };
    let index = SharedIndex::new(train_index(&corpus.notes, embedder.as_ref(), chunking(), config, 3, 500).unwrap());
    let store = Arc::new(NoteStore::in_memory());
    IngestPipeline::new(embedder.clone(), index.clone(), store.clone(), chunking(), dir, IngestOptions::default())
        .unwrap()
        .ingest(&corpus.notes)
        .unwrap();
    Engine::new(
        embedder,
        index,
        store,
        Arc::new(AuditLog::in_memory()),
        Arc::new(CohortStore::in_memory()),
        EngineConfig { chunking: chunking(), ..Default::default() },
    )
    .unwrap()
}

pub fn untrained_engine() -> Engine {
    Engine::new(
        Arc::new(ReferenceEmbedder::new(DIM)),
        SharedIndex::new(PartitionedIndex::new(IndexConfig::default(), DIM).unwrap()),
        Arc::new(NoteStore::in_memory()),
        Arc::new(AuditLog::in_memory()),
        Arc::new(CohortStore::in_memory()),
        EngineConfig { chunking: chunking(), ..Default::default() },
    )
    .unwrap()
}

pub fn state(engine: Engine, allowlist: Allowlist) -> Arc<AppState> {
    Arc::new(AppState { engine, allowlist, project: "test-project".into() })
}

pub struct Reply {
    pub status: StatusCode,
    pub headers: axum::http::HeaderMap,
    pub text: String,
}

impl Reply {
    pub fn json(&self) -> Value {
        serde_json::from_str(&self.text).unwrap_or_else(|e| panic!("{e}: {}", self.text))
    }
}

pub async fn call(state: &Arc<AppState>, method: &str, uri: &str, user: Option<&str>, body: Option<Value>) -> Reply {
    let mut req = Request::builder().method(method).uri(uri);
    if let Some(u) = user {
        req = req.header("x-user-id", u);
    }
    let body = match body {
        Some(v) => {
            req = req.header("content-type", "application/json");
            Body::from(v.to_string())
        }
        None => Body::empty(),
    };
    raw(state, req.body(body).unwrap()).await
}

pub async fn raw(state: &Arc<AppState>, req: Request<Body>) -> Reply {
    let resp = router(state.clone()).oneshot(req).await.unwrap();
    let status = resp.status();
    let headers = resp.headers().clone();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    Reply { status, headers, text: String::from_utf8(bytes.to_vec()).unwrap() }
}

/// Every integer or numeric string anywhere in `v`.
pub fn numbers_in(v: &Value, out: &mut Vec<u64>) {
    match v {
        Value::Number(n) => out.extend(n.as_u64()),
        Value::String(s) => {
            out.extend(s.split(|c: char| !c.is_ascii_digit()).filter_map(|t| t.parse::<u64>().ok()));
        }
        Value::Array(a) => a.iter().for_each(|x| numbers_in(x, out)),
        // opaque tokens; the cursor only carries ids already shown on a page
        Value::Object(o) => o.iter().filter(|(k, _)| *k != "cursor" && *k != "request_id").for_each(|(_, x)| numbers_in(x, out)),
        _ => {}
    }
}
