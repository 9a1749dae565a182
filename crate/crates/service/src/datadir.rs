//! On-disk layout of a deployment.
//!
//! ```text
//! <data-dir>/
//!   service.json   embedder, chunking, index and engine settings
//!   index.nsx      vector index snapshot
//!   notes.kv       note store log
//!   ingest/        partition manifests and caches
//!   audit.jsonl    default audit log
//!   cohorts/       one JSON file per workspace
//! ```

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use notesearch_core::ann::{load, DiskIndex, IndexConfig, PartitionedIndex, SharedIndex, VectorIndex};
use notesearch_core::embedding::{Embedder, EmbedderConfig, ReferenceEmbedder, RemoteEmbedder};
use notesearch_core::query::{AuditLog, CohortStore, Engine, EngineConfig};
use notesearch_core::store::NoteStore;
use serde::{Deserialize, Serialize};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceConfig {
    pub schema_version: u32,
    pub embedder: EmbedderConfig,
    /// Required unless the provider is `reference`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedder_url: Option<String>,
    pub index: IndexConfig,
    pub engine: EngineConfig,
}

impl ServiceConfig {
    pub fn embedder(&self) -> Result<Arc<dyn Embedder>> {
        let e = &self.embedder;
        Ok(match (e.provider_id.as_str(), &self.embedder_url) {
            ("reference", _) => Arc::new(ReferenceEmbedder::with_instruction(e.dimension, e.query_instruction.clone())),
            (_, Some(url)) => {
                Arc::new(RemoteEmbedder::new(url, e.dimension, e.query_instruction.clone(), Duration::from_secs(30)))
            }
            (other, None) => bail!("embedder provider {other:?} needs embedder_url"),
        })
    }
}

#[derive(Debug, Clone)]
pub struct DataDir {
    root: PathBuf,
}

impl DataDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config_path(&self) -> PathBuf {
        self.root.join("service.json")
    }

    pub fn index_path(&self) -> PathBuf {
        self.root.join("index.nsx")
    }

    pub fn notes_path(&self) -> PathBuf {
        self.root.join("notes.kv")
    }

    pub fn work_dir(&self) -> PathBuf {
        self.root.join("ingest")
    }

    pub fn audit_path(&self) -> PathBuf {
        self.root.join("audit.jsonl")
    }

    pub fn cohort_dir(&self) -> PathBuf {
        self.root.join("cohorts")
    }

    pub fn create(&self) -> Result<()> {
        std::fs::create_dir_all(&self.root).with_context(|| format!("creating {}", self.root.display()))
    }

    pub fn read_config(&self) -> Result<ServiceConfig> {
        let path = self.config_path();
        let text = std::fs::read_to_string(&path)
            .with_context(|| format!("reading {}; run train-index first", path.display()))?;
        let cfg: ServiceConfig = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        if cfg.schema_version != CONFIG_SCHEMA_VERSION {
            bail!("{} has schema version {}, expected {CONFIG_SCHEMA_VERSION}", path.display(), cfg.schema_version);
        }
        Ok(cfg)
    }

    pub fn write_config(&self, cfg: &ServiceConfig) -> Result<()> {
        self.create()?;
        let tmp = self.root.join("service.json.tmp");
        std::fs::write(&tmp, serde_json::to_vec_pretty(cfg)?)?;
        std::fs::rename(&tmp, self.config_path())?;
        Ok(())
    }

    pub fn load_index(&self) -> Result<PartitionedIndex> {
        let path = self.index_path();
        load(&path).with_context(|| format!("loading index {}", path.display()))
    }

    pub fn open_store(&self) -> Result<NoteStore> {
        let path = self.notes_path();
        NoteStore::open(&path).with_context(|| format!("opening note store {}", path.display()))
    }

    /// Engine over this directory. `disk` serves the index from the snapshot
    /// file instead of loading it into memory.
    pub fn open_engine(&self, audit: Option<&Path>, disk: bool) -> Result<Engine> {
        let audit_path = audit.map(Path::to_path_buf).unwrap_or_else(|| self.audit_path());
        let audit = AuditLog::open(&audit_path).with_context(|| format!("opening audit log {}", audit_path.display()))?;
        self.engine_with(self.read_config()?.embedder()?, audit, disk)
    }

    pub fn engine_with(&self, embedder: Arc<dyn Embedder>, audit: AuditLog, disk: bool) -> Result<Engine> {
        let cfg = self.read_config()?;
        let index: Arc<dyn VectorIndex> = if disk {
            Arc::new(DiskIndex::open(&self.index_path()).context("opening on-disk index")?)
        } else {
            SharedIndex::new(self.load_index()?)
        };
        if index.dim() != embedder.dimension() {
            bail!("index dimension {} does not match embedder dimension {}", index.dim(), embedder.dimension());
        }
        let cohorts = CohortStore::open(&self.cohort_dir())?;
        Ok(Engine::new(embedder, index, Arc::new(self.open_store()?), Arc::new(audit), Arc::new(cohorts), cfg.engine)?)
    }
}
