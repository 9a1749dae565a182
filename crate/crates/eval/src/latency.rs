//! Concurrent load generator for the query engine.
//!
//! Each concurrency level starts `level` worker threads against one shared
//! engine; every worker issues its queries back to back and records the
//! per-stage timings the engine reports. Query embeddings can be computed up
//! front with [`PrecomputedEmbedder`] so the embed stage is a table lookup and
//! the measurement isolates search and hydration.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Barrier};
use std::time::Instant;

use notesearch_core::embedding::{compose_query, EmbedError, EmbedMode, Embedder, EmbeddingVector};
use notesearch_core::query::{Allowlist, Engine, SearchRequest, StageLatency};
use serde::{Deserialize, Serialize};

use crate::{EvalError, REPORT_SCHEMA_VERSION};

pub const DEFAULT_LEVELS: [usize; 6] = [1, 5, 10, 20, 40, 80];

/// Serves query vectors from a table keyed by the exact text the engine
/// embeds. Misses go to the fallback embedder if there is one.
pub struct PrecomputedEmbedder {
    dim: usize,
    instruction: String,
    vectors: HashMap<String, EmbeddingVector>,
    fallback: Option<Arc<dyn Embedder>>,
    misses: AtomicU64,
}

impl PrecomputedEmbedder {
    /// Embeds every question once with `inner`, which stays as the fallback.
    pub fn warm<'a>(inner: Arc<dyn Embedder>, questions: impl IntoIterator<Item = &'a str>) -> Result<Self, EmbedError> {
        let mut vectors = HashMap::new();
        for q in questions {
            let v = inner.embed_query(q)?;
            vectors.insert(compose_query(inner.query_instruction(), q), v);
        }
        Ok(Self {
            dim: inner.dimension(),
            instruction: inner.query_instruction().to_string(),
            vectors,
            fallback: Some(inner),
            misses: AtomicU64::new(0),
        })
    }

    /// Fixed question → vector table with no instruction prefix and no fallback.
    pub fn from_vectors(dim: usize, pairs: impl IntoIterator<Item = (String, EmbeddingVector)>) -> Self {
        Self {
            dim,
            instruction: String::new(),
            vectors: pairs.into_iter().collect(),
            fallback: None,
            misses: AtomicU64::new(0),
        }
    }

    pub fn misses(&self) -> u64 {
        self.misses.load(Ordering::Relaxed)
    }
}

impl Embedder for PrecomputedEmbedder {
    fn dimension(&self) -> usize {
        self.dim
    }

    fn query_instruction(&self) -> &str {
        &self.instruction
    }

    fn embed(&self, texts: &[String], mode: EmbedMode) -> Result<Vec<EmbeddingVector>, EmbedError> {
        texts
            .iter()
            .map(|t| match self.vectors.get(t) {
                Some(v) => Ok(v.clone()),
                None => {
                    self.misses.fetch_add(1, Ordering::Relaxed);
                    match &self.fallback {
                        Some(f) => f.embed(std::slice::from_ref(t), mode)?.pop().ok_or(EmbedError::EmptyInput),
                        None => Err(EmbedError::Permanent(format!("no precomputed vector for {t:?}"))),
                    }
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub levels: Vec<usize>,
    pub queries_per_worker: usize,
    /// Serial queries run once before the first level.
    pub warmup: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self { levels: DEFAULT_LEVELS.to_vec(), queries_per_worker: 20, warmup: 20 }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub median_ms: f64,
    pub p95_ms: f64,
    pub mean_ms: f64,
}

impl Summary {
    pub fn of(samples: &[f64]) -> Option<Self> {
        if samples.is_empty() {
            return None;
        }
        let mut s = samples.to_vec();
        s.sort_by(f64::total_cmp);
        Some(Self {
            median_ms: percentile(&s, 0.5),
            p95_ms: percentile(&s, 0.95),
            mean_ms: s.iter().sum::<f64>() / s.len() as f64,
        })
    }
}

/// Linear interpolation between closest ranks; `sorted` must be ascending and non-empty.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelStats {
    pub level: usize,
    pub queries: usize,
    pub errors: usize,
    pub wall_ms: f64,
    pub throughput_qps: f64,
    pub embed: Summary,
    pub search: Summary,
    pub hydrate: Summary,
    pub total: Summary,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub samples: Vec<StageLatency>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub schema_version: u32,
    pub kind: String,
    pub vectors: usize,
    pub levels: Vec<LevelStats>,
}

impl LatencyReport {
    pub fn level(&self, level: usize) -> Option<&LevelStats> {
        self.levels.iter().find(|l| l.level == level)
    }
}

/// Runs every configured level against `engine`, cycling through `requests`.
/// With `keep_samples` each level also carries its raw per-query timings.
pub fn latency_bench(
    engine: &Engine,
    requests: &[SearchRequest],
    config: &BenchConfig,
    keep_samples: bool,
) -> Result<LatencyReport, EvalError> {
    if requests.is_empty() {
        return Err(EvalError::Setup("no benchmark queries".into()));
    }
    if config.levels.iter().any(|&l| l == 0) || config.queries_per_worker == 0 {
        return Err(EvalError::Setup("levels and queries per worker must be positive".into()));
    }
    if !engine.index().is_trained() || engine.index().is_empty() {
        return Err(EvalError::Setup("index is not trained or holds no vectors".into()));
    }
    let allow = Allowlist::Disabled;
    for req in requests.iter().cycle().take(config.warmup) {
        engine.execute_search(req, "latency-bench", &allow)?;
    }

    let mut levels = Vec::with_capacity(config.levels.len());
    for &level in &config.levels {
        let barrier = Barrier::new(level);
        let started = Instant::now();
        let per_worker: Vec<Vec<Result<StageLatency, String>>> = std::thread::scope(|s| {
            let handles: Vec<_> = (0..level)
                .map(|w| {
                    let barrier = &barrier;
                    let allow = &allow;
                    s.spawn(move || {
                        barrier.wait();
                        (0..config.queries_per_worker)
                            .map(|i| {
                                let req = &requests[(w * config.queries_per_worker + i) % requests.len()];
                                engine
                                    .execute_search(req, "latency-bench", allow)
                                    .map(|r| r.latency)
                                    .map_err(|e| e.to_string())
                            })
                            .collect()
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("bench worker panicked")).collect()
        });
        let wall_ms = started.elapsed().as_secs_f64() * 1e3;
        let all: Vec<Result<StageLatency, String>> = per_worker.into_iter().flatten().collect();
        let ok: Vec<StageLatency> = all.iter().filter_map(|r| r.as_ref().ok().copied()).collect();
        if let Some(Err(e)) = all.iter().find(|r| r.is_err()) {
            tracing::warn!(level, error = %e, "benchmark query failed");
        }
        let pick = |f: fn(&StageLatency) -> f64| Summary::of(&ok.iter().map(f).collect::<Vec<_>>()).unwrap_or_default();
        levels.push(LevelStats {
            level,
            queries: all.len(),
            errors: all.len() - ok.len(),
            wall_ms,
            throughput_qps: ok.len() as f64 / (wall_ms / 1e3),
            embed: pick(|l| l.embed_ms),
            search: pick(|l| l.search_ms),
            hydrate: pick(|l| l.hydrate_ms),
            total: pick(|l| l.total_ms),
            samples: if keep_samples { ok } else { Vec::new() },
        });
    }
    Ok(LatencyReport {
        schema_version: REPORT_SCHEMA_VERSION,
        kind: "latency".into(),
        vectors: engine.index().len(),
        levels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use notesearch_core::embedding::ReferenceEmbedder;

    #[test]
    fn percentiles() {
        let s = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(percentile(&s, 0.5), 2.5);
        assert_eq!(percentile(&s, 0.0), 1.0);
        assert_eq!(percentile(&s, 1.0), 4.0);
        assert!((percentile(&s, 0.95) - 3.85).abs() < 1e-12);
        assert_eq!(Summary::of(&[]), None);
        assert_eq!(Summary::of(&[5.0]).unwrap(), Summary { median_ms: 5.0, p95_ms: 5.0, mean_ms: 5.0 });
    }

    #[test]
    fn precomputed_matches_inner_and_counts_misses() {
        let inner: Arc<dyn Embedder> = Arc::new(ReferenceEmbedder::new(32));
        let pre = PrecomputedEmbedder::warm(inner.clone(), ["seizure onset", "port site"]).unwrap();
        assert_eq!(pre.embed_query("seizure onset").unwrap(), inner.embed_query("seizure onset").unwrap());
        assert_eq!(pre.misses(), 0);
        assert_eq!(pre.embed_query("other").unwrap(), inner.embed_query("other").unwrap());
        assert_eq!(pre.misses(), 1);

        let fixed = PrecomputedEmbedder::from_vectors(4, [("q".to_string(), EmbeddingVector::basis(4, 2))]);
        assert_eq!(fixed.embed_query("q").unwrap(), EmbeddingVector::basis(4, 2));
        assert!(fixed.embed_query("r").is_err());
    }
}
