//! Text embedding providers.
//!
//! Every provider maps text to unit-norm vectors of a fixed dimension.
//! Queries and documents take different pathways: a query is prefixed with a
//! retrieval instruction before embedding, documents never are.

mod reference;
mod remote;

use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use reference::{reference_embed, token_hash, ReferenceEmbedder};
pub use remote::{EmbedRequest, EmbedResponse, RemoteEmbedder};

pub const DEFAULT_QUERY_INSTRUCTION: &str =
    "Given a clinical question, retrieve relevant passages from clinical notes";

/// Tolerance on the unit-norm invariant.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EmbedError {
    #[error("cannot normalize a zero vector")]
    ZeroNorm,
    #[error("vector contains non-finite values")]
    NonFinite,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("empty input")]
    EmptyInput,
    #[error("transient provider failure: {0}")]
    Transient(String),
    #[error("permanent provider failure: {0}")]
    Permanent(String),
}

impl EmbedError {
    pub fn is_retriable(&self) -> bool {
        matches!(self, EmbedError::Transient(_))
    }
}

/// A unit-norm dense vector.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct EmbeddingVector(Vec<f32>);

impl EmbeddingVector {
    /// Wraps values already known to be unit norm. Checked in debug builds.
    pub fn from_unit(values: Vec<f32>) -> Self {
        debug_assert!((norm(&values) - 1.0).abs() < 1e-4, "vector is not unit norm");
        Self(values)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f32> {
        self.0
    }

    pub fn dot(&self, other: &EmbeddingVector) -> f64 {
        exact_dot(&self.0, &other.0)
    }

    pub fn basis(dim: usize, axis: usize) -> Self {
        let mut v = vec![0.0; dim];
        v[axis] = 1.0;
        Self(v)
    }
}

impl<'de> Deserialize<'de> for EmbeddingVector {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let raw = Vec::<f32>::deserialize(d)?;
        l2_normalize(raw).map_err(serde::de::Error::custom)
    }
}

impl AsRef<[f32]> for EmbeddingVector {
    fn as_ref(&self) -> &[f32] {
        &self.0
    }
}

/// Dot product accumulated in f64, left to right.
pub fn exact_dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

fn norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt()
}

pub fn l2_normalize(mut v: Vec<f32>) -> Result<EmbeddingVector, EmbedError> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(EmbedError::NonFinite);
    }
    let n = norm(&v);
    if n == 0.0 {
        return Err(EmbedError::ZeroNorm);
    }
    for x in &mut v {
        *x = (*x as f64 / n) as f32;
    }
    Ok(EmbeddingVector(v))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbedMode {
    Document,
    Query,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbedderConfig {
    pub dimension: usize,
    pub query_instruction: String,
    pub provider_id: String,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        Self {
            dimension: 256,
            query_instruction: DEFAULT_QUERY_INSTRUCTION.to_string(),
            provider_id: "reference".to_string(),
        }
    }
}

/// Text in, unit vector out. Implementations must be safe to call concurrently.
pub trait Embedder: Send + Sync {
    fn dimension(&self) -> usize;

    fn query_instruction(&self) -> &str;

    /// Embeds already-prepared texts in the given mode. Callers normally use
    /// [`Embedder::embed_documents`] or [`Embedder::embed_query`].
    fn embed(&self, texts: &[String], mode: EmbedMode) -> Result<Vec<EmbeddingVector>, EmbedError>;

    fn embed_documents(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        if texts.is_empty() {
            return Err(EmbedError::EmptyInput);
        }
        self.embed(texts, EmbedMode::Document)
    }

    fn embed_query(&self, text: &str) -> Result<EmbeddingVector, EmbedError> {
        if text.trim().is_empty() {
            return Err(EmbedError::EmptyInput);
        }
        let composed = compose_query(self.query_instruction(), text);
        self.embed(&[composed], EmbedMode::Query)?.pop().ok_or_else(|| {
            EmbedError::Permanent("provider returned no vector".into())
        })
    }
}

/// Text actually embedded for a query: the instruction, a newline, then the question.
pub fn compose_query(instruction: &str, text: &str) -> String {
    if instruction.is_empty() {
        text.to_string()
    } else {
        format!("Instruct: {instruction}\nQuery: {text}")
    }
}

/// Retries transient failures with linear backoff.
pub fn embed_with_retry(
    embedder: &dyn Embedder,
    texts: &[String],
    attempts: usize,
    backoff: Duration,
) -> Result<Vec<EmbeddingVector>, EmbedError> {
    let mut last = None;
    for attempt in 0..attempts.max(1) {
        match embedder.embed_documents(texts) {
            Ok(v) => return Ok(v),
            Err(e) if e.is_retriable() => {
                tracing::warn!(attempt, error = %e, "transient embedding failure");
                last = Some(e);
                std::thread::sleep(backoff * (attempt as u32 + 1));
            }
            Err(e) => return Err(e),
        }
    }
    Err(last.unwrap_or(EmbedError::EmptyInput))
}
