//! HTTP transport for an out-of-process embedding provider.
//!
//! `POST {url}` with `{"texts": [...], "mode": "document" | "query"}` and a
//! response of `{"vectors": [[f32; D], ...]}` in request order. Connection
//! failures, timeouts, 429 and 5xx are transient; everything else is permanent.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{l2_normalize, EmbedError, EmbedMode, Embedder, EmbeddingVector};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EmbedRequest {
    pub texts: Vec<String>,
    pub mode: EmbedMode,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EmbedResponse {
    pub vectors: Vec<Vec<f32>>,
}

pub struct RemoteEmbedder {
    url: String,
    dim: usize,
    instruction: String,
    agent: ureq::Agent,
}

impl RemoteEmbedder {
    pub fn new(url: impl Into<String>, dim: usize, instruction: impl Into<String>, timeout: Duration) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self { url: url.into(), dim, instruction: instruction.into(), agent }
    }
}

fn classify(err: ureq::Error) -> EmbedError {
    match err {
        ureq::Error::Io(_)
        | ureq::Error::Timeout(_)
        | ureq::Error::ConnectionFailed
        | ureq::Error::HostNotFound
        | ureq::Error::BodyStalled => EmbedError::Transient(err.to_string()),
        other => EmbedError::Permanent(other.to_string()),
    }
}

impl Embedder for RemoteEmbedder {
    fn dimension(&self) -> usize {
        self.dim
    }

    fn query_instruction(&self) -> &str {
        &self.instruction
    }

    fn embed(&self, texts: &[String], mode: EmbedMode) -> Result<Vec<EmbeddingVector>, EmbedError> {
        let req = EmbedRequest { texts: texts.to_vec(), mode };
        let mut resp = self.agent.post(&self.url).send_json(&req).map_err(classify)?;
        let status = resp.status().as_u16();
        if status == 429 || status >= 500 {
            return Err(EmbedError::Transient(format!("provider returned HTTP {status}")));
        }
        if !(200..300).contains(&status) {
            return Err(EmbedError::Permanent(format!("provider returned HTTP {status}")));
        }
        let body: EmbedResponse = resp.body_mut().read_json().map_err(classify)?;
        if body.vectors.len() != texts.len() {
            return Err(EmbedError::Permanent(format!(
                "provider returned {} vectors for {} texts",
                body.vectors.len(),
                texts.len()
            )));
        }
        body.vectors
            .into_iter()
            .map(|v| {
                if v.len() != self.dim {
                    return Err(EmbedError::DimensionMismatch { expected: self.dim, got: v.len() });
                }
                l2_normalize(v)
            })
            .collect()
    }
}
