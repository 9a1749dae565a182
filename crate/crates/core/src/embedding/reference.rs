//! Deterministic hashed bag-of-tokens embedder.
//!
//! Each alphanumeric token is lowercased and hashed with 64-bit FNV-1a
//! (offset basis XOR [`HASH_SEED`]), followed by the SplitMix64 finalizer.
//! The hash picks a dimension (`h % dim`) and a sign (top bit); token counts
//! accumulate with that sign and the result is L2-normalized. A text with no
//! alphanumeric tokens maps to the basis vector e0.

use super::{l2_normalize, EmbedError, EmbedMode, Embedder, EmbeddingVector, DEFAULT_QUERY_INSTRUCTION};
use crate::chunker::{SimpleTokenizer, Tokenizer};

pub const HASH_SEED: u64 = 0x5eed_c0de_2025_0001;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn token_hash(token: &str) -> u64 {
    let mut h = FNV_OFFSET ^ HASH_SEED;
    for b in token.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    // splitmix64 finalizer
    h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^ (h >> 31)
}

pub fn reference_embed(text: &str, dim: usize) -> EmbeddingVector {
    assert!(dim > 0, "dimension must be positive");
    let mut acc = vec![0.0f64; dim];
    for span in SimpleTokenizer.tokenize(text) {
        let token = &text[span.start..span.end];
        if !token.chars().any(char::is_alphanumeric) {
            continue;
        }
        let h = token_hash(&token.to_lowercase());
        let sign = if h >> 63 == 1 { -1.0 } else { 1.0 };
        acc[(h % dim as u64) as usize] += sign;
    }
    let raw: Vec<f32> = acc.into_iter().map(|x| x as f32).collect();
    match l2_normalize(raw) {
        Ok(v) => v,
        // no tokens, or every bucket cancelled out
        Err(_) => EmbeddingVector::basis(dim, 0),
    }
}

#[derive(Debug, Clone)]
pub struct ReferenceEmbedder {
    dim: usize,
    instruction: String,
}

impl ReferenceEmbedder {
    pub fn new(dim: usize) -> Self {
        Self::with_instruction(dim, DEFAULT_QUERY_INSTRUCTION)
    }

    pub fn with_instruction(dim: usize, instruction: impl Into<String>) -> Self {
        assert!(dim > 0, "dimension must be positive");
        Self { dim, instruction: instruction.into() }
    }
}

impl Embedder for ReferenceEmbedder {
    fn dimension(&self) -> usize {
        self.dim
    }

    fn query_instruction(&self) -> &str {
        &self.instruction
    }

    fn embed(&self, texts: &[String], _mode: EmbedMode) -> Result<Vec<EmbeddingVector>, EmbedError> {
        Ok(texts.iter().map(|t| reference_embed(t, self.dim)).collect())
    }
}
