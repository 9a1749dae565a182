//! Overlapping token-window chunking of note text.
//!
//! Windows advance by `chunk_tokens - overlap_tokens`. Before a window is
//! closed, the chunker looks back up to `boundary_window_tokens` tokens for a
//! paragraph break (blank line) or, failing that, a line break, and ends the
//! window on the token preceding it. The next window always starts
//! `overlap_tokens` tokens before the (possibly retracted) end.
//!
//! All offsets are UTF-8 byte offsets into the note text.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ids::{ChunkId, NoteId};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ChunkError {
    #[error("invalid chunking config: {0}")]
    InvalidConfig(String),
}

/// One token of the source text, as a half-open byte range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSpan {
    pub start: usize,
    pub end: usize,
    pub index: usize,
}

pub trait Tokenizer: Send + Sync {
    fn tokenize(&self, text: &str) -> Vec<TokenSpan>;
}

/// Splits on whitespace; inside a whitespace-delimited run, maximal runs of
/// alphanumeric characters and maximal runs of other characters are separate
/// tokens. `"HPI: afebrile"` yields `HPI`, `:`, `afebrile`.
#[derive(Debug, Clone, Copy, Default)]
pub struct SimpleTokenizer;

#[derive(Clone, Copy, PartialEq, Eq)]
enum CharClass {
    Space,
    Word,
    Punct,
}

fn classify(c: char) -> CharClass {
    if c.is_whitespace() {
        CharClass::Space
    } else if c.is_alphanumeric() {
        CharClass::Word
    } else {
        CharClass::Punct
    }
}

impl Tokenizer for SimpleTokenizer {
    fn tokenize(&self, text: &str) -> Vec<TokenSpan> {
        let mut spans = Vec::new();
        let mut current: Option<(usize, CharClass)> = None;
        for (pos, c) in text.char_indices() {
            let class = classify(c);
            match current {
                Some((_, cls)) if cls == class => {}
                Some((start, cls)) => {
                    if cls != CharClass::Space {
                        spans.push(TokenSpan { start, end: pos, index: spans.len() });
                    }
                    current = Some((pos, class));
                }
                None => current = Some((pos, class)),
            }
        }
        if let Some((start, cls)) = current {
            if cls != CharClass::Space {
                spans.push(TokenSpan { start, end: text.len(), index: spans.len() });
            }
        }
        spans
    }
}

pub fn tokenize(text: &str) -> Vec<TokenSpan> {
    SimpleTokenizer.tokenize(text)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkingConfig {
    pub chunk_tokens: usize,
    pub overlap_tokens: usize,
    pub boundary_window_tokens: usize,
}

impl Default for ChunkingConfig {
    fn default() -> Self {
        Self { chunk_tokens: 300, overlap_tokens: 50, boundary_window_tokens: 30 }
    }
}

impl ChunkingConfig {
    pub fn new(chunk_tokens: usize, overlap_tokens: usize, boundary_window_tokens: usize) -> Result<Self, ChunkError> {
        let cfg = Self { chunk_tokens, overlap_tokens, boundary_window_tokens };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ChunkError> {
        if self.chunk_tokens == 0 {
            return Err(ChunkError::InvalidConfig("chunk_tokens must be positive".into()));
        }
        if self.overlap_tokens >= self.chunk_tokens {
            return Err(ChunkError::InvalidConfig(format!(
                "overlap_tokens ({}) must be smaller than chunk_tokens ({})",
                self.overlap_tokens, self.chunk_tokens
            )));
        }
        if self.boundary_window_tokens >= self.stride() {
            return Err(ChunkError::InvalidConfig(format!(
                "boundary_window_tokens ({}) must be smaller than the stride ({})",
                self.boundary_window_tokens,
                self.stride()
            )));
        }
        Ok(())
    }

    pub fn stride(&self) -> usize {
        self.chunk_tokens - self.overlap_tokens
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub note_id: NoteId,
    pub ordinal: u32,
    pub text: String,
    pub first_token: usize,
    pub last_token: usize,
    pub char_start: usize,
    pub char_end: usize,
}

impl Chunk {
    pub fn id(&self) -> ChunkId {
        ChunkId::new(self.note_id, self.ordinal)
    }

    pub fn manifest_line(&self) -> ChunkManifestLine {
        ChunkManifestLine {
            note_id: self.note_id,
            chunk_ordinal: self.ordinal,
            first_token: self.first_token,
            last_token: self.last_token,
            char_start: self.char_start,
            char_end: self.char_end,
        }
    }
}

/// Line-delimited chunk manifest record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkManifestLine {
    pub note_id: NoteId,
    pub chunk_ordinal: u32,
    pub first_token: usize,
    pub last_token: usize,
    pub char_start: usize,
    pub char_end: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum BreakKind {
    Line,
    Paragraph,
}

fn break_after(text: &str, tokens: &[TokenSpan], j: usize) -> Option<BreakKind> {
    let gap = &text[tokens[j].end..tokens[j + 1].start];
    match gap.bytes().filter(|&b| b == b'\n').count() {
        0 => None,
        1 => Some(BreakKind::Line),
        _ => Some(BreakKind::Paragraph),
    }
}

/// Inclusive token windows `(first, last)` for a tokenized text.
fn windows(text: &str, tokens: &[TokenSpan], cfg: &ChunkingConfig) -> Vec<(usize, usize)> {
    let n = tokens.len();
    let mut out = Vec::new();
    if n == 0 {
        return out;
    }
    let mut start = 0usize;
    loop {
        let nominal_end = start + cfg.chunk_tokens - 1;
        if nominal_end >= n - 1 {
            out.push((start, n - 1));
            return out;
        }
        let lo = nominal_end.saturating_sub(cfg.boundary_window_tokens).max(start);
        let mut best: Option<(BreakKind, usize)> = None;
        for j in (lo..=nominal_end).rev() {
            if let Some(kind) = break_after(text, tokens, j) {
                if best.is_none_or(|(k, _)| kind > k) {
                    best = Some((kind, j));
                }
            }
        }
        let end = best.map_or(nominal_end, |(_, j)| j);
        out.push((start, end));
        start = end + 1 - cfg.overlap_tokens;
    }
}

pub struct Chunker<T = SimpleTokenizer> {
    cfg: ChunkingConfig,
    tokenizer: T,
}

impl Chunker<SimpleTokenizer> {
    pub fn new(cfg: ChunkingConfig) -> Result<Self, ChunkError> {
        Self::with_tokenizer(cfg, SimpleTokenizer)
    }
}

impl<T: Tokenizer> Chunker<T> {
    pub fn with_tokenizer(cfg: ChunkingConfig, tokenizer: T) -> Result<Self, ChunkError> {
        cfg.validate()?;
        Ok(Self { cfg, tokenizer })
    }

    pub fn config(&self) -> &ChunkingConfig {
        &self.cfg
    }

    pub fn chunk(&self, note_id: NoteId, text: &str) -> Vec<Chunk> {
        let tokens = self.tokenizer.tokenize(text);
        windows(text, &tokens, &self.cfg)
            .into_iter()
            .enumerate()
            .map(|(ordinal, (first, last))| {
                let char_start = tokens[first].start;
                let char_end = tokens[last].end;
                Chunk {
                    note_id,
                    ordinal: ordinal as u32,
                    text: text[char_start..char_end].to_string(),
                    first_token: first,
                    last_token: last,
                    char_start,
                    char_end,
                }
            })
            .collect()
    }
}

pub fn chunk_note(note_id: NoteId, text: &str, cfg: &ChunkingConfig) -> Result<Vec<Chunk>, ChunkError> {
    Ok(Chunker::new(*cfg)?.chunk(note_id, text))
}

/// Number of chunks a boundary-free note of `n` tokens produces.
pub fn count_chunks(n: usize, cfg: &ChunkingConfig) -> usize {
    if n == 0 {
        0
    } else if n <= cfg.chunk_tokens {
        1
    } else {
        (n - cfg.chunk_tokens).div_ceil(cfg.stride()) + 1
    }
}
