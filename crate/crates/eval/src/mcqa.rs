//! Multiple-choice QA over retrieved chunks.
//!
//! Each item asks about one patient. The question is embedded, the top-k
//! chunks restricted to that patient are retrieved, and an [`Answerer`] picks
//! an option from that context `runs` times. The final answer is the
//! majority vote of the non-abstaining runs.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use chrono::NaiveDate;
use notesearch_core::ann::{CategoricalField, FilterSpec, NumericField, SearchOverrides, VectorIndex};
use notesearch_core::chunker::{Chunker, ChunkingConfig};
use notesearch_core::embedding::Embedder;
use notesearch_core::ingest::PlantedFact;
use notesearch_core::store::{days_since_epoch, NoteStore};
use notesearch_core::NoteId;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::stats::{wilson_ci, Z_95};
use crate::{EvalError, REPORT_SCHEMA_VERSION};

pub const OPTION_COUNT: usize = 5;
pub const DEFAULT_RUNS: usize = 5;
pub const DEFAULT_K: usize = 20;
pub const K_SWEEP: [usize; 7] = [1, 5, 10, 20, 30, 40, 50];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct McqaItem {
    pub id: String,
    pub question: String,
    pub mrn: String,
    pub options: Vec<String>,
    pub answer_index: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub date_from: Option<NaiveDate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub date_to: Option<NaiveDate>,
}

impl McqaItem {
    pub fn validate(&self) -> Result<(), EvalError> {
        let bad = |reason: String| EvalError::InvalidItem { id: self.id.clone(), reason };
        if self.options.len() != OPTION_COUNT {
            return Err(bad(format!("expected {OPTION_COUNT} options, got {}", self.options.len())));
        }
        if self.answer_index >= OPTION_COUNT {
            return Err(bad(format!("answer index {} out of range", self.answer_index)));
        }
        let mut seen: Vec<String> = self.options.iter().map(|o| o.trim().to_lowercase()).collect();
        seen.sort();
        seen.dedup();
        if seen.len() != OPTION_COUNT || seen.iter().any(String::is_empty) {
            return Err(bad("options must be distinct and non-empty".into()));
        }
        if self.question.trim().is_empty() || self.mrn.is_empty() {
            return Err(bad("question and mrn are required".into()));
        }
        Ok(())
    }

    pub fn correct_option(&self) -> &str {
        &self.options[self.answer_index]
    }
}

/// One item per planted fact, options shuffled deterministically from `seed`.
pub fn items_from_facts(facts: &[PlantedFact], seed: u64) -> Result<Vec<McqaItem>, EvalError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    facts
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let mut options: Vec<String> = std::iter::once(f.answer.clone()).chain(f.distractors.iter().cloned()).collect();
            options.shuffle(&mut rng);
            let answer_index = options.iter().position(|o| *o == f.answer).expect("answer is among the options");
            let item = McqaItem {
                id: format!("q{i:05}"),
                question: f.question.clone(),
                mrn: f.patient_mrn.clone(),
                options,
                answer_index,
                date_from: None,
                date_to: None,
            };
            item.validate()?;
            Ok(item)
        })
        .collect()
}

pub fn read_items(path: &Path) -> Result<Vec<McqaItem>, EvalError> {
    let mut out = Vec::new();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let item: McqaItem = serde_json::from_str(&line)?;
        item.validate()?;
        out.push(item);
    }
    Ok(out)
}

pub fn write_items(path: &Path, items: &[McqaItem]) -> Result<(), EvalError> {
    let mut w = BufWriter::new(File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Modal vote; ties go to the smallest option index among the modes.
pub fn majority_vote(votes: &[usize]) -> Result<usize, EvalError> {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for &v in votes {
        *counts.entry(v).or_default() += 1;
    }
    let best = counts.values().copied().max().ok_or(EvalError::EmptyVotes)?;
    Ok(counts.into_iter().find(|&(_, c)| c == best).map(|(v, _)| v).expect("a mode exists"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievedChunk {
    pub note_id: NoteId,
    pub ordinal: u32,
    pub score: f64,
    pub text: String,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("answerer failed: {0}")]
pub struct AnswerError(pub String);

/// Picks an option given the question and retrieved context. `Ok(None)` is an
/// abstention. `run` numbers the attempts so stochastic answerers can vary.
pub trait Answerer: Send + Sync {
    fn answer(&self, item: &McqaItem, context: &[RetrievedChunk], run: usize) -> Result<Option<usize>, AnswerError>;
}

/// Chooses the first option that appears verbatim (case-insensitively) in any
/// retrieved chunk, abstaining when none does.
#[derive(Debug, Clone, Copy, Default)]
pub struct ContainmentAnswerer;

impl Answerer for ContainmentAnswerer {
    fn answer(&self, item: &McqaItem, context: &[RetrievedChunk], _run: usize) -> Result<Option<usize>, AnswerError> {
        let haystack: Vec<String> = context.iter().map(|c| c.text.to_lowercase()).collect();
        Ok(item.options.iter().position(|o| {
            let needle = o.to_lowercase();
            haystack.iter().any(|h| h.contains(&needle))
        }))
    }
}

/// Always answers the same option.
#[derive(Debug, Clone, Copy)]
pub struct FixedAnswerer(pub usize);

impl Answerer for FixedAnswerer {
    fn answer(&self, _: &McqaItem, _: &[RetrievedChunk], _: usize) -> Result<Option<usize>, AnswerError> {
        Ok(Some(self.0))
    }
}

const LETTERS: [char; OPTION_COUNT] = ['A', 'B', 'C', 'D', 'E'];

pub fn build_prompt(item: &McqaItem, context: &[RetrievedChunk]) -> String {
    let mut p = String::from("Answer the question using only the clinical note excerpts below.\n\n");
    for (i, c) in context.iter().enumerate() {
        p.push_str(&format!("[{}] (note {}, chunk {})\n{}\n\n", i + 1, c.note_id, c.ordinal, c.text.trim()));
    }
    p.push_str(&format!("Question: {}\n", item.question));
    for (letter, option) in LETTERS.iter().zip(&item.options) {
        p.push_str(&format!("{letter}. {option}\n"));
    }
    p.push_str("Reply with the letter of the single best option.");
    p
}

/// Reads the first standalone option letter in a model reply.
pub fn parse_choice(reply: &str) -> Option<usize> {
    reply
        .split(|c: char| !c.is_ascii_alphanumeric())
        .find_map(|tok| match tok {
            t if t.len() == 1 => LETTERS.iter().position(|l| t.eq_ignore_ascii_case(&l.to_string())),
            _ => None,
        })
}

/// Chat-completions client for an external model. Sends [`build_prompt`] as a
/// single user message and parses the reply with [`parse_choice`].
pub struct RemoteAnswerer {
    url: String,
    model: String,
    temperature: f64,
    agent: ureq::Agent,
}

impl RemoteAnswerer {
    pub fn new(url: impl Into<String>, model: impl Into<String>, temperature: f64, timeout: Duration) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder().timeout_global(Some(timeout)).build().into();
        Self { url: url.into(), model: model.into(), temperature, agent }
    }

    fn request_body(&self, item: &McqaItem, context: &[RetrievedChunk], run: usize) -> serde_json::Value {
        serde_json::json!({
            "model": self.model,
            "temperature": self.temperature,
            "seed": run,
            "messages": [{ "role": "user", "content": build_prompt(item, context) }],
        })
    }
}

impl Answerer for RemoteAnswerer {
    fn answer(&self, item: &McqaItem, context: &[RetrievedChunk], run: usize) -> Result<Option<usize>, AnswerError> {
        let err = |e: ureq::Error| AnswerError(e.to_string());
        let body: serde_json::Value = self
            .agent
            .post(&self.url)
            .send_json(self.request_body(item, context, run))
            .map_err(err)?
            .body_mut()
            .read_json()
            .map_err(err)?;
        let reply = body["choices"][0]["message"]["content"]
            .as_str()
            .ok_or_else(|| AnswerError("reply has no message content".into()))?;
        Ok(parse_choice(reply))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemOutcome {
    pub item_id: String,
    pub retrieved: usize,
    pub votes: Vec<Option<usize>>,
    pub answer: Option<usize>,
    pub correct: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRun {
    pub k: usize,
    pub runs: usize,
    /// Items scored, excluding errored ones.
    pub total: usize,
    pub correct: usize,
    pub errored: usize,
    pub accuracy: f64,
    pub wilson_95: Option<(f64, f64)>,
    pub outcomes: Vec<ItemOutcome>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KSweepReport {
    pub schema_version: u32,
    pub kind: String,
    pub runs: Vec<EvalRun>,
}

/// Retrieval side of the benchmark: patient-scoped chunk search plus chunk
/// text recovered by re-chunking the hydrated notes.
pub struct McqaHarness {
    embedder: Arc<dyn Embedder>,
    index: Arc<dyn VectorIndex>,
    store: Arc<NoteStore>,
    chunker: Chunker,
    overrides: SearchOverrides,
}

impl McqaHarness {
    pub fn new(
        embedder: Arc<dyn Embedder>,
        index: Arc<dyn VectorIndex>,
        store: Arc<NoteStore>,
        chunking: ChunkingConfig,
    ) -> Result<Self, EvalError> {
        Ok(Self { embedder, index, store, chunker: Chunker::new(chunking)?, overrides: SearchOverrides::default() })
    }

    pub fn with_overrides(mut self, overrides: SearchOverrides) -> Self {
        self.overrides = overrides;
        self
    }

    pub fn index(&self) -> &Arc<dyn VectorIndex> {
        &self.index
    }

    pub fn retrieve(&self, item: &McqaItem, k: usize) -> Result<Vec<RetrievedChunk>, EvalError> {
        self.retrieve_with(item, k, self.overrides)
    }

    fn retrieve_with(&self, item: &McqaItem, k: usize, overrides: SearchOverrides) -> Result<Vec<RetrievedChunk>, EvalError> {
        let mut filter = FilterSpec::new().include(CategoricalField::PatientId, [item.mrn.as_str()]);
        if item.date_from.is_some() || item.date_to.is_some() {
            let day = |d: NaiveDate| days_since_epoch(d) as f64;
            filter = filter.range(NumericField::Date, item.date_from.map(day), item.date_to.map(day));
        }
        let query = self.embedder.embed_query(&item.question)?;
        let hits = self.index.search(&query, k, &filter, overrides)?;

        let mut ids: Vec<NoteId> = hits.iter().map(|h| h.note_id).collect();
        ids.sort_unstable();
        ids.dedup();
        let hydrated = self.store.get_notes(&ids)?;
        if !hydrated.missing.is_empty() {
            tracing::warn!(item = %item.id, missing = hydrated.missing.len(), "retrieved notes absent from the store");
        }
        let mut chunk_text: HashMap<NoteId, Vec<String>> = HashMap::new();
        for (id, note) in &hydrated.records {
            chunk_text.insert(*id, self.chunker.chunk(*id, &note.text).into_iter().map(|c| c.text).collect());
        }
        Ok(hits
            .into_iter()
            .filter_map(|h| {
                let text = chunk_text.get(&h.note_id)?.get(h.chunk_id.ordinal as usize)?.clone();
                Some(RetrievedChunk { note_id: h.note_id, ordinal: h.chunk_id.ordinal, score: h.score, text })
            })
            .collect())
    }

    fn score_item(&self, item: &McqaItem, answerer: &dyn Answerer, k: usize, runs: usize, overrides: SearchOverrides) -> ItemOutcome {
        let mut outcome = ItemOutcome {
            item_id: item.id.clone(),
            retrieved: 0,
            votes: Vec::with_capacity(runs),
            answer: None,
            correct: false,
            error: None,
        };
        let context = match self.retrieve_with(item, k, overrides) {
            Ok(c) => c,
            Err(e) => {
                outcome.error = Some(e.to_string());
                return outcome;
            }
        };
        outcome.retrieved = context.len();
        for run in 0..runs {
            match answerer.answer(item, &context, run) {
                Ok(v) => outcome.votes.push(v.filter(|&i| i < item.options.len())),
                Err(e) => {
                    outcome.error = Some(e.to_string());
                    return outcome;
                }
            }
        }
        let cast: Vec<usize> = outcome.votes.iter().flatten().copied().collect();
        outcome.answer = majority_vote(&cast).ok();
        outcome.correct = outcome.answer == Some(item.answer_index);
        outcome
    }

    /// Scores every item at depth `k`. Items whose retrieval or answerer
    /// fails are reported as errored and left out of the accuracy.
    pub fn run(&self, items: &[McqaItem], answerer: &dyn Answerer, k: usize, runs: usize) -> Result<EvalRun, EvalError> {
        self.run_with(items, answerer, k, runs, self.overrides)
    }

    /// Every chunk of the patient, found by scanning all partitions and
    /// rescoring all candidates. `k` in the result is the index size.
    pub fn run_exhaustive(&self, items: &[McqaItem], answerer: &dyn Answerer, runs: usize) -> Result<EvalRun, EvalError> {
        self.run_with(items, answerer, self.index.len().max(1), runs, SearchOverrides::exhaustive())
    }

    fn run_with(
        &self,
        items: &[McqaItem],
        answerer: &dyn Answerer,
        k: usize,
        runs: usize,
        overrides: SearchOverrides,
    ) -> Result<EvalRun, EvalError> {
        if k == 0 || runs == 0 {
            return Err(EvalError::Setup("k and runs must be positive".into()));
        }
        for item in items {
            item.validate()?;
        }
        let outcomes: Vec<ItemOutcome> = items.par_iter().map(|item| self.score_item(item, answerer, k, runs, overrides)).collect();
        let errored = outcomes.iter().filter(|o| o.error.is_some()).count();
        let total = outcomes.len() - errored;
        let correct = outcomes.iter().filter(|o| o.correct).count();
        let accuracy = if total == 0 { 0.0 } else { correct as f64 / total as f64 };
        let wilson_95 = wilson_ci(correct as u64, total as u64, Z_95).ok();
        Ok(EvalRun { k, runs, total, correct, errored, accuracy, wilson_95, outcomes })
    }

    pub fn k_sweep(
        &self,
        items: &[McqaItem],
        answerer: &dyn Answerer,
        ks: &[usize],
        runs: usize,
    ) -> Result<KSweepReport, EvalError> {
        let runs = ks.iter().map(|&k| self.run(items, answerer, k, runs)).collect::<Result<_, _>>()?;
        Ok(KSweepReport { schema_version: REPORT_SCHEMA_VERSION, kind: "mcqa".into(), runs })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn item(answer: usize) -> McqaItem {
        McqaItem {
            id: "q1".into(),
            question: "Which genetic condition is documented?".into(),
            mrn: "0000001".into(),
            options: ["Rett syndrome", "Fragile X syndrome", "Angelman syndrome", "Trisomy 21", "Turner syndrome"]
                .map(String::from)
                .to_vec(),
            answer_index: answer,
            date_from: None,
            date_to: None,
        }
    }

    fn chunk(text: &str) -> RetrievedChunk {
        RetrievedChunk { note_id: NoteId(1), ordinal: 0, score: 1.0, text: text.into() }
    }

    #[test]
    fn vote_examples() {
        assert_eq!(majority_vote(&[0, 0, 1, 2, 0]).unwrap(), 0);
        assert_eq!(majority_vote(&[2, 2, 2, 4, 0]).unwrap(), 2);
        assert_eq!(majority_vote(&[1, 1, 3, 3, 0]).unwrap(), 1);
        assert_eq!(majority_vote(&[3, 3, 1, 1]).unwrap(), 1);
        assert_eq!(majority_vote(&[4]).unwrap(), 4);
        assert!(matches!(majority_vote(&[]), Err(EvalError::EmptyVotes)));
    }

    proptest! {
        #[test]
        fn vote_is_permutation_invariant(votes in prop::collection::vec(0usize..5, 1..12), seed in any::<u64>()) {
            let mut shuffled = votes.clone();
            shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(majority_vote(&votes).unwrap(), majority_vote(&shuffled).unwrap());
        }
    }

    #[test]
    fn item_validation() {
        assert!(item(3).validate().is_ok());
        assert!(item(5).validate().is_err());
        let mut dup = item(0);
        dup.options[1] = "rett syndrome".into();
        assert!(dup.validate().is_err());
        let mut four = item(0);
        four.options.pop();
        assert!(four.validate().is_err());
    }

    #[test]
    fn containment_answerer() {
        let it = item(3);
        let ctx = [chunk("no findings"), chunk("History notable for TRISOMY 21 and hypotonia.")];
        assert_eq!(ContainmentAnswerer.answer(&it, &ctx, 0).unwrap(), Some(3));
        assert_eq!(ContainmentAnswerer.answer(&it, &ctx[..1], 0).unwrap(), None);
    }

    #[test]
    fn prompt_and_reply_parsing() {
        let p = build_prompt(&item(0), &[chunk("seizure at age 4")]);
        assert!(p.contains("[1] (note 1, chunk 0)\nseizure at age 4") && p.contains("E. Turner syndrome"));
        assert_eq!(parse_choice("The answer is C."), Some(2));
        assert_eq!(parse_choice("(b)"), Some(1));
        assert_eq!(parse_choice("Answer: E"), Some(4));
        assert_eq!(parse_choice("none of these"), None);
    }

    #[test]
    fn items_from_facts_place_the_answer() {
        let fact = PlantedFact {
            patient_mrn: "0000009".into(),
            kind: notesearch_core::ingest::FactKind::Condition,
            question: "Which genetic condition has been diagnosed?".into(),
            answer: "Trisomy 21".into(),
            distractors: ["Rett syndrome", "Fragile X syndrome", "Angelman syndrome", "Turner syndrome"]
                .map(String::from)
                .to_vec(),
            note_ids: vec![NoteId(4)],
        };
        let facts = vec![fact; 40];
        let items = items_from_facts(&facts, 1).unwrap();
        assert!(items.iter().all(|i| i.correct_option() == "Trisomy 21" && i.mrn == "0000009"));
        let positions: std::collections::BTreeSet<usize> = items.iter().map(|i| i.answer_index).collect();
        assert_eq!(positions.len(), OPTION_COUNT);
        assert_eq!(items, items_from_facts(&facts, 1).unwrap());
    }

    #[test]
    fn items_roundtrip_jsonl() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("items.jsonl");
        let mut dated = item(2);
        dated.date_from = NaiveDate::from_ymd_opt(2020, 1, 1);
        write_items(&path, &[item(1), dated.clone()]).unwrap();
        assert_eq!(read_items(&path).unwrap(), vec![item(1), dated]);
    }
}
