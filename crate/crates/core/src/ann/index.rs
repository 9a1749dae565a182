use std::borrow::Cow;
use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap, HashSet};

use super::filter::{CategoricalField, CompiledFilter, Dictionary, FilterSpec, NumericField, MISSING};
use super::kmeans::{dot, train_partitions};
use super::quantize::{asymmetric_dot, quantize, Quantization};
use super::{IndexConfig, IndexError, InsertReport, NumericBounds, SearchOverrides, SearchResult, VectorEntry, VectorIndex, Vocabulary};
use crate::embedding::{exact_dot, EmbeddingVector};
use crate::ids::ChunkId;

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum Payload {
    Scalar8 { params: Vec<[f32; 2]>, codes: Vec<u8> },
    Full(Vec<f32>),
}

/// Members of one partition, stored column-wise so a scan reads only what it needs.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct PartitionBlock {
    pub(crate) ords: Vec<u32>,
    pub(crate) chunk_ids: Vec<ChunkId>,
    pub(crate) cat: Vec<[u32; 7]>,
    pub(crate) num: Vec<[f64; 2]>,
    pub(crate) payload: Payload,
}

impl PartitionBlock {
    pub(crate) fn empty(quantization: Quantization) -> Self {
        let payload = match quantization {
            Quantization::None => Payload::Full(Vec::new()),
            Quantization::Scalar8 => Payload::Scalar8 { params: Vec::new(), codes: Vec::new() },
        };
        Self { ords: Vec::new(), chunk_ids: Vec::new(), cat: Vec::new(), num: Vec::new(), payload }
    }

    pub(crate) fn len(&self) -> usize {
        self.ords.len()
    }

    fn push(&mut self, ord: u32, id: ChunkId, cat: [u32; 7], num: [f64; 2], vector: &[f32]) {
        self.ords.push(ord);
        self.chunk_ids.push(id);
        self.cat.push(cat);
        self.num.push(num);
        match &mut self.payload {
            Payload::Full(v) => v.extend_from_slice(vector),
            Payload::Scalar8 { params, codes } => {
                let code = quantize(vector);
                params.push([code.min, code.scale]);
                codes.extend_from_slice(&code.codes);
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Candidate {
    score: f32,
    chunk: ChunkId,
    ord: u32,
    patient: u32,
}

// Greater means worse, so a max-heap keeps the current worst on top.
impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        other.score.total_cmp(&self.score).then(self.chunk.cmp(&other.chunk))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl PartialEq for Candidate {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Candidate {}

/// Partitions to probe: highest centroid dot product first, ties to the lower index.
pub(crate) fn probe_order(centroids: &[f32], dim: usize, query: &[f32], nprobe: usize) -> Vec<usize> {
    let mut scored: Vec<(usize, f32)> = centroids.chunks_exact(dim).map(|c| dot(query, c)).enumerate().collect();
    let cmp = |a: &(usize, f32), b: &(usize, f32)| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0));
    let nprobe = nprobe.min(scored.len());
    if nprobe < scored.len() {
        scored.select_nth_unstable_by(nprobe, cmp);
        scored.truncate(nprobe);
    }
    scored.sort_by(cmp);
    scored.into_iter().map(|(i, _)| i).collect()
}

pub(crate) struct ScanState<'a> {
    query: &'a [f32],
    query_sum: f32,
    filter: &'a CompiledFilter,
    seen: Vec<u64>,
    heap: BinaryHeap<Candidate>,
    budget: usize,
}

impl<'a> ScanState<'a> {
    pub(crate) fn new(query: &'a [f32], filter: &'a CompiledFilter, entries: usize, budget: usize) -> Self {
        Self {
            query,
            query_sum: query.iter().sum(),
            filter,
            seen: vec![0; entries.div_ceil(64)],
            heap: BinaryHeap::with_capacity(budget.min(entries) + 1),
            budget,
        }
    }

    fn offer(&mut self, c: Candidate) {
        if self.heap.len() < self.budget {
            self.heap.push(c);
        } else if let Some(mut worst) = self.heap.peek_mut() {
            if c < *worst {
                *worst = c;
            }
        }
    }

    pub(crate) fn scan(&mut self, block: &PartitionBlock) {
        let dim = self.query.len();
        let trivial = self.filter.is_trivial();
        for i in 0..block.len() {
            let ord = block.ords[i];
            let (word, bit) = ((ord / 64) as usize, 1u64 << (ord % 64));
            if self.seen[word] & bit != 0 {
                continue;
            }
            self.seen[word] |= bit;
            if !trivial && !self.filter.matches(&block.cat[i], &block.num[i]) {
                continue;
            }
            let score = match &block.payload {
                Payload::Full(v) => dot(self.query, &v[i * dim..(i + 1) * dim]),
                Payload::Scalar8 { params, codes } => {
                    let [min, scale] = params[i];
                    asymmetric_dot(self.query, self.query_sum, min, scale, &codes[i * dim..(i + 1) * dim])
                }
            };
            let patient = block.cat[i][CategoricalField::PatientId.index()];
            self.offer(Candidate { score, chunk: block.chunk_ids[i], ord, patient });
        }
    }

    /// Rescores the surviving candidates at full precision and returns the top `k`.
    pub(crate) fn finish<'v, F>(self, k: usize, dict: &Dictionary, mut vector_of: F) -> Result<Vec<SearchResult>, IndexError>
    where
        F: FnMut(u32) -> Result<Cow<'v, [f32]>, IndexError>,
    {
        let query = self.query;
        let mut rescored = self
            .heap
            .into_vec()
            .into_iter()
            .map(|c| Ok((exact_dot(query, &vector_of(c.ord)?), c)))
            .collect::<Result<Vec<_>, IndexError>>()?;
        rescored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.chunk.cmp(&b.1.chunk)));
        rescored.truncate(k);
        Ok(rescored
            .into_iter()
            .map(|(score, c)| SearchResult {
                chunk_id: c.chunk,
                note_id: c.chunk.note,
                score,
                patient_id: (c.patient != MISSING)
                    .then(|| dict.token(CategoricalField::PatientId, c.patient).map(str::to_string))
                    .flatten(),
            })
            .collect())
    }
}

pub(crate) fn resolve_scan(
    config: &IndexConfig,
    k: usize,
    overrides: SearchOverrides,
) -> Result<(usize, usize), IndexError> {
    if k == 0 {
        return Err(IndexError::InvalidK);
    }
    let nprobe = overrides.nprobe.unwrap_or(config.nprobe).clamp(1, config.num_partitions);
    let budget = overrides.rescore_budget.unwrap_or(config.rescore_budget).max(k);
    Ok((nprobe, budget))
}

/// In-memory partitioned index. Use [`super::SharedIndex`] to share it between
/// concurrent readers and a writer.
#[derive(Debug, Clone)]
pub struct PartitionedIndex {
    pub(crate) config: IndexConfig,
    pub(crate) dim: usize,
    /// Flat `num_partitions * dim`; empty until trained.
    pub(crate) centroids: Vec<f32>,
    pub(crate) chunk_ids: Vec<ChunkId>,
    /// Full-precision vectors, flat `len * dim`, addressed by entry ordinal.
    pub(crate) vectors: Vec<f32>,
    pub(crate) cat: Vec<[u32; 7]>,
    pub(crate) num: Vec<[f64; 2]>,
    pub(crate) dict: Dictionary,
    pub(crate) partitions: Vec<PartitionBlock>,
    pub(crate) generation: u64,
    id_map: HashMap<ChunkId, u32>,
    bounds: [Option<NumericBounds>; 2],
}

impl PartitionedIndex {
    pub fn new(config: IndexConfig, dim: usize) -> Result<Self, IndexError> {
        config.validate()?;
        if dim == 0 {
            return Err(IndexError::InvalidConfig("dimension must be positive".into()));
        }
        Ok(Self {
            config,
            dim,
            centroids: Vec::new(),
            chunk_ids: Vec::new(),
            vectors: Vec::new(),
            cat: Vec::new(),
            num: Vec::new(),
            dict: Dictionary::default(),
            partitions: (0..config.num_partitions).map(|_| PartitionBlock::empty(config.quantization)).collect(),
            generation: 0,
            id_map: HashMap::new(),
            bounds: [None; 2],
        })
    }

    /// Reassembles an index from its persisted parts.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn from_parts(
        config: IndexConfig,
        dim: usize,
        centroids: Vec<f32>,
        chunk_ids: Vec<ChunkId>,
        vectors: Vec<f32>,
        cat: Vec<[u32; 7]>,
        num: Vec<[f64; 2]>,
        dict: Dictionary,
        partitions: Vec<PartitionBlock>,
        generation: u64,
    ) -> Self {
        let id_map = chunk_ids.iter().enumerate().map(|(i, id)| (*id, i as u32)).collect();
        let mut index = Self {
            config,
            dim,
            centroids,
            chunk_ids,
            vectors,
            cat,
            num,
            dict,
            partitions,
            generation,
            id_map,
            bounds: [None; 2],
        };
        for i in 0..index.num.len() {
            let row = index.num[i];
            index.widen_bounds(&row);
        }
        index
    }

    pub fn train(&mut self, sample: &[EmbeddingVector], seed: u64) -> Result<(), IndexError> {
        let centroids = train_partitions(sample, self.config.num_partitions, seed)?;
        self.set_centroids(centroids)
    }

    /// Installs externally computed centroids. Only allowed while the index is empty.
    pub fn set_centroids(&mut self, centroids: Vec<EmbeddingVector>) -> Result<(), IndexError> {
        if !self.chunk_ids.is_empty() {
            return Err(IndexError::AlreadyPopulated);
        }
        if centroids.len() != self.config.num_partitions {
            return Err(IndexError::InvalidConfig(format!(
                "expected {} centroids, got {}",
                self.config.num_partitions,
                centroids.len()
            )));
        }
        if let Some(bad) = centroids.iter().find(|c| c.dim() != self.dim) {
            return Err(IndexError::DimensionMismatch { expected: self.dim, got: bad.dim() });
        }
        self.centroids = centroids.iter().flat_map(|c| c.as_slice().iter().copied()).collect();
        Ok(())
    }

    pub fn is_trained(&self) -> bool {
        !self.centroids.is_empty()
    }

    pub fn config(&self) -> &IndexConfig {
        &self.config
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.chunk_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chunk_ids.is_empty()
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn contains(&self, id: &ChunkId) -> bool {
        self.id_map.contains_key(id)
    }

    pub fn centroids(&self) -> Vec<EmbeddingVector> {
        self.centroids.chunks_exact(self.dim).map(|c| EmbeddingVector::from_unit(c.to_vec())).collect()
    }

    pub fn partition_sizes(&self) -> Vec<usize> {
        self.partitions.iter().map(PartitionBlock::len).collect()
    }

    /// Partitions holding a copy of the given chunk.
    pub fn partitions_of(&self, id: &ChunkId) -> Vec<usize> {
        let Some(&ord) = self.id_map.get(id) else { return Vec::new() };
        self.partitions.iter().enumerate().filter(|(_, p)| p.ords.contains(&ord)).map(|(i, _)| i).collect()
    }

    pub fn chunk_ids(&self) -> &[ChunkId] {
        &self.chunk_ids
    }

    pub fn vector(&self, id: &ChunkId) -> Option<&[f32]> {
        self.id_map.get(id).map(|&o| self.vector_at(o))
    }

    pub fn attributes(&self, id: &ChunkId) -> Option<super::AttributeSet> {
        self.id_map.get(id).map(|&o| self.dict.decode(&self.cat[o as usize], &self.num[o as usize]))
    }

    pub(crate) fn bounds(&self) -> [Option<NumericBounds>; 2] {
        self.bounds
    }

    pub(crate) fn vector_at(&self, ord: u32) -> &[f32] {
        let start = ord as usize * self.dim;
        &self.vectors[start..start + self.dim]
    }

    fn widen_bounds(&mut self, row: &[f64; 2]) {
        for (b, &v) in self.bounds.iter_mut().zip(row) {
            if v.is_nan() {
                continue;
            }
            *b = Some(match *b {
                None => NumericBounds { min: v, max: v },
                Some(NumericBounds { min, max }) => NumericBounds { min: min.min(v), max: max.max(v) },
            });
        }
    }

    /// Adds a batch of entries, each to its `spill` nearest partitions. The
    /// batch is validated as a whole first; on error nothing is inserted.
    pub fn insert(&mut self, entries: Vec<VectorEntry>) -> Result<InsertReport, IndexError> {
        if !self.is_trained() {
            return Err(IndexError::Untrained);
        }
        let mut batch_ids = HashSet::with_capacity(entries.len());
        let mut duplicates = Vec::new();
        for e in &entries {
            if e.vector.dim() != self.dim {
                return Err(IndexError::DimensionMismatch { expected: self.dim, got: e.vector.dim() });
            }
            if self.id_map.contains_key(&e.chunk_id) || !batch_ids.insert(e.chunk_id) {
                duplicates.push(e.chunk_id);
            }
        }
        if !duplicates.is_empty() {
            duplicates.sort();
            duplicates.dedup();
            return Err(IndexError::DuplicateChunkIds(duplicates));
        }
        if entries.is_empty() {
            return Ok(InsertReport { inserted: 0, generation: self.generation });
        }
        let inserted = entries.len();
        for e in entries {
            let ord = self.chunk_ids.len() as u32;
            let (cat, num) = self.dict.encode(&e.attributes);
            let v = e.vector.as_slice();
            for p in probe_order(&self.centroids, self.dim, v, self.config.spill) {
                self.partitions[p].push(ord, e.chunk_id, cat, num, v);
            }
            self.widen_bounds(&num);
            self.id_map.insert(e.chunk_id, ord);
            self.chunk_ids.push(e.chunk_id);
            self.vectors.extend_from_slice(v);
            self.cat.push(cat);
            self.num.push(num);
        }
        self.generation += 1;
        Ok(InsertReport { inserted, generation: self.generation })
    }

    pub fn search(
        &self,
        query: &EmbeddingVector,
        k: usize,
        filter: &FilterSpec,
        overrides: SearchOverrides,
    ) -> Result<Vec<SearchResult>, IndexError> {
        let (nprobe, budget) = resolve_scan(&self.config, k, overrides)?;
        if !self.is_trained() {
            return Err(IndexError::Untrained);
        }
        if query.dim() != self.dim {
            return Err(IndexError::DimensionMismatch { expected: self.dim, got: query.dim() });
        }
        filter.validate()?;
        let compiled = CompiledFilter::compile(filter, &self.dict);
        let q = query.as_slice();
        let mut state = ScanState::new(q, &compiled, self.len(), budget);
        for p in probe_order(&self.centroids, self.dim, q, nprobe) {
            state.scan(&self.partitions[p]);
        }
        state.finish(k, &self.dict, |ord| Ok(Cow::Borrowed(self.vector_at(ord))))
    }

    pub fn vocabulary(&self) -> Vocabulary {
        let mut vocab = Vocabulary::default();
        for field in CategoricalField::ALL {
            let mut tokens = self.dict.tokens[field.index()].clone();
            tokens.sort();
            vocab.categorical.insert(field, tokens);
        }
        for field in NumericField::ALL {
            vocab.numeric.insert(field, self.bounds[field.index()]);
        }
        vocab
    }
}

impl VectorIndex for PartitionedIndex {
    fn search(
        &self,
        query: &EmbeddingVector,
        k: usize,
        filter: &FilterSpec,
        overrides: SearchOverrides,
    ) -> Result<Vec<SearchResult>, IndexError> {
        PartitionedIndex::search(self, query, k, filter, overrides)
    }

    fn len(&self) -> usize {
        PartitionedIndex::len(self)
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn is_trained(&self) -> bool {
        PartitionedIndex::is_trained(self)
    }

    fn generation(&self) -> u64 {
        self.generation
    }

    fn vocabulary(&self) -> Vocabulary {
        PartitionedIndex::vocabulary(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ann::{AttributeSet, NumericField};
    use crate::embedding::l2_normalize;
    use crate::ids::NoteId;

    fn v(x: &[f32]) -> EmbeddingVector {
        l2_normalize(x.to_vec()).unwrap()
    }

    fn entry(note: u64, vector: EmbeddingVector, patient: &str) -> VectorEntry {
        VectorEntry {
            chunk_id: ChunkId::new(note, 0),
            vector,
            attributes: AttributeSet::default()
                .with(CategoricalField::PatientId, patient)
                .with_number(NumericField::Date, note as f64),
        }
    }

    fn single_partition(quantization: Quantization) -> PartitionedIndex {
        let cfg = IndexConfig { num_partitions: 1, nprobe: 1, spill: 1, rescore_budget: 10, quantization };
        let mut idx = PartitionedIndex::new(cfg, 3).unwrap();
        idx.set_centroids(vec![v(&[1.0, 0.0, 0.0])]).unwrap();
        idx
    }

    /// Brute-force reference over the raw entries.
    fn brute(entries: &[VectorEntry], q: &EmbeddingVector, k: usize, filter: &FilterSpec) -> Vec<(ChunkId, f64)> {
        let mut all: Vec<(ChunkId, f64)> = entries
            .iter()
            .filter(|e| filter.matches(&e.attributes))
            .map(|e| {
                let s: f64 = q.as_slice().iter().zip(e.vector.as_slice()).map(|(a, b)| *a as f64 * *b as f64).sum();
                (e.chunk_id, s)
            })
            .collect();
        all.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        all.truncate(k);
        all
    }

    fn five() -> Vec<VectorEntry> {
        vec![
            entry(1, v(&[1.0, 0.1, 0.0]), "A"),
            entry(2, v(&[0.9, 0.3, 0.1]), "B"),
            entry(3, v(&[0.2, 1.0, 0.0]), "A"),
            entry(4, v(&[0.0, 0.2, 1.0]), "C"),
            entry(5, v(&[0.7, 0.7, 0.1]), "B"),
        ]
    }

    #[test]
    fn single_partition_matches_brute_force() {
        for q in [Quantization::None, Quantization::Scalar8] {
            let mut idx = single_partition(q);
            let entries = five();
            idx.insert(entries.clone()).unwrap();
            let query = v(&[1.0, 0.2, 0.05]);
            let got: Vec<_> = idx.search(&query, 3, &FilterSpec::new(), SearchOverrides::default()).unwrap()
                .into_iter().map(|r| (r.chunk_id, r.score)).collect();
            assert_eq!(got, brute(&entries, &query, 3, &FilterSpec::new()));
        }
    }

    #[test]
    fn excluding_top_patient_promotes_runner_up() {
        let mut idx = single_partition(Quantization::Scalar8);
        let entries = five();
        idx.insert(entries.clone()).unwrap();
        let query = v(&[1.0, 0.05, 0.0]);
        let all = idx.search(&query, 5, &FilterSpec::new(), SearchOverrides::default()).unwrap();
        assert_eq!(all[0].note_id, NoteId(1));
        let filter = FilterSpec::new().exclude(CategoricalField::PatientId, ["A"]);
        let filtered = idx.search(&query, 5, &filter, SearchOverrides::default()).unwrap();
        assert_eq!(filtered[0].note_id, all[1].note_id);
        assert!(filtered.iter().all(|r| r.patient_id.as_deref() != Some("A")));
        let expected: Vec<_> = brute(&entries, &query, 5, &filter).into_iter().map(|(c, _)| c).collect();
        assert_eq!(filtered.iter().map(|r| r.chunk_id).collect::<Vec<_>>(), expected);
    }

    #[test]
    fn k_beyond_corpus_returns_each_match_once() {
        let cfg = IndexConfig { num_partitions: 3, nprobe: 3, spill: 2, rescore_budget: 4, quantization: Quantization::Scalar8 };
        let mut idx = PartitionedIndex::new(cfg, 3).unwrap();
        idx.set_centroids(vec![v(&[1.0, 0.0, 0.0]), v(&[0.0, 1.0, 0.0]), v(&[0.0, 0.0, 1.0])]).unwrap();
        idx.insert(five()).unwrap();
        let res = idx.search(&v(&[1.0, 1.0, 1.0]), 50, &FilterSpec::new(), SearchOverrides::default()).unwrap();
        assert_eq!(res.len(), 5);
        let ids: HashSet<_> = res.iter().map(|r| r.chunk_id).collect();
        assert_eq!(ids.len(), 5);
        assert!(res.windows(2).all(|w| w[0].score >= w[1].score));
    }

    #[test]
    fn self_retrieval_scores_one() {
        let mut idx = single_partition(Quantization::Scalar8);
        idx.insert(five()).unwrap();
        let probe = v(&[0.2, 1.0, 0.0]);
        let res = idx.search(&probe, 1, &FilterSpec::new(), SearchOverrides::default()).unwrap();
        assert_eq!(res[0].chunk_id, ChunkId::new(3u64, 0));
        assert!((res[0].score - 1.0).abs() < 1e-6);
    }

    #[test]
    fn spill_makes_entry_reachable_from_second_partition() {
        let centroids = vec![v(&[1.0, 0.0, 0.0]), v(&[0.0, 1.0, 0.0]), v(&[0.0, 0.0, 1.0])];
        // Closer to partition 0, second-closest to partition 1.
        let target = entry(9, v(&[0.75, 0.65, 0.05]), "Z");
        let query = v(&[0.1, 1.0, 0.0]);
        for (spill, expected) in [(1usize, false), (2, true)] {
            let cfg = IndexConfig { num_partitions: 3, nprobe: 1, spill, rescore_budget: 5, quantization: Quantization::Scalar8 };
            let mut idx = PartitionedIndex::new(cfg, 3).unwrap();
            idx.set_centroids(centroids.clone()).unwrap();
            idx.insert(vec![target.clone()]).unwrap();
            assert_eq!(idx.partitions_of(&target.chunk_id), if spill == 1 { vec![0] } else { vec![0, 1] });
            let found = !idx.search(&query, 1, &FilterSpec::new(), SearchOverrides::default()).unwrap().is_empty();
            assert_eq!(found, expected, "spill={spill}");
        }
    }

    #[test]
    fn insertion_errors_are_atomic() {
        let mut idx = single_partition(Quantization::Scalar8);
        idx.insert(five()).unwrap();
        let gen = idx.generation();
        let batch = vec![entry(10, v(&[1.0, 0.0, 0.0]), "X"), entry(2, v(&[1.0, 0.0, 0.0]), "X")];
        match idx.insert(batch) {
            Err(IndexError::DuplicateChunkIds(ids)) => assert_eq!(ids, vec![ChunkId::new(2u64, 0)]),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(idx.len(), 5);
        assert_eq!(idx.generation(), gen);
        let wrong_dim = VectorEntry { chunk_id: ChunkId::new(11u64, 0), vector: v(&[1.0, 0.0]), attributes: AttributeSet::default() };
        assert!(matches!(idx.insert(vec![wrong_dim]), Err(IndexError::DimensionMismatch { .. })));
    }

    #[test]
    fn insert_leaves_disjoint_filters_untouched() {
        let mut idx = single_partition(Quantization::Scalar8);
        idx.insert(five()).unwrap();
        let filter = FilterSpec::new().include(CategoricalField::PatientId, ["B"]);
        let q = v(&[1.0, 0.5, 0.2]);
        let before = idx.search(&q, 5, &filter, SearchOverrides::default()).unwrap();
        idx.insert((20..40).map(|n| entry(n, v(&[1.0, 0.5, 0.2]), "NEW")).collect()).unwrap();
        assert_eq!(idx.search(&q, 5, &filter, SearchOverrides::default()).unwrap(), before);
    }

    #[test]
    fn search_errors() {
        let cfg = IndexConfig { num_partitions: 1, nprobe: 1, spill: 1, rescore_budget: 5, quantization: Quantization::None };
        let idx = PartitionedIndex::new(cfg, 3).unwrap();
        let q = v(&[1.0, 0.0, 0.0]);
        assert!(matches!(idx.search(&q, 1, &FilterSpec::new(), SearchOverrides::default()), Err(IndexError::Untrained)));
        let idx = single_partition(Quantization::None);
        assert!(matches!(idx.search(&q, 0, &FilterSpec::new(), SearchOverrides::default()), Err(IndexError::InvalidK)));
        assert!(idx.search(&q, 3, &FilterSpec::new(), SearchOverrides::default()).unwrap().is_empty());
        let bad = FilterSpec::new().range(NumericField::Date, Some(2.0), Some(1.0));
        assert!(matches!(idx.search(&q, 1, &bad, SearchOverrides::default()), Err(IndexError::Filter(_))));
    }

    #[test]
    fn config_validation() {
        let base = IndexConfig::default();
        assert!(base.validate().is_ok());
        assert!(IndexConfig { nprobe: 0, ..base }.validate().is_err());
        assert!(IndexConfig { nprobe: base.num_partitions + 1, ..base }.validate().is_err());
        assert!(IndexConfig { spill: 3, ..base }.validate().is_err());
        assert!(IndexConfig { rescore_budget: 0, ..base }.validate().is_err());
    }

    #[test]
    fn vocabulary_reports_tokens_and_bounds() {
        let mut idx = single_partition(Quantization::Scalar8);
        assert!(idx.vocabulary().categorical.values().all(Vec::is_empty));
        idx.insert(five()).unwrap();
        let vocab = idx.vocabulary();
        assert_eq!(vocab.categorical[&CategoricalField::PatientId], ["A", "B", "C"]);
        assert_eq!(vocab.numeric[&NumericField::Date], Some(NumericBounds { min: 1.0, max: 5.0 }));
        assert_eq!(vocab.numeric[&NumericField::AgeDays], None);
    }

    #[test]
    fn probe_order_ties_break_low() {
        let c = [1.0, 0.0, 1.0, 0.0, 0.0, 1.0];
        assert_eq!(probe_order(&c, 2, &[1.0, 0.0], 2), vec![0, 1]);
        assert_eq!(probe_order(&c, 2, &[0.0, 1.0], 1), vec![2]);
    }
}
