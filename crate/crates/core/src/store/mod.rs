//! Note hydration store: full note records keyed by salted row key.

mod kv;
mod record;
mod rowkey;

use std::collections::{HashMap, HashSet};
use std::path::Path;

use thiserror::Error;

pub use kv::{KvBackend, LogKv, MemoryKv};
pub use record::{days_since_epoch, read_jsonl, write_jsonl, Author, NoteRecord, Patient};
pub use rowkey::{decode_row_key, make_row_key, RowKey, RowKeyError, ID_DIGITS, SALT_BUCKETS};

use crate::ids::NoteId;
use rowkey::row_key_unsigned;

pub const DEFAULT_BATCH_CAP: usize = 1000;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("storage i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("note {0} appears more than once in the batch")]
    DuplicateInBatch(NoteId),
    #[error("batch of {requested} ids exceeds the cap of {cap}")]
    BatchTooLarge { requested: usize, cap: usize },
    #[error("invalid note {note_id}: {reason}")]
    InvalidRecord { note_id: NoteId, reason: String },
    #[error(transparent)]
    RowKey(#[from] RowKeyError),
    #[error("corrupt note data: {0}")]
    Corrupt(String),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Hydrated {
    pub records: HashMap<NoteId, NoteRecord>,
    /// Requested ids with no stored record, in request order.
    pub missing: Vec<NoteId>,
}

pub struct NoteStore {
    backend: Box<dyn KvBackend>,
    batch_cap: usize,
}

impl std::fmt::Debug for NoteStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("NoteStore").field("len", &self.backend.len()).field("batch_cap", &self.batch_cap).finish()
    }
}

impl NoteStore {
    pub fn new(backend: Box<dyn KvBackend>) -> Self {
        Self { backend, batch_cap: DEFAULT_BATCH_CAP }
    }

    pub fn in_memory() -> Self {
        Self::new(Box::new(MemoryKv::new()))
    }

    pub fn open(path: &Path) -> Result<Self, StoreError> {
        Ok(Self::new(Box::new(LogKv::open(path)?)))
    }

    pub fn with_batch_cap(mut self, cap: usize) -> Self {
        self.batch_cap = cap.max(1);
        self
    }

    pub fn batch_cap(&self) -> usize {
        self.batch_cap
    }

    pub fn len(&self) -> usize {
        self.backend.len()
    }

    pub fn is_empty(&self) -> bool {
        self.backend.is_empty()
    }

    /// Stores the batch durably. Re-putting an id replaces the earlier record.
    pub fn put_notes(&self, records: &[NoteRecord]) -> Result<usize, StoreError> {
        let mut seen = HashSet::with_capacity(records.len());
        for r in records {
            if !seen.insert(r.note_id) {
                return Err(StoreError::DuplicateInBatch(r.note_id));
            }
            r.validate()?;
        }
        let items = records
            .iter()
            .map(|r| {
                let value = serde_json::to_vec(r).map_err(|e| StoreError::Corrupt(e.to_string()))?;
                Ok((row_key_unsigned(r.note_id.0).as_str().to_string(), value))
            })
            .collect::<Result<Vec<_>, StoreError>>()?;
        self.backend.put_batch(&items)?;
        Ok(records.len())
    }

    pub fn get_notes(&self, ids: &[NoteId]) -> Result<Hydrated, StoreError> {
        if ids.len() > self.batch_cap {
            return Err(StoreError::BatchTooLarge { requested: ids.len(), cap: self.batch_cap });
        }
        let keys: Vec<String> = ids.iter().map(|id| row_key_unsigned(id.0).as_str().to_string()).collect();
        let values = self.backend.get_batch(&keys)?;
        let mut out = Hydrated::default();
        for (id, value) in ids.iter().zip(values) {
            match value {
                Some(bytes) => {
                    let record: NoteRecord = serde_json::from_slice(&bytes)
                        .map_err(|e| StoreError::Corrupt(format!("note {id}: {e}")))?;
                    out.records.insert(*id, record);
                }
                None => out.missing.push(*id),
            }
        }
        Ok(out)
    }

    pub fn get_note(&self, id: NoteId) -> Result<Option<NoteRecord>, StoreError> {
        Ok(self.get_notes(&[id])?.records.remove(&id))
    }

    pub fn contains(&self, id: NoteId) -> Result<bool, StoreError> {
        Ok(self.backend.get_batch(&[row_key_unsigned(id.0).as_str().to_string()])?[0].is_some())
    }

    /// All stored note ids, ascending.
    pub fn note_ids(&self) -> Result<Vec<NoteId>, StoreError> {
        let mut ids = self
            .backend
            .keys()
            .iter()
            .map(|k| decode_row_key(k).map(NoteId))
            .collect::<Result<Vec<_>, _>>()?;
        ids.sort();
        Ok(ids)
    }

    /// Loads a line-delimited record file in batches of the configured cap.
    pub fn bulk_load(&self, path: &Path) -> Result<usize, StoreError> {
        let records = read_jsonl(path)?;
        let mut total = 0;
        for batch in records.chunks(self.batch_cap) {
            total += self.put_notes(batch)?;
        }
        Ok(total)
    }
}

#[cfg(test)]
mod tests {
    use super::record::sample;
    use super::*;

    #[test]
    fn put_get_roundtrip_and_overwrite() {
        let store = NoteStore::in_memory();
        assert_eq!(store.put_notes(&[]).unwrap(), 0);
        let a = sample(1, "001", "first text");
        store.put_notes(std::slice::from_ref(&a)).unwrap();
        assert_eq!(store.get_note(NoteId(1)).unwrap(), Some(a.clone()));
        let mut b = a.clone();
        b.text = "changed".into();
        store.put_notes(&[b]).unwrap();
        assert_eq!(store.get_note(NoteId(1)).unwrap().unwrap().text, "changed");
        assert_eq!(store.len(), 1);
    }

    #[test]
    fn partial_hits_and_errors() {
        let store = NoteStore::in_memory().with_batch_cap(3);
        store.put_notes(&[sample(5, "a", "x")]).unwrap();
        let got = store.get_notes(&[]).unwrap();
        assert!(got.records.is_empty() && got.missing.is_empty());
        let got = store.get_notes(&[NoteId(5), NoteId(6)]).unwrap();
        assert_eq!(got.records.len(), 1);
        assert_eq!(got.missing, vec![NoteId(6)]);
        assert!(matches!(store.get_notes(&[NoteId(1); 4]), Err(StoreError::BatchTooLarge { requested: 4, cap: 3 })));
        let dup = [sample(9, "a", "x"), sample(9, "a", "y")];
        assert!(matches!(store.put_notes(&dup), Err(StoreError::DuplicateInBatch(NoteId(9)))));
        assert!(!store.contains(NoteId(9)).unwrap());
        assert!(matches!(store.put_notes(&[sample(10, "a", "")]), Err(StoreError::InvalidRecord { .. })));
    }

    #[test]
    fn durable_across_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("notes.log");
        let notes: Vec<_> = (0..50).map(|i| sample(i * 7, &format!("{:03}", i % 5), &format!("note {i}"))).collect();
        NoteStore::open(&path).unwrap().put_notes(&notes).unwrap();
        let store = NoteStore::open(&path).unwrap();
        let ids: Vec<_> = notes.iter().map(|n| n.note_id).collect();
        let got = store.get_notes(&ids).unwrap();
        assert!(got.missing.is_empty());
        for n in &notes {
            assert_eq!(&got.records[&n.note_id], n);
        }
        let mut sorted = ids.clone();
        sorted.sort();
        assert_eq!(store.note_ids().unwrap(), sorted);
    }
}
