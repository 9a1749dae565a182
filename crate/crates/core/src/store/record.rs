use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use chrono::{DateTime, NaiveDate, Utc};
use serde::{Deserialize, Serialize};

use super::StoreError;
use crate::ann::{AttributeSet, CategoricalField, NumericField};
use crate::ids::NoteId;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Patient {
    pub mrn: String,
    pub name: String,
    pub birth_date: NaiveDate,
    pub sex: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Author {
    pub name: String,
    pub role: String,
}

/// A clinical note with its display metadata. One JSON object per line in
/// corpus and bulk-load files.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoteRecord {
    pub note_id: NoteId,
    pub text: String,
    pub patient: Patient,
    pub note_category: String,
    pub encounter_type: String,
    pub department: String,
    pub specialty: String,
    pub author: Author,
    pub filed_time: DateTime<Utc>,
    pub creation_time: DateTime<Utc>,
}

impl NoteRecord {
    /// Filterable attributes: categorical fields verbatim, `date` as whole days
    /// since the Unix epoch of `filed_time`, `age_days` as days from birth date
    /// to the filed date.
    pub fn attributes(&self) -> AttributeSet {
        let filed = self.filed_time.date_naive();
        AttributeSet::default()
            .with(CategoricalField::PatientId, &self.patient.mrn)
            .with(CategoricalField::NoteCategory, &self.note_category)
            .with(CategoricalField::EncounterType, &self.encounter_type)
            .with(CategoricalField::Department, &self.department)
            .with(CategoricalField::Specialty, &self.specialty)
            .with(CategoricalField::AuthorType, &self.author.role)
            .with(CategoricalField::AuthorName, &self.author.name)
            .with_number(NumericField::Date, days_since_epoch(filed) as f64)
            .with_number(NumericField::AgeDays, (filed - self.patient.birth_date).num_days() as f64)
    }

    pub fn validate(&self) -> Result<(), StoreError> {
        if self.text.trim().is_empty() {
            return Err(StoreError::InvalidRecord { note_id: self.note_id, reason: "text is empty".into() });
        }
        if self.note_id.0 > i64::MAX as u64 {
            return Err(StoreError::InvalidRecord { note_id: self.note_id, reason: "note id exceeds 2^63-1".into() });
        }
        Ok(())
    }

    /// `YYYY-MM` of the filed time.
    pub fn partition_key(&self) -> String {
        self.filed_time.format("%Y-%m").to_string()
    }
}

pub fn days_since_epoch(date: NaiveDate) -> i64 {
    (date - NaiveDate::from_ymd_opt(1970, 1, 1).expect("valid date")).num_days()
}

pub fn read_jsonl(path: &Path) -> Result<Vec<NoteRecord>, StoreError> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line)
            .map_err(|e| StoreError::Corrupt(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(record);
    }
    Ok(out)
}

pub fn write_jsonl(path: &Path, records: &[NoteRecord]) -> Result<(), StoreError> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(|e| StoreError::Corrupt(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    w.into_inner().map_err(|e| e.into_error())?.sync_all()?;
    Ok(())
}

#[cfg(test)]
pub(crate) fn sample(id: u64, mrn: &str, text: &str) -> NoteRecord {
    use chrono::TimeZone;
    NoteRecord {
        note_id: NoteId(id),
        text: text.to_string(),
        patient: Patient {
            mrn: mrn.to_string(),
            name: format!("Patient {mrn}"),
            birth_date: NaiveDate::from_ymd_opt(2010, 3, 1).unwrap(),
            sex: "F".into(),
        },
        note_category: "Progress Note".into(),
        encounter_type: "Office Visit".into(),
        department: "Neurology".into(),
        specialty: "Pediatric Neurology".into(),
        author: Author { name: "Lee, Ann".into(), role: "Physician".into() },
        filed_time: Utc.with_ymd_and_hms(2020, 3, 2, 23, 59, 0).unwrap(),
        creation_time: Utc.with_ymd_and_hms(2020, 3, 2, 20, 0, 0).unwrap(),
    }
}
