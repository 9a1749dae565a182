//! Filterable attributes and filter clauses.
//!
//! Clauses combine with AND across fields. Within a categorical field an
//! include-set matches any of its tokens, and an exclude-set rejects any of its
//! tokens. An entry without a value for a field fails an include clause or a
//! range clause on that field and passes an exclude clause.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::{Map, Value};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CategoricalField {
    PatientId,
    NoteCategory,
    EncounterType,
    Department,
    Specialty,
    AuthorType,
    AuthorName,
}

impl CategoricalField {
    pub const ALL: [CategoricalField; 7] = [
        CategoricalField::PatientId,
        CategoricalField::NoteCategory,
        CategoricalField::EncounterType,
        CategoricalField::Department,
        CategoricalField::Specialty,
        CategoricalField::AuthorType,
        CategoricalField::AuthorName,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            CategoricalField::PatientId => "patient_id",
            CategoricalField::NoteCategory => "note_category",
            CategoricalField::EncounterType => "encounter_type",
            CategoricalField::Department => "department",
            CategoricalField::Specialty => "specialty",
            CategoricalField::AuthorType => "author_type",
            CategoricalField::AuthorName => "author_name",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NumericField {
    /// Days since 1970-01-01 of the note's filed time.
    Date,
    /// Patient age in days when the note was written.
    AgeDays,
}

impl NumericField {
    pub const ALL: [NumericField; 2] = [NumericField::Date, NumericField::AgeDays];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            NumericField::Date => "date",
            NumericField::AgeDays => "age_days",
        }
    }
}

/// Either kind of filterable field, parsed from its wire name.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Field {
    Categorical(CategoricalField),
    Numeric(NumericField),
}

impl FromStr for Field {
    type Err = FilterError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        CategoricalField::ALL
            .iter()
            .find(|f| f.name() == s)
            .map(|&f| Field::Categorical(f))
            .or_else(|| NumericField::ALL.iter().find(|f| f.name() == s).map(|&f| Field::Numeric(f)))
            .ok_or_else(|| FilterError::UnknownField(s.to_string()))
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FilterError {
    #[error("unknown filter field `{0}`")]
    UnknownField(String),
    #[error("field `{field}`: token `{token}` is both included and excluded")]
    IncludeExcludeOverlap { field: &'static str, token: String },
    #[error("field `{field}`: min {min} exceeds max {max}")]
    InvertedRange { field: &'static str, min: f64, max: f64 },
    #[error("field `{field}`: {message}")]
    Malformed { field: String, message: String },
}

impl FilterError {
    /// Name of the offending field, when the error concerns one.
    pub fn field(&self) -> Option<&str> {
        match self {
            FilterError::UnknownField(f) => Some(f),
            FilterError::IncludeExcludeOverlap { field, .. } | FilterError::InvertedRange { field, .. } => Some(field),
            FilterError::Malformed { field, .. } => Some(field),
        }
    }
}

/// Filterable metadata attached to every indexed chunk.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AttributeSet {
    #[serde(default)]
    pub categorical: BTreeMap<CategoricalField, String>,
    #[serde(default)]
    pub numeric: BTreeMap<NumericField, f64>,
}

impl AttributeSet {
    pub fn with(mut self, field: CategoricalField, token: impl Into<String>) -> Self {
        self.categorical.insert(field, token.into());
        self
    }

    pub fn with_number(mut self, field: NumericField, value: f64) -> Self {
        self.numeric.insert(field, value);
        self
    }

    pub fn get(&self, field: CategoricalField) -> Option<&str> {
        self.categorical.get(&field).map(String::as_str)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CategoricalClause {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub include: Option<BTreeSet<String>>,
    #[serde(default, skip_serializing_if = "BTreeSet::is_empty")]
    pub exclude: BTreeSet<String>,
}

/// Closed interval; a missing bound is unbounded on that side.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct NumericRange {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max: Option<f64>,
}

impl NumericRange {
    pub fn contains(&self, v: f64) -> bool {
        !v.is_nan() && self.min.is_none_or(|m| v >= m) && self.max.is_none_or(|m| v <= m)
    }
}

/// A conjunction of per-field clauses.
///
/// On the wire this is a flat JSON object keyed by field name:
/// `{"note_category": {"include": ["Progress Note"]}, "date": {"min": 18000}}`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FilterSpec {
    pub categorical: BTreeMap<CategoricalField, CategoricalClause>,
    pub numeric: BTreeMap<NumericField, NumericRange>,
}

impl FilterSpec {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.categorical.is_empty() && self.numeric.is_empty()
    }

    pub fn include<I, S>(mut self, field: CategoricalField, tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let clause = self.categorical.entry(field).or_default();
        clause.include.get_or_insert_with(BTreeSet::new).extend(tokens.into_iter().map(Into::into));
        self
    }

    pub fn exclude<I, S>(mut self, field: CategoricalField, tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.categorical.entry(field).or_default().exclude.extend(tokens.into_iter().map(Into::into));
        self
    }

    pub fn range(mut self, field: NumericField, min: Option<f64>, max: Option<f64>) -> Self {
        self.numeric.insert(field, NumericRange { min, max });
        self
    }

    pub fn validate(&self) -> Result<(), FilterError> {
        for (field, clause) in &self.categorical {
            if let Some(include) = &clause.include {
                if let Some(token) = include.intersection(&clause.exclude).next() {
                    return Err(FilterError::IncludeExcludeOverlap { field: field.name(), token: token.clone() });
                }
            }
        }
        for (field, range) in &self.numeric {
            for bound in [range.min, range.max].into_iter().flatten() {
                if bound.is_nan() {
                    return Err(FilterError::Malformed { field: field.name().into(), message: "NaN bound".into() });
                }
            }
            if let (Some(min), Some(max)) = (range.min, range.max) {
                if min > max {
                    return Err(FilterError::InvertedRange { field: field.name(), min, max });
                }
            }
        }
        Ok(())
    }

    /// Reference semantics of the filter over a plain attribute set.
    pub fn matches(&self, attrs: &AttributeSet) -> bool {
        self.categorical.iter().all(|(field, clause)| {
            let value = attrs.categorical.get(field);
            let included = match (&clause.include, value) {
                (None, _) => true,
                (Some(set), Some(v)) => set.contains(v),
                (Some(_), None) => false,
            };
            included && value.is_none_or(|v| !clause.exclude.contains(v))
        }) && self
            .numeric
            .iter()
            .all(|(field, range)| attrs.numeric.get(field).is_some_and(|&v| range.contains(v)))
    }

    pub fn to_json(&self) -> Value {
        let mut map = Map::new();
        for (field, clause) in &self.categorical {
            map.insert(field.name().into(), serde_json::to_value(clause).expect("clause serializes"));
        }
        for (field, range) in &self.numeric {
            map.insert(field.name().into(), serde_json::to_value(range).expect("range serializes"));
        }
        Value::Object(map)
    }

    pub fn from_json(value: &Value) -> Result<Self, FilterError> {
        let obj = match value {
            Value::Null => return Ok(Self::default()),
            Value::Object(obj) => obj,
            _ => {
                return Err(FilterError::Malformed { field: "filter".into(), message: "expected an object".into() })
            }
        };
        let mut spec = FilterSpec::default();
        for (name, clause) in obj {
            let malformed = |e: serde_json::Error| FilterError::Malformed { field: name.clone(), message: e.to_string() };
            match name.parse::<Field>()? {
                Field::Categorical(f) => {
                    let c = CategoricalClause::deserialize(clause).map_err(malformed)?;
                    spec.categorical.insert(f, c);
                }
                Field::Numeric(f) => {
                    let r = NumericRange::deserialize(clause).map_err(malformed)?;
                    spec.numeric.insert(f, r);
                }
            }
        }
        spec.validate()?;
        Ok(spec)
    }
}

impl fmt::Display for FilterSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.to_json())
    }
}

impl Serialize for FilterSpec {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.to_json().serialize(s)
    }
}

impl<'de> Deserialize<'de> for FilterSpec {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let value = Value::deserialize(d)?;
        FilterSpec::from_json(&value).map_err(serde::de::Error::custom)
    }
}

pub(crate) const MISSING: u32 = u32::MAX;

/// Per-field token dictionaries; entries store token ids instead of strings.
#[derive(Debug, Clone, Default)]
pub(crate) struct Dictionary {
    pub(crate) tokens: [Vec<String>; 7],
    lookup: [HashMap<String, u32>; 7],
}

impl Dictionary {
    pub(crate) fn from_tokens(tokens: [Vec<String>; 7]) -> Self {
        let lookup = std::array::from_fn(|i| {
            tokens[i].iter().enumerate().map(|(id, t)| (t.clone(), id as u32)).collect()
        });
        Self { tokens, lookup }
    }

    pub(crate) fn intern(&mut self, field: CategoricalField, token: &str) -> u32 {
        let i = field.index();
        if let Some(&id) = self.lookup[i].get(token) {
            return id;
        }
        let id = self.tokens[i].len() as u32;
        self.tokens[i].push(token.to_string());
        self.lookup[i].insert(token.to_string(), id);
        id
    }

    pub(crate) fn id(&self, field: CategoricalField, token: &str) -> Option<u32> {
        self.lookup[field.index()].get(token).copied()
    }

    pub(crate) fn token(&self, field: CategoricalField, id: u32) -> Option<&str> {
        self.tokens[field.index()].get(id as usize).map(String::as_str)
    }

    pub(crate) fn encode(&mut self, attrs: &AttributeSet) -> ([u32; 7], [f64; 2]) {
        let mut cat = [MISSING; 7];
        for (field, token) in &attrs.categorical {
            cat[field.index()] = self.intern(*field, token);
        }
        let mut num = [f64::NAN; 2];
        for (field, v) in &attrs.numeric {
            num[field.index()] = *v;
        }
        (cat, num)
    }

    pub(crate) fn decode(&self, cat: &[u32; 7], num: &[f64; 2]) -> AttributeSet {
        let mut attrs = AttributeSet::default();
        for field in CategoricalField::ALL {
            if let Some(t) = self.token(field, cat[field.index()]) {
                attrs.categorical.insert(field, t.to_string());
            }
        }
        for field in NumericField::ALL {
            let v = num[field.index()];
            if !v.is_nan() {
                attrs.numeric.insert(field, v);
            }
        }
        attrs
    }
}

#[derive(Debug)]
struct CompiledClause {
    field: usize,
    /// Sorted ids; `None` means no include clause.
    include: Option<Vec<u32>>,
    exclude: Vec<u32>,
}

/// A filter resolved against a dictionary snapshot.
#[derive(Debug)]
pub(crate) struct CompiledFilter {
    clauses: Vec<CompiledClause>,
    ranges: Vec<(usize, NumericRange)>,
}

impl CompiledFilter {
    pub(crate) fn compile(spec: &FilterSpec, dict: &Dictionary) -> Self {
        let ids = |field: CategoricalField, set: &BTreeSet<String>| {
            let mut v: Vec<u32> = set.iter().filter_map(|t| dict.id(field, t)).collect();
            v.sort_unstable();
            v
        };
        let clauses = spec
            .categorical
            .iter()
            .map(|(&field, clause)| CompiledClause {
                field: field.index(),
                include: clause.include.as_ref().map(|s| ids(field, s)),
                exclude: ids(field, &clause.exclude),
            })
            .collect();
        let ranges = spec.numeric.iter().map(|(f, r)| (f.index(), *r)).collect();
        Self { clauses, ranges }
    }

    pub(crate) fn is_trivial(&self) -> bool {
        self.clauses.is_empty() && self.ranges.is_empty()
    }

    #[inline]
    pub(crate) fn matches(&self, cat: &[u32; 7], num: &[f64; 2]) -> bool {
        for c in &self.clauses {
            let v = cat[c.field];
            if let Some(include) = &c.include {
                if v == MISSING || include.binary_search(&v).is_err() {
                    return false;
                }
            }
            if v != MISSING && c.exclude.binary_search(&v).is_ok() {
                return false;
            }
        }
        self.ranges.iter().all(|(i, r)| r.contains(num[*i]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn attrs() -> AttributeSet {
        AttributeSet::default()
            .with(CategoricalField::PatientId, "001")
            .with(CategoricalField::NoteCategory, "Progress Note")
            .with_number(NumericField::Date, 19000.0)
    }

    #[test]
    fn include_exclude_and_range() {
        let a = attrs();
        assert!(FilterSpec::new().matches(&a));
        assert!(FilterSpec::new().include(CategoricalField::PatientId, ["001", "002"]).matches(&a));
        assert!(!FilterSpec::new().include(CategoricalField::PatientId, ["002"]).matches(&a));
        assert!(!FilterSpec::new().exclude(CategoricalField::PatientId, ["001"]).matches(&a));
        assert!(FilterSpec::new().exclude(CategoricalField::Specialty, ["Cardiology"]).matches(&a));
        assert!(!FilterSpec::new().include(CategoricalField::Specialty, ["Cardiology"]).matches(&a));
        assert!(FilterSpec::new().range(NumericField::Date, Some(19000.0), Some(19000.0)).matches(&a));
        assert!(!FilterSpec::new().range(NumericField::Date, Some(19000.5), None).matches(&a));
        assert!(!FilterSpec::new().range(NumericField::AgeDays, None, Some(10.0)).matches(&a));
    }

    #[test]
    fn empty_include_set_matches_nothing() {
        let spec = FilterSpec { categorical: [(CategoricalField::PatientId, CategoricalClause {
            include: Some(BTreeSet::new()),
            exclude: BTreeSet::new(),
        })].into(), ..Default::default() };
        assert!(!spec.matches(&attrs()));
    }

    #[test]
    fn validation() {
        let overlap = FilterSpec::new().include(CategoricalField::Department, ["a"]).exclude(CategoricalField::Department, ["a"]);
        assert!(matches!(overlap.validate(), Err(FilterError::IncludeExcludeOverlap { field: "department", .. })));
        let inverted = FilterSpec::new().range(NumericField::AgeDays, Some(5.0), Some(1.0));
        assert!(matches!(inverted.validate(), Err(FilterError::InvertedRange { .. })));
    }

    #[test]
    fn wire_format_roundtrip_and_unknown_field() {
        let wire = json!({
            "note_category": {"include": ["Consult Note", "Progress Note"]},
            "patient_id": {"exclude": ["002"]},
            "date": {"min": 18000.0, "max": 19000.0}
        });
        let spec = FilterSpec::from_json(&wire).unwrap();
        assert_eq!(spec.to_json(), wire);
        let again: FilterSpec = serde_json::from_value(wire).unwrap();
        assert_eq!(again, spec);

        let err = FilterSpec::from_json(&json!({"ward": {"include": ["x"]}})).unwrap_err();
        assert_eq!(err, FilterError::UnknownField("ward".into()));
        assert_eq!(err.field(), Some("ward"));

        let err = FilterSpec::from_json(&json!({"date": {"min": "yesterday"}})).unwrap_err();
        assert_eq!(err.field(), Some("date"));
        assert!(FilterSpec::from_json(&Value::Null).unwrap().is_empty());
    }

    #[test]
    fn compiled_filter_agrees_with_reference() {
        let mut dict = Dictionary::default();
        let a = attrs();
        let (cat, num) = dict.encode(&a);
        let specs = [
            FilterSpec::new(),
            FilterSpec::new().include(CategoricalField::PatientId, ["001"]),
            FilterSpec::new().include(CategoricalField::PatientId, ["zzz"]),
            FilterSpec::new().exclude(CategoricalField::PatientId, ["001", "zzz"]),
            FilterSpec::new().exclude(CategoricalField::AuthorName, ["x"]),
            FilterSpec::new().include(CategoricalField::AuthorName, ["x"]),
            FilterSpec::new().range(NumericField::Date, Some(0.0), Some(20000.0)),
            FilterSpec::new().range(NumericField::AgeDays, Some(0.0), None),
        ];
        for spec in specs {
            assert_eq!(CompiledFilter::compile(&spec, &dict).matches(&cat, &num), spec.matches(&a), "{spec}");
        }
        assert_eq!(dict.decode(&cat, &num), a);
    }
}
