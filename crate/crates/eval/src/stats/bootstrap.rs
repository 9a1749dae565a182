//! Patient-level bootstrap comparing within-method and cross-method agreement.
//!
//! For every patient, each pair of abstractors who rated that patient is
//! classed as within-method (both used the same method) or cross-method.
//! Agreement for a class pools its pairs: Cohen's κ over the two rating
//! columns for categorical tasks, interval Krippendorff's α for numeric ones.
//! Pairs are oriented by abstractor id so the columns are reproducible.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{cohens_kappa, fleiss_kappa, krippendorff_alpha, mann_whitney_u, AlphaMetric, MannWhitney, StatsError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Ehr,
    Semantic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ExtractedValue {
    Numeric(f64),
    Categorical(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbstractionRecord {
    pub task_id: String,
    pub abstractor_id: String,
    pub patient_id: String,
    pub method: Method,
    pub time_seconds: f64,
    pub value: ExtractedValue,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    pub within: f64,
    pub cross: f64,
    /// Observed within-method minus cross-method agreement.
    pub delta: f64,
    /// Share of resamples whose difference lies at least as far from the
    /// observed one as the observed one lies from zero.
    pub p: f64,
    /// Share of resamples whose difference is at least the observed one.
    pub p_upper: f64,
    pub resamples: usize,
    /// Resamples discarded because an agreement was undefined on them.
    pub redrawn: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementSummary {
    pub task_id: String,
    /// "kappa" or "alpha".
    pub statistic: String,
    /// Fleiss' κ or Krippendorff's α over the patient × abstractor matrix.
    pub overall: f64,
    pub within: f64,
    pub cross: f64,
    pub within_pairs: usize,
    pub cross_pairs: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Categorical,
    Numeric,
}

#[derive(Debug, Clone)]
struct Pair {
    within: bool,
    first: ExtractedValue,
    second: ExtractedValue,
}

struct Prepared {
    kind: Kind,
    patients: Vec<Vec<Pair>>,
}

fn prepare(records: &[AbstractionRecord]) -> Result<Prepared, StatsError> {
    let first = records.first().ok_or(StatsError::EmptySample)?;
    if let Some(r) = records.iter().find(|r| r.task_id != first.task_id) {
        return Err(StatsError::Invalid(format!("records mix tasks {} and {}", first.task_id, r.task_id)));
    }
    let kind = match records.iter().map(|r| matches!(r.value, ExtractedValue::Numeric(_))).collect::<BTreeSet<_>>() {
        s if s.len() > 1 => return Err(StatsError::Invalid("task mixes numeric and categorical values".into())),
        s if s.contains(&true) => Kind::Numeric,
        _ => Kind::Categorical,
    };
    let methods: BTreeSet<Method> = records.iter().map(|r| r.method).collect();
    let raters: BTreeSet<&str> = records.iter().map(|r| r.abstractor_id.as_str()).collect();
    if methods.len() < 2 {
        return Err(StatsError::TooFew { what: "methods", need: 2, got: methods.len() });
    }
    if raters.len() < 2 {
        return Err(StatsError::TooFew { what: "abstractors", need: 2, got: raters.len() });
    }
    let mut by_patient: BTreeMap<&str, BTreeMap<&str, &AbstractionRecord>> = BTreeMap::new();
    for r in records {
        if by_patient.entry(&r.patient_id).or_default().insert(&r.abstractor_id, r).is_some() {
            return Err(StatsError::Invalid(format!(
                "abstractor {} rated patient {} twice",
                r.abstractor_id, r.patient_id
            )));
        }
    }
    let patients = by_patient
        .into_values()
        .map(|raters| {
            let rs: Vec<&AbstractionRecord> = raters.into_values().collect();
            let mut pairs = Vec::new();
            for (i, a) in rs.iter().enumerate() {
                for b in &rs[i + 1..] {
                    pairs.push(Pair { within: a.method == b.method, first: a.value.clone(), second: b.value.clone() });
                }
            }
            pairs
        })
        .collect();
    Ok(Prepared { kind, patients })
}

fn pooled_agreement<'a>(kind: Kind, pairs: impl Iterator<Item = &'a Pair>) -> Result<f64, StatsError> {
    match kind {
        Kind::Categorical => {
            let (a, b): (Vec<String>, Vec<String>) = pairs.map(|p| (label(&p.first), label(&p.second))).unzip();
            cohens_kappa(&a, &b)
        }
        Kind::Numeric => {
            let rows: Vec<Vec<Option<f64>>> = pairs.map(|p| vec![number(&p.first), number(&p.second)]).collect();
            krippendorff_alpha(&rows, AlphaMetric::Interval)
        }
    }
}

fn label(v: &ExtractedValue) -> String {
    match v {
        ExtractedValue::Categorical(s) => s.clone(),
        ExtractedValue::Numeric(x) => x.to_string(),
    }
}

fn number(v: &ExtractedValue) -> Option<f64> {
    match v {
        ExtractedValue::Numeric(x) => Some(*x),
        ExtractedValue::Categorical(_) => None,
    }
}

fn split(kind: Kind, patients: &[&Vec<Pair>]) -> Result<(f64, f64), StatsError> {
    let all = || patients.iter().flat_map(|p| p.iter());
    let within = pooled_agreement(kind, all().filter(|p| p.within))?;
    let cross = pooled_agreement(kind, all().filter(|p| !p.within))?;
    Ok((within, cross))
}

/// Resamples patients with replacement and compares within-method against
/// cross-method agreement. Deterministic for a given seed.
pub fn bootstrap_agreement_diff(
    records: &[AbstractionRecord],
    resamples: usize,
    seed: u64,
) -> Result<BootstrapResult, StatsError> {
    if resamples == 0 {
        return Err(StatsError::TooFew { what: "resamples", need: 1, got: 0 });
    }
    let prep = prepare(records)?;
    let everyone: Vec<&Vec<Pair>> = prep.patients.iter().collect();
    let (within, cross) = split(prep.kind, &everyone)?;
    let delta = within - cross;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = prep.patients.len();
    let max_redraws = resamples.saturating_mul(10);
    let (mut far, mut upper, mut redrawn, mut done) = (0usize, 0usize, 0usize, 0usize);
    let mut draw = Vec::with_capacity(n);
    while done < resamples {
        draw.clear();
        draw.extend((0..n).map(|_| &prep.patients[rng.random_range(0..n)]));
        let Ok((w, c)) = split(prep.kind, &draw) else {
            redrawn += 1;
            if redrawn > max_redraws {
                return Err(StatsError::Undefined("agreement on most bootstrap resamples"));
            }
            continue;
        };
        let d = w - c;
        far += usize::from((d - delta).abs() >= delta.abs() - 1e-12);
        upper += usize::from(d >= delta - 1e-12);
        done += 1;
    }
    Ok(BootstrapResult {
        within,
        cross,
        delta,
        p: far as f64 / resamples as f64,
        p_upper: upper as f64 / resamples as f64,
        resamples,
        redrawn,
    })
}

/// Overall and per-class agreement for one task.
pub fn agreement_summary(records: &[AbstractionRecord]) -> Result<AgreementSummary, StatsError> {
    let prep = prepare(records)?;
    let everyone: Vec<&Vec<Pair>> = prep.patients.iter().collect();
    let (within, cross) = split(prep.kind, &everyone)?;
    let all = || prep.patients.iter().flatten();

    let raters: BTreeSet<&str> = records.iter().map(|r| r.abstractor_id.as_str()).collect();
    let mut matrix: BTreeMap<&str, BTreeMap<&str, &ExtractedValue>> = BTreeMap::new();
    for r in records {
        matrix.entry(&r.patient_id).or_default().insert(&r.abstractor_id, &r.value);
    }
    let (statistic, overall) = match prep.kind {
        Kind::Categorical => {
            let rows: Vec<Vec<String>> = matrix.values().map(|m| m.values().map(|v| label(v)).collect()).collect();
            ("kappa", fleiss_kappa(&rows)?)
        }
        Kind::Numeric => {
            let rows: Vec<Vec<Option<f64>>> = matrix
                .values()
                .map(|m| raters.iter().map(|r| m.get(r).and_then(|v| number(v))).collect())
                .collect();
            ("alpha", krippendorff_alpha(&rows, AlphaMetric::Interval)?)
        }
    };
    Ok(AgreementSummary {
        task_id: records[0].task_id.clone(),
        statistic: statistic.to_string(),
        overall,
        within,
        cross,
        within_pairs: all().filter(|p| p.within).count(),
        cross_pairs: all().filter(|p| !p.within).count(),
    })
}

/// Mann-Whitney U on per-patient completion time, EHR first.
pub fn compare_times(records: &[AbstractionRecord]) -> Result<MannWhitney, StatsError> {
    let times = |m: Method| records.iter().filter(|r| r.method == m).map(|r| r.time_seconds).collect::<Vec<_>>();
    mann_whitney_u(&times(Method::Ehr), &times(Method::Semantic))
}
