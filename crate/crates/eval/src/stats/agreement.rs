use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::StatsError;

/// Cohen's κ for two raters over the same items.
pub fn cohens_kappa<T: Ord>(a: &[T], b: &[T]) -> Result<f64, StatsError> {
    if a.len() != b.len() {
        return Err(StatsError::LengthMismatch(a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(StatsError::EmptySample);
    }
    let n = a.len() as f64;
    let mut marg: BTreeMap<&T, (f64, f64)> = BTreeMap::new();
    let mut agree = 0usize;
    for (x, y) in a.iter().zip(b) {
        marg.entry(x).or_default().0 += 1.0;
        marg.entry(y).or_default().1 += 1.0;
        agree += usize::from(x == y);
    }
    let p_o = agree as f64 / n;
    let p_e: f64 = marg.values().map(|(ca, cb)| (ca / n) * (cb / n)).sum();
    if (1.0 - p_e).abs() < 1e-12 {
        return Err(StatsError::Undefined("Cohen's kappa"));
    }
    Ok((p_o - p_e) / (1.0 - p_e))
}

/// Fleiss' κ over an items × raters matrix with the same number of raters per item.
pub fn fleiss_kappa<T: Ord>(ratings: &[Vec<T>]) -> Result<f64, StatsError> {
    if ratings.len() < 2 {
        return Err(StatsError::TooFew { what: "items", need: 2, got: ratings.len() });
    }
    let raters = ratings[0].len();
    if raters < 2 {
        return Err(StatsError::TooFew { what: "raters", need: 2, got: raters });
    }
    if let Some((row, r)) = ratings.iter().enumerate().find(|(_, r)| r.len() != raters) {
        return Err(StatsError::Ragged { row, got: r.len(), expected: raters });
    }
    let m = raters as f64;
    let mut totals: BTreeMap<&T, f64> = BTreeMap::new();
    let mut p_bar = 0.0;
    for row in ratings {
        let mut counts: BTreeMap<&T, f64> = BTreeMap::new();
        for v in row {
            *counts.entry(v).or_default() += 1.0;
            *totals.entry(v).or_default() += 1.0;
        }
        let sq: f64 = counts.values().map(|c| c * c).sum();
        p_bar += (sq - m) / (m * (m - 1.0));
    }
    let cells = ratings.len() as f64 * m;
    p_bar /= ratings.len() as f64;
    let p_e: f64 = totals.values().map(|c| (c / cells).powi(2)).sum();
    if (1.0 - p_e).abs() < 1e-12 {
        return Err(StatsError::Undefined("Fleiss' kappa"));
    }
    Ok((p_bar - p_e) / (1.0 - p_e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlphaMetric {
    #[default]
    Interval,
    Nominal,
}

impl AlphaMetric {
    fn delta(self, a: f64, b: f64) -> f64 {
        match self {
            AlphaMetric::Interval => (a - b) * (a - b),
            AlphaMetric::Nominal => f64::from(u8::from(a != b)),
        }
    }
}

/// Krippendorff's α over an items × raters matrix; `None` marks a missing rating.
/// Items with fewer than two ratings are not pairable and are ignored.
pub fn krippendorff_alpha(ratings: &[Vec<Option<f64>>], metric: AlphaMetric) -> Result<f64, StatsError> {
    let units: Vec<Vec<f64>> = ratings
        .iter()
        .map(|row| row.iter().flatten().copied().collect::<Vec<f64>>())
        .filter(|u| u.len() >= 2)
        .collect();
    if units.iter().flatten().any(|v| !v.is_finite()) {
        return Err(StatsError::Invalid("ratings must be finite".into()));
    }
    let n: usize = units.iter().map(Vec::len).sum();
    if n < 2 {
        return Err(StatsError::TooFew { what: "pairable values", need: 2, got: n });
    }
    let n = n as f64;

    let mut observed = 0.0;
    for u in &units {
        let mut s = 0.0;
        for (i, &a) in u.iter().enumerate() {
            for &b in &u[i + 1..] {
                s += metric.delta(a, b);
            }
        }
        // each unordered pair counts twice in the ordered-pair sum
        observed += 2.0 * s / (u.len() as f64 - 1.0);
    }
    observed /= n;

    let values: Vec<f64> = units.into_iter().flatten().collect();
    let pair_sum = match metric {
        AlphaMetric::Interval => {
            let mean = values.iter().sum::<f64>() / n;
            2.0 * n * values.iter().map(|v| (v - mean).powi(2)).sum::<f64>()
        }
        AlphaMetric::Nominal => {
            let mut counts: BTreeMap<u64, f64> = BTreeMap::new();
            for v in &values {
                *counts.entry(v.to_bits()).or_default() += 1.0;
            }
            n * n - counts.values().map(|c| c * c).sum::<f64>()
        }
    };
    let expected = pair_sum / (n * (n - 1.0));
    if expected <= 0.0 {
        return Err(StatsError::Undefined("Krippendorff's alpha"));
    }
    Ok(1.0 - observed / expected)
}
