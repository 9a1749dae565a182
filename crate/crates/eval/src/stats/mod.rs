//! Agreement and two-sample statistics for abstraction studies.

mod agreement;
mod bootstrap;
mod mann_whitney;

pub use agreement::{cohens_kappa, fleiss_kappa, krippendorff_alpha, AlphaMetric};
pub use bootstrap::{
    agreement_summary, bootstrap_agreement_diff, compare_times, AbstractionRecord, AgreementSummary, BootstrapResult,
    ExtractedValue, Method,
};
pub use mann_whitney::{mann_whitney_u, mann_whitney_u_with, MannWhitney, PValueMethod, EXACT_MAX_N};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("sample is empty")]
    EmptySample,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("matrix is ragged: row {row} has {got} ratings, expected {expected}")]
    Ragged { row: usize, got: usize, expected: usize },
    #[error("need at least {need} {what}, got {got}")]
    TooFew { what: &'static str, need: usize, got: usize },
    #[error("{0} is undefined for this input")]
    Undefined(&'static str),
    #[error("invalid input: {0}")]
    Invalid(String),
}

/// Wilson score interval for a binomial proportion, clamped to [0, 1].
pub fn wilson_ci(successes: u64, trials: u64, z: f64) -> Result<(f64, f64), StatsError> {
    if trials == 0 {
        return Err(StatsError::TooFew { what: "trials", need: 1, got: 0 });
    }
    if successes > trials {
        return Err(StatsError::Invalid(format!("{successes} successes out of {trials} trials")));
    }
    let n = trials as f64;
    let p = successes as f64 / n;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let center = (p + z2 / (2.0 * n)) / denom;
    let half = z * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    let low = if successes == 0 { 0.0 } else { (center - half).max(0.0) };
    let high = if successes == trials { 1.0 } else { (center + half).min(1.0) };
    Ok((low, high))
}

/// The 95% two-sided normal quantile used by default.
pub const Z_95: f64 = 1.959963984540054;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wilson_reference_intervals() {
        let (lo, hi) = wilson_ci(319, 334, Z_95).unwrap();
        assert!((lo - 0.927).abs() <= 0.001 && (hi - 0.973).abs() <= 0.001, "{lo} {hi}");
        let (lo, hi) = wilson_ci(316, 334, Z_95).unwrap();
        assert!((lo - 0.916).abs() <= 0.001 && (hi - 0.966).abs() <= 0.001, "{lo} {hi}");
    }

    #[test]
    fn wilson_bounds() {
        assert_eq!(wilson_ci(0, 10, Z_95).unwrap().0, 0.0);
        assert_eq!(wilson_ci(10, 10, Z_95).unwrap().1, 1.0);
        assert!(wilson_ci(1, 0, Z_95).is_err());
        assert!(wilson_ci(11, 10, Z_95).is_err());
    }

    #[test]
    fn wilson_matches_quadratic_roots() {
        // the bounds solve (p - phat)^2 = z^2 p (1 - p) / n
        for (s, n) in [(3u64, 17u64), (50, 60), (1, 2), (99, 1000)] {
            let (lo, hi) = wilson_ci(s, n, 1.5).unwrap();
            let phat = s as f64 / n as f64;
            for p in [lo, hi] {
                let lhs = (p - phat).powi(2);
                let rhs = 2.25 * p * (1.0 - p) / n as f64;
                assert!((lhs - rhs).abs() < 1e-12, "{s}/{n}: {lhs} vs {rhs}");
            }
        }
    }
}
