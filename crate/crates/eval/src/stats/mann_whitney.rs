use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use super::StatsError;

/// Combined sample size up to which [`mann_whitney_u`] enumerates the exact
/// permutation distribution.
pub const EXACT_MAX_N: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PValueMethod {
    Exact,
    Normal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MannWhitney {
    /// U for the first sample: pairs where it is larger, ties counting one half.
    pub u: f64,
    pub u_other: f64,
    pub p: f64,
    pub method: PValueMethod,
}

/// Two-sided Mann-Whitney U test; exact when `n1 + n2 <= EXACT_MAX_N`, else
/// the tie-corrected normal approximation.
pub fn mann_whitney_u(a: &[f64], b: &[f64]) -> Result<MannWhitney, StatsError> {
    let method = if a.len() + b.len() <= EXACT_MAX_N { PValueMethod::Exact } else { PValueMethod::Normal };
    mann_whitney_u_with(a, b, method)
}

pub fn mann_whitney_u_with(a: &[f64], b: &[f64], method: PValueMethod) -> Result<MannWhitney, StatsError> {
    if a.is_empty() || b.is_empty() {
        return Err(StatsError::EmptySample);
    }
    if a.iter().chain(b).any(|x| !x.is_finite()) {
        return Err(StatsError::Invalid("samples must be finite".into()));
    }
    let (n1, n2) = (a.len(), b.len());
    let doubled = doubled_midranks(a, b);
    let r1: u64 = doubled[..n1].iter().sum();
    let offset = (n1 * (n1 + 1)) as f64 / 2.0;
    let u = r1 as f64 / 2.0 - offset;
    let u_other = (n1 * n2) as f64 - u;
    let p = match method {
        PValueMethod::Exact => exact_p(&doubled, n1, r1),
        PValueMethod::Normal => normal_p(&doubled, n1, n2, u),
    };
    Ok(MannWhitney { u, u_other, p, method })
}

/// Twice the midrank of every pooled value, first sample first. Doubling keeps
/// tied ranks integral.
fn doubled_midranks(a: &[f64], b: &[f64]) -> Vec<u64> {
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let mut order: Vec<usize> = (0..pooled.len()).collect();
    order.sort_by(|&i, &j| pooled[i].total_cmp(&pooled[j]));
    let mut ranks = vec![0u64; pooled.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && pooled[order[j + 1]] == pooled[order[i]] {
            j += 1;
        }
        // positions i..=j hold ranks i+1..=j+1; twice their mean is i+j+2
        for &o in &order[i..=j] {
            ranks[o] = (i + j + 2) as u64;
        }
        i = j + 1;
    }
    ranks
}

/// Permutation distribution of the first sample's rank sum, conditional on the
/// observed ties, by counting subsets of each size and sum.
fn exact_p(doubled: &[u64], n1: usize, r1: u64) -> f64 {
    let max_sum: u64 = doubled.iter().sum();
    let width = max_sum as usize + 1;
    let mut ways = vec![vec![0f64; width]; n1 + 1];
    ways[0][0] = 1.0;
    for (seen, &r) in doubled.iter().enumerate() {
        let r = r as usize;
        for j in (1..=n1.min(seen + 1)).rev() {
            let (lower, upper) = ways.split_at_mut(j);
            let prev = &lower[j - 1];
            for s in (r..width).rev() {
                if prev[s - r] != 0.0 {
                    upper[0][s] += prev[s - r];
                }
            }
        }
    }
    let total: f64 = ways[n1].iter().sum();
    let mean = n1 as f64 * (doubled.len() as f64 + 1.0);
    let observed = (r1 as f64 - mean).abs();
    let extreme: f64 = ways[n1]
        .iter()
        .enumerate()
        .filter(|&(s, &w)| w != 0.0 && (s as f64 - mean).abs() >= observed - 1e-9)
        .map(|(_, w)| w)
        .sum();
    (extreme / total).min(1.0)
}

fn normal_p(doubled: &[u64], n1: usize, n2: usize, u: f64) -> f64 {
    let n = (n1 + n2) as f64;
    let mut sorted = doubled.to_vec();
    sorted.sort_unstable();
    let mut ties = 0.0;
    for run in sorted.chunk_by(|x, y| x == y) {
        let t = run.len() as f64;
        ties += t * t * t - t;
    }
    let (f1, f2) = (n1 as f64, n2 as f64);
    let var = f1 * f2 / 12.0 * ((n + 1.0) - ties / (n * (n - 1.0)));
    if var <= 0.0 {
        return 1.0;
    }
    let mu = f1 * f2 / 2.0;
    let z = ((u - mu).abs() - 0.5).max(0.0) / var.sqrt();
    let std = Normal::standard();
    (2.0 * (1.0 - std.cdf(z))).min(1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn u_by_pairs(a: &[f64], b: &[f64]) -> f64 {
        let mut u = 0.0;
        for x in a {
            for y in b {
                u += if x > y {
                    1.0
                } else if x == y {
                    0.5
                } else {
                    0.0
                };
            }
        }
        u
    }

    /// Two-sided exact p by walking every way to split the pooled sample.
    fn p_by_enumeration(a: &[f64], b: &[f64]) -> f64 {
        let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
        let n = pooled.len();
        let mu = (a.len() * b.len()) as f64 / 2.0;
        let observed = (u_by_pairs(a, b) - mu).abs();
        let (mut hits, mut total) = (0u64, 0u64);
        for mask in 0u32..(1 << n) {
            if mask.count_ones() as usize != a.len() {
                continue;
            }
            let (x, y): (Vec<(usize, f64)>, Vec<(usize, f64)>) =
                pooled.iter().copied().enumerate().partition(|(i, _)| mask & (1 << i) != 0);
            let x: Vec<f64> = x.into_iter().map(|p| p.1).collect();
            let y: Vec<f64> = y.into_iter().map(|p| p.1).collect();
            total += 1;
            if (u_by_pairs(&x, &y) - mu).abs() >= observed - 1e-9 {
                hits += 1;
            }
        }
        hits as f64 / total as f64
    }

    #[test]
    fn examples() {
        assert_eq!(mann_whitney_u(&[1.0, 2.0], &[3.0, 4.0]).unwrap().u, 0.0);
        let same = [1.0, 2.0, 3.0];
        let r = mann_whitney_u(&same, &same).unwrap();
        assert_eq!((r.u, r.method), (4.5, PValueMethod::Exact));
        assert!((r.p - 1.0).abs() < 1e-12);
        assert_eq!(mann_whitney_u(&[], &[1.0]), Err(StatsError::EmptySample));
        let r = mann_whitney_u(&[5.0; 25], &[5.0; 3]).unwrap();
        assert_eq!((r.method, r.p), (PValueMethod::Normal, 1.0));
    }

    #[test]
    fn matches_pair_count_and_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..60 {
            let n1 = rng.random_range(1..7);
            let n2 = rng.random_range(1..7);
            let mut draw = |n| (0..n).map(|_| rng.random_range(0..5) as f64).collect::<Vec<_>>();
            let (a, b) = (draw(n1), draw(n2));
            let r = mann_whitney_u_with(&a, &b, PValueMethod::Exact).unwrap();
            assert!((r.u - u_by_pairs(&a, &b)).abs() < 1e-9);
            assert!((r.u + r.u_other - (n1 * n2) as f64).abs() < 1e-9);
            assert!((r.p - p_by_enumeration(&a, &b)).abs() < 1e-9, "{a:?} {b:?}");
        }
    }

    #[test]
    fn exact_and_normal_agree_at_fifteen() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        for shift in [0.0, 0.3, 0.8] {
            let a: Vec<f64> = (0..15).map(|_| rng.random::<f64>()).collect();
            let b: Vec<f64> = (0..15).map(|_| rng.random::<f64>() + shift).collect();
            let exact = mann_whitney_u_with(&a, &b, PValueMethod::Exact).unwrap().p;
            let normal = mann_whitney_u_with(&a, &b, PValueMethod::Normal).unwrap().p;
            assert!((exact - normal).abs() < 0.01, "shift {shift}: {exact} vs {normal}");
        }
    }
}
