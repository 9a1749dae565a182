//! Spherical k-means: points and centroids live on the unit sphere and a
//! point belongs to the centroid with the largest dot product.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::IndexError;
use crate::embedding::{l2_normalize, EmbeddingVector};

pub const DEFAULT_MAX_ITERS: usize = 25;

#[derive(Debug, Clone, Copy)]
pub struct KMeansParams {
    pub k: usize,
    pub max_iters: usize,
    pub seed: u64,
}

#[inline]
pub(crate) fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Best centroid by dot product, ties to the lower index.
fn nearest(point: &[f32], centroids: &[Vec<f32>]) -> (usize, f32) {
    let mut best = (0, f32::NEG_INFINITY);
    for (i, c) in centroids.iter().enumerate() {
        let d = dot(point, c);
        if d > best.1 {
            best = (i, d);
        }
    }
    best
}

/// k-means++ seeding with `1 - max dot` as the distance weight.
fn seed_centroids(sample: &[EmbeddingVector], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f32>> {
    let n = sample.len();
    let mut chosen = vec![false; n];
    let first = rng.random_range(0..n);
    chosen[first] = true;
    let mut centroids = vec![sample[first].as_slice().to_vec()];
    let mut best: Vec<f32> = sample.par_iter().map(|p| dot(p.as_slice(), &centroids[0])).collect();
    while centroids.len() < k {
        let weights: Vec<f64> = best
            .iter()
            .zip(&chosen)
            .map(|(&b, &c)| if c { 0.0 } else { (1.0 - b as f64).max(0.0) })
            .collect();
        let total: f64 = weights.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = None;
            for (i, w) in weights.iter().enumerate() {
                if *w > 0.0 {
                    pick = Some(i);
                    if target < *w {
                        break;
                    }
                    target -= w;
                }
            }
            pick.expect("positive total weight")
        } else {
            chosen.iter().position(|c| !c).expect("k <= n")
        };
        chosen[pick] = true;
        let c = sample[pick].as_slice().to_vec();
        best.par_iter_mut().zip(sample.par_iter()).for_each(|(b, p)| *b = b.max(dot(p.as_slice(), &c)));
        centroids.push(c);
    }
    centroids
}

pub fn spherical_kmeans(sample: &[EmbeddingVector], params: KMeansParams) -> Result<Vec<EmbeddingVector>, IndexError> {
    if sample.is_empty() {
        return Err(IndexError::EmptySample);
    }
    if params.k == 0 || params.k > sample.len() {
        return Err(IndexError::TooManyPartitions { requested: params.k, available: sample.len() });
    }
    let dim = sample[0].dim();
    if let Some(bad) = sample.iter().find(|v| v.dim() != dim) {
        return Err(IndexError::DimensionMismatch { expected: dim, got: bad.dim() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut centroids = seed_centroids(sample, params.k, &mut rng);
    let mut assignment: Vec<usize> = vec![usize::MAX; sample.len()];

    for iter in 0..params.max_iters.max(1) {
        let next: Vec<(usize, f32)> = sample.par_iter().map(|p| nearest(p.as_slice(), &centroids)).collect();
        let changed = next.iter().zip(&assignment).filter(|(a, b)| a.0 != **b).count();
        assignment.iter_mut().zip(&next).for_each(|(a, n)| *a = n.0);
        if changed == 0 {
            tracing::debug!(iter, "k-means converged");
            break;
        }

        let mut sums = vec![vec![0.0f64; dim]; params.k];
        let mut counts = vec![0usize; params.k];
        for (p, &c) in sample.iter().zip(&assignment) {
            counts[c] += 1;
            for (s, &x) in sums[c].iter_mut().zip(p.as_slice()) {
                *s += x as f64;
            }
        }

        // Empty clusters take the worst-served points, one each.
        let mut donors: Vec<usize> = (0..sample.len()).collect();
        donors.sort_by(|&a, &b| next[a].1.total_cmp(&next[b].1).then(a.cmp(&b)));
        let mut donors = donors.into_iter();
        for c in 0..params.k {
            if counts[c] == 0 {
                if let Some(d) = donors.next() {
                    centroids[c] = sample[d].as_slice().to_vec();
                }
                continue;
            }
            let raw: Vec<f32> = sums[c].iter().map(|&s| s as f32).collect();
            if let Ok(v) = l2_normalize(raw) {
                centroids[c] = v.into_inner();
            }
        }
    }
    Ok(centroids.into_iter().map(EmbeddingVector::from_unit).collect())
}

pub fn train_partitions(sample: &[EmbeddingVector], num_partitions: usize, seed: u64) -> Result<Vec<EmbeddingVector>, IndexError> {
    spherical_kmeans(sample, KMeansParams { k: num_partitions, max_iters: DEFAULT_MAX_ITERS, seed })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> EmbeddingVector {
        let v: Vec<f32> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        l2_normalize(v).unwrap()
    }

    fn around(center: &[f32], spread: f32, rng: &mut ChaCha8Rng) -> EmbeddingVector {
        let v: Vec<f32> = center.iter().map(|c| c + spread * { let z: f64 = StandardNormal.sample(rng); z as f32 }).collect();
        l2_normalize(v).unwrap()
    }

    fn normalized_mean(points: &[EmbeddingVector]) -> EmbeddingVector {
        let dim = points[0].dim();
        let mut sum = vec![0.0f32; dim];
        for p in points {
            for (s, x) in sum.iter_mut().zip(p.as_slice()) {
                *s += x;
            }
        }
        l2_normalize(sum).unwrap()
    }

    #[test]
    fn single_partition_is_normalized_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let sample: Vec<_> = (0..50).map(|_| random_unit(&mut rng, 8)).collect();
        let c = train_partitions(&sample, 1, 3).unwrap();
        let mean = normalized_mean(&sample);
        assert!(c[0].dot(&mean) > 1.0 - 1e-6);
    }

    #[test]
    fn separated_clusters_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let dim = 16;
        let a = random_unit(&mut rng, dim);
        let b: Vec<f32> = a.as_slice().iter().map(|x| -x).collect();
        let ca: Vec<_> = (0..100).map(|_| around(a.as_slice(), 0.05, &mut rng)).collect();
        let cb: Vec<_> = (0..100).map(|_| around(&b, 0.05, &mut rng)).collect();
        let sample: Vec<_> = ca.iter().chain(&cb).cloned().collect();
        let centroids = train_partitions(&sample, 2, 9).unwrap();
        let cos5 = 5f64.to_radians().cos();
        for cluster in [&ca, &cb] {
            let mean = normalized_mean(cluster);
            let best = centroids.iter().map(|c| c.dot(&mean)).fold(f64::MIN, f64::max);
            assert!(best > cos5, "centroid off by more than 5 degrees: cos={best}");
        }
    }

    #[test]
    fn k_equals_n_is_a_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let sample: Vec<_> = (0..12).map(|_| random_unit(&mut rng, 6)).collect();
        let centroids = train_partitions(&sample, 12, 4).unwrap();
        for p in &sample {
            assert!(centroids.iter().any(|c| c.dot(p) > 1.0 - 1e-6));
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let sample: Vec<_> = (0..300).map(|_| random_unit(&mut rng, 8)).collect();
        assert_eq!(train_partitions(&sample, 7, 11).unwrap(), train_partitions(&sample, 7, 11).unwrap());
    }

    #[test]
    fn errors() {
        assert!(matches!(train_partitions(&[], 1, 0), Err(IndexError::EmptySample)));
        let one = vec![EmbeddingVector::basis(3, 0)];
        assert!(matches!(train_partitions(&one, 2, 0), Err(IndexError::TooManyPartitions { .. })));
        let mixed = vec![EmbeddingVector::basis(3, 0), EmbeddingVector::basis(4, 0)];
        assert!(matches!(train_partitions(&mixed, 1, 0), Err(IndexError::DimensionMismatch { .. })));
    }

    #[test]
    fn duplicate_points_still_yield_k_centroids() {
        let sample = vec![EmbeddingVector::basis(3, 0); 5];
        assert_eq!(train_partitions(&sample, 3, 0).unwrap().len(), 3);
    }
}
