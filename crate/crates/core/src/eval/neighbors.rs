//! Rank-based neighbourhood preservation: trustworthiness and continuity.

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Default neighbourhood size: 5% of the points, clamped to `[5, 50]`.
pub fn default_k(n: usize) -> usize {
    (n / 20).clamp(5, 50)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `ranks[j]` = rank of `j` among the neighbours of `i` (1 = nearest,
/// ties by index), `ranks[i] = 0`.
fn ranks_from(points: &[Vec<f64>], i: usize) -> Vec<usize> {
    let n = points.len();
    let d: Vec<f64> = points.iter().map(|p| sq_dist(&points[i], p)).collect();
    let mut order: Vec<usize> = (0..n).filter(|&j| j != i).collect();
    order.sort_by(|&a, &b| d[a].total_cmp(&d[b]).then(a.cmp(&b)));
    let mut ranks = vec![0; n];
    for (r, &j) in order.iter().enumerate() {
        ranks[j] = r + 1;
    }
    ranks
}

fn check(n: usize, other: usize, k: usize) -> Result<()> {
    if n != other {
        return Err(Error::ShapeMismatch {
            expected: format!("{n} embeddings"),
            got: format!("{other}"),
        });
    }
    if k == 0 || n <= 3 * k + 1 {
        return Err(Error::invalid(format!(
            "neighbourhood size k={k} needs more than {} points, got {n}",
            3 * k + 1
        )));
    }
    Ok(())
}

/// `sum_i sum_{j in N_k^from(i) \ N_k^to(i)} (rank_to(i, j) - k)`.
fn intrusion_penalty(from: &[Vec<f64>], to: &[Vec<f64>], k: usize) -> u64 {
    (0..from.len())
        .into_par_iter()
        .map(|i| {
            let rf = ranks_from(from, i);
            let rt = ranks_from(to, i);
            (0..from.len())
                .filter(|&j| j != i && rf[j] <= k && rt[j] > k)
                .map(|j| (rt[j] - k) as u64)
                .sum::<u64>()
        })
        .sum()
}

fn score(penalty: u64, n: usize, k: usize) -> f64 {
    let (n, k) = (n as f64, k as f64);
    1.0 - 2.0 / (n * k * (2.0 * n - 3.0 * k - 1.0)) * penalty as f64
}

/// Penalizes embedded neighbours that are not true neighbours.
pub fn trustworthiness(truth: &[Vec<f64>], embedding: &[Vec<f64>], k: usize) -> Result<f64> {
    check(truth.len(), embedding.len(), k)?;
    Ok(score(intrusion_penalty(embedding, truth, k), truth.len(), k))
}

/// Penalizes true neighbours that are missing from the embedded neighbourhood.
pub fn continuity(truth: &[Vec<f64>], embedding: &[Vec<f64>], k: usize) -> Result<f64> {
    check(truth.len(), embedding.len(), k)?;
    Ok(score(intrusion_penalty(truth, embedding, k), truth.len(), k))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};

    fn cloud(n: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| vec![rng.random_range(0.0..40.0), rng.random_range(0.0..20.0)]).collect()
    }

    /// Brute force: the rank of `j` w.r.t. `i` is one plus the number of
    /// points strictly closer, or equally close with a smaller index.
    fn oracle_rank(p: &[Vec<f64>], i: usize, j: usize) -> usize {
        let dj = sq_dist(&p[i], &p[j]);
        1 + (0..p.len())
            .filter(|&l| l != i && l != j)
            .filter(|&l| {
                let dl = sq_dist(&p[i], &p[l]);
                dl < dj || (dl == dj && l < j)
            })
            .count()
    }

    fn oracle(from: &[Vec<f64>], to: &[Vec<f64>], k: usize) -> f64 {
        let n = from.len();
        let mut sum = 0i64;
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let (rf, rt) = (oracle_rank(from, i, j), oracle_rank(to, i, j));
                if rf <= k && rt > k {
                    sum += rt as i64 - k as i64;
                }
            }
        }
        score(sum as u64, n, k)
    }

    #[test]
    fn identity_scores_one() {
        let p = cloud(60, 1);
        assert_eq!(trustworthiness(&p, &p, 5).unwrap(), 1.0);
        assert_eq!(continuity(&p, &p, 5).unwrap(), 1.0);
    }

    #[test]
    fn random_permutation_matches_oracle() {
        let p = cloud(100, 2);
        let mut e = p.clone();
        e.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(3));
        assert_eq!(trustworthiness(&p, &e, 10).unwrap(), oracle(&e, &p, 10));
        assert_eq!(continuity(&p, &e, 10).unwrap(), oracle(&p, &e, 10));
    }

    #[test]
    fn collapsed_embedding_matches_oracle() {
        let p = cloud(50, 4);
        let e = vec![vec![1.0, 1.0]; 50];
        let ct = continuity(&p, &e, 5).unwrap();
        assert_eq!(ct, oracle(&p, &e, 5));
        assert!(ct < 0.7);
    }

    #[test]
    fn too_few_points_rejected() {
        let p = cloud(16, 5);
        assert!(trustworthiness(&p, &p, 5).is_err());
        assert!(trustworthiness(&p, &p[..10], 2).is_err());
        assert!(default_k(1000) == 50 && default_k(10) == 5 && default_k(300) == 15);
    }
}
