use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::types::ParseResult;

const MAX_ITERS: usize = 100;
const SHIFT_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    pub centroids: Matrix,
    pub labels: Vec<usize>,
    pub iterations: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(x: &[f64], centroids: &Matrix) -> usize {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter_rows().enumerate() {
        let d = sq_dist(x, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best.0
}

/// Lloyd's algorithm with farthest-point seeding.
///
/// The first centroid is a frame drawn from `seed`; each further centroid is
/// the frame farthest from all chosen ones (ties to the earliest frame).
/// Clusters that empty out keep their previous centroid.
pub fn kmeans(x: &Matrix, k: usize, seed: u64) -> Result<KMeans> {
    let (n, d) = x.shape();
    if k == 0 {
        return Err(Error::Input("k must be at least 1".into()));
    }
    if k > n {
        return Err(Error::Input(format!("k = {k} exceeds {n} frames")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = vec![rng.gen_range(0..n)];
    let mut min_d: Vec<f64> = x.iter_rows().map(|r| sq_dist(r, x.row(chosen[0]))).collect();
    while chosen.len() < k {
        let mut far = 0;
        for (i, &v) in min_d.iter().enumerate() {
            if v > min_d[far] {
                far = i;
            }
        }
        chosen.push(far);
        for (i, r) in x.iter_rows().enumerate() {
            min_d[i] = min_d[i].min(sq_dist(r, x.row(far)));
        }
    }
    let mut centroids = x.select_rows(&chosen);

    let mut labels = vec![0; n];
    let mut iterations = 0;
    while iterations < MAX_ITERS {
        iterations += 1;
        for (i, r) in x.iter_rows().enumerate() {
            labels[i] = nearest(r, &centroids);
        }
        let mut sums = Matrix::zeros(k, d);
        let mut counts = vec![0usize; k];
        for (i, r) in x.iter_rows().enumerate() {
            counts[labels[i]] += 1;
            for (s, v) in sums.row_mut(labels[i]).iter_mut().zip(r) {
                *s += v;
            }
        }
        let mut shift = 0.0_f64;
        for j in 0..k {
            if counts[j] == 0 {
                continue;
            }
            let inv = 1.0 / counts[j] as f64;
            let mean: Vec<f64> = sums.row(j).iter().map(|s| s * inv).collect();
            shift = shift.max(sq_dist(&mean, centroids.row(j)).sqrt());
            centroids.row_mut(j).copy_from_slice(&mean);
        }
        if shift < SHIFT_TOL {
            break;
        }
    }
    for (i, r) in x.iter_rows().enumerate() {
        labels[i] = nearest(r, &centroids);
    }
    Ok(KMeans {
        centroids,
        labels,
        iterations,
    })
}

/// Sum of squared distances from each frame to the mean of its cluster.
pub fn within_cluster_ss(x: &Matrix, labels: &[usize]) -> f64 {
    let k = labels.iter().copied().max().map_or(0, |m| m + 1);
    let d = x.cols();
    let mut sums = Matrix::zeros(k, d);
    let mut counts = vec![0usize; k];
    for (r, &l) in x.iter_rows().zip(labels) {
        counts[l] += 1;
        for (s, v) in sums.row_mut(l).iter_mut().zip(r) {
            *s += v;
        }
    }
    x.iter_rows()
        .zip(labels)
        .map(|(r, &l)| {
            let mean: Vec<f64> = sums.row(l).iter().map(|s| s / counts[l] as f64).collect();
            sq_dist(r, &mean)
        })
        .sum()
}

/// Clusters the frames of one sequence and reads boundaries off label changes.
pub fn kmeans_parse(id: impl Into<String>, x: &Matrix, k: usize, seed: u64) -> Result<ParseResult> {
    let km = kmeans(x, k, seed)?;
    Ok(ParseResult::from_labels(id, km.labels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::transitions;

    #[test]
    fn separable_two_blocks() {
        let a = [0.0, 0.0, 1.0];
        let b = [10.0, -5.0, 3.0];
        let x = Matrix::from_rows(&[a, a, a, b, b, b]);
        for seed in 0..5 {
            assert_eq!(kmeans_parse("x", &x, 2, seed).unwrap().starts, vec![3]);
        }
    }

    #[test]
    fn one_cluster_never_splits() {
        let x = Matrix::random_uniform(30, 4, 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        let p = kmeans_parse("x", &x, 1, 0).unwrap();
        assert!(p.starts.is_empty());
    }

    #[test]
    fn k_bounds() {
        let x = Matrix::zeros(3, 2);
        assert!(matches!(kmeans(&x, 4, 0), Err(Error::Input(_))));
        assert!(matches!(kmeans(&x, 0, 0), Err(Error::Input(_))));
        // identical frames: every seed collapses to one label
        assert!(kmeans_parse("x", &x, 3, 0).unwrap().starts.is_empty());
    }

    #[test]
    fn beats_random_assignments() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut rows = Vec::new();
        for i in 0..60 {
            let c = if i % 3 == 0 { 2.0 } else { -2.0 };
            rows.push(vec![c + rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]);
        }
        let data: Vec<f64> = rows.concat();
        let x = Matrix::from_vec(60, 2, data).unwrap();
        let km = kmeans(&x, 2, 9).unwrap();
        let ss = within_cluster_ss(&x, &km.labels);
        for _ in 0..50 {
            let mut labels: Vec<usize> = (0..60).map(|_| rng.gen_range(0..2)).collect();
            labels[0] = 0;
            labels[1] = 1;
            assert!(ss <= within_cluster_ss(&x, &labels));
        }
    }

    #[test]
    fn boundaries_are_label_transitions() {
        let x = Matrix::random_uniform(40, 3, 1.0, &mut ChaCha8Rng::seed_from_u64(2));
        let km = kmeans(&x, 5, 3).unwrap();
        let p = kmeans_parse("x", &x, 5, 3).unwrap();
        assert_eq!(p.starts, transitions(&km.labels));
        assert_eq!(p.representatives, km.labels);
    }

    #[test]
    fn seeded_determinism() {
        let x = Matrix::random_uniform(50, 3, 1.0, &mut ChaCha8Rng::seed_from_u64(4));
        assert_eq!(kmeans(&x, 4, 8).unwrap(), kmeans(&x, 4, 8).unwrap());
    }
}
