//! Lloyd's algorithm with k-means++ seeding and best-of-restarts selection.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::rng::{derive, Stream};
use crate::tensor::Tensor;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = x - y;
            d * d
        })
        .sum()
}

/// k-means++ seeding: first centroid uniform, the rest proportional to the
/// squared distance from the nearest chosen centroid.
fn seed_centroids(points: &Tensor, k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = points.rows();
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(k);
    centroids.push(points.row(rng.gen_range(0..n)).to_vec());
    let mut d2: Vec<f64> = (0..n)
        .map(|i| sq_dist(points.row(i), &centroids[0]))
        .collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total <= 0.0 {
            // All points coincide with chosen centroids; any pick works.
            rng.gen_range(0..n)
        } else {
            let mut dart = rng.gen::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                dart -= w;
                if dart <= 0.0 {
                    pick = i;
                    break;
                }
            }
            pick
        };
        let c = points.row(next).to_vec();
        for i in 0..n {
            let d = sq_dist(points.row(i), &c);
            if d < d2[i] {
                d2[i] = d;
            }
        }
        centroids.push(c);
    }
    centroids
}

fn assign(points: &Tensor, centroids: &[Vec<f64>]) -> Vec<usize> {
    (0..points.rows())
        .map(|i| {
            let row = points.row(i);
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (c, centroid) in centroids.iter().enumerate() {
                let d = sq_dist(row, centroid);
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            best
        })
        .collect()
}

fn wcss(points: &Tensor, centroids: &[Vec<f64>], labels: &[usize]) -> f64 {
    labels
        .iter()
        .enumerate()
        .map(|(i, &l)| sq_dist(points.row(i), &centroids[l]))
        .sum()
}

fn lloyd(points: &Tensor, mut centroids: Vec<Vec<f64>>, iters: usize) -> (Vec<Vec<f64>>, f64) {
    let (n, d) = points.shape();
    let k = centroids.len();
    let mut labels = assign(points, &centroids);
    for _ in 0..iters {
        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for (i, &l) in labels.iter().enumerate() {
            counts[l] += 1;
            for (s, &x) in sums[l].iter_mut().zip(points.row(i)) {
                *s += x;
            }
        }
        for (c, (sum, &count)) in sums.iter().zip(counts.iter()).enumerate() {
            if count > 0 {
                for (dst, &s) in centroids[c].iter_mut().zip(sum.iter()) {
                    *dst = s / count as f64;
                }
            }
            // Empty clusters keep their previous centroid.
        }
        let new_labels = assign(points, &centroids);
        if new_labels == labels {
            break;
        }
        labels = new_labels;
    }
    let _ = n;
    let score = wcss(points, &centroids, &labels);
    (centroids, score)
}

/// K-means over the rows of `points`: k-means++ seeding, Lloyd iterations,
/// best of `restarts` runs by within-cluster sum of squares. Deterministic
/// given `seed`.
///
/// When there are fewer distinct points than `k`, the surplus centroids are
/// the farthest points duplicated with a small Gaussian perturbation
/// (sigma = 1e-4 x mean point norm) so every row of the result is distinct.
pub fn kmeans(points: &Tensor, k: usize, iters: usize, restarts: usize, seed: u64) -> Result<Tensor> {
    let (n, d) = points.shape();
    if n == 0 || k == 0 {
        return Err(Error::validation(
            "kmeans requires at least one point and one cluster".to_string(),
        ));
    }
    if !points.is_finite() {
        return Err(Error::numeric("non-finite input to kmeans".to_string()));
    }
    let mut rng = derive(seed, Stream::Kmeans(k as u64));

    let mut distinct: Vec<Vec<f64>> = Vec::new();
    for i in 0..n {
        let row = points.row(i);
        if !distinct.iter().any(|p| p == row) {
            distinct.push(row.to_vec());
        }
        if distinct.len() > k {
            break;
        }
    }

    let centroids = if distinct.len() < k {
        // Degenerate input: seed with every distinct point, then pad with
        // perturbed copies of the farthest points from the mean.
        let mean_norm = (0..n)
            .map(|i| points.row(i).iter().map(|x| x * x).sum::<f64>().sqrt())
            .sum::<f64>()
            / n as f64;
        let sigma = 1e-4 * mean_norm.max(1e-12);
        let mut mean = vec![0.0; d];
        for i in 0..n {
            for (m, &x) in mean.iter_mut().zip(points.row(i)) {
                *m += x / n as f64;
            }
        }
        let mut ranked: Vec<Vec<f64>> = distinct.clone();
        ranked.sort_by(|a, b| {
            sq_dist(b, &mean)
                .partial_cmp(&sq_dist(a, &mean))
                .expect("finite distances")
        });
        let mut centroids = distinct;
        let mut i = 0;
        while centroids.len() < k {
            let base = &ranked[i % ranked.len()];
            let noisy: Vec<f64> = base
                .iter()
                .map(|&x| x + sigma * gauss(&mut rng))
                .collect();
            centroids.push(noisy);
            i += 1;
        }
        centroids
    } else {
        let mut best: Option<(Vec<Vec<f64>>, f64)> = None;
        for _ in 0..restarts.max(1) {
            let seeds = seed_centroids(points, k, &mut rng);
            let (centroids, score) = lloyd(points, seeds, iters);
            if best.as_ref().map_or(true, |(_, s)| score < *s) {
                best = Some((centroids, score));
            }
        }
        best.expect("at least one restart").0
    };

    let mut out = Tensor::zeros(k, d);
    for (i, c) in centroids.iter().enumerate() {
        out.row_mut(i).copy_from_slice(c);
    }
    Ok(out)
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// WCSS of `points` against the nearest rows of `centroids`; exposed for
/// tests and diagnostics.
pub fn within_cluster_ss(points: &Tensor, centroids: &Tensor) -> f64 {
    let cents: Vec<Vec<f64>> = (0..centroids.rows())
        .map(|i| centroids.row(i).to_vec())
        .collect();
    let labels = assign(points, &cents);
    wcss(points, &cents, &labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn points_1d(xs: &[f64]) -> Tensor {
        Tensor::from_vec(xs.len(), 1, xs.to_vec())
    }

    #[test]
    fn two_clusters_on_a_line() {
        let pts = points_1d(&[0.0, 0.1, 10.0, 10.1]);
        let c = kmeans(&pts, 2, 50, 4, 7).unwrap();
        let mut got: Vec<f64> = c.data().to_vec();
        got.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!((got[0] - 0.05).abs() < 1e-9);
        assert!((got[1] - 10.05).abs() < 1e-9);
    }

    #[test]
    fn single_cluster_is_mean() {
        let pts = points_1d(&[1.0, 2.0, 6.0]);
        let c = kmeans(&pts, 1, 20, 2, 3).unwrap();
        assert!((c.get(0, 0) - 3.0).abs() < 1e-12);
    }

    #[test]
    fn k_equals_n_reaches_zero_wcss() {
        let pts = Tensor::from_vec(4, 2, vec![0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 5.0, 5.0]);
        let c = kmeans(&pts, 4, 50, 8, 5).unwrap();
        assert!(within_cluster_ss(&pts, &c) < 1e-18);
    }

    /// Exhaustive oracle: enumerate all 2^6 labelings of 6 points, compute
    /// the optimal WCSS, and require kmeans to reach it.
    #[test]
    fn matches_exhaustive_best_assignment() {
        let pts = Tensor::from_vec(
            6,
            2,
            vec![0.0, 0.2, 0.3, -0.1, -0.2, 0.1, 4.0, 4.2, 4.3, 3.9, 3.8, 4.1],
        );
        let mut best = f64::INFINITY;
        for mask in 0u32..(1 << 6) {
            let mut sums = [[0.0f64; 2]; 2];
            let mut counts = [0usize; 2];
            for i in 0..6 {
                let l = ((mask >> i) & 1) as usize;
                counts[l] += 1;
                sums[l][0] += pts.get(i, 0);
                sums[l][1] += pts.get(i, 1);
            }
            if counts.contains(&0) {
                continue;
            }
            let cents = [
                [sums[0][0] / counts[0] as f64, sums[0][1] / counts[0] as f64],
                [sums[1][0] / counts[1] as f64, sums[1][1] / counts[1] as f64],
            ];
            let mut w = 0.0;
            for i in 0..6 {
                let l = ((mask >> i) & 1) as usize;
                let dx = pts.get(i, 0) - cents[l][0];
                let dy = pts.get(i, 1) - cents[l][1];
                w += dx * dx + dy * dy;
            }
            if w < best {
                best = w;
            }
        }
        let c = kmeans(&pts, 2, 100, 8, 11).unwrap();
        let got = within_cluster_ss(&pts, &c);
        assert!(
            (got - best).abs() < 1e-9,
            "kmeans WCSS {got} vs exhaustive optimum {best}"
        );
    }

    #[test]
    fn wcss_non_increasing_over_iterations() {
        let pts = Tensor::from_vec(
            8,
            2,
            vec![
                0.0, 0.0, 1.0, 1.0, 0.5, 0.0, 3.0, 3.0, 3.5, 3.2, 0.2, 0.9, 2.9, 3.4, 1.1, 0.2,
            ],
        );
        let mut prev = f64::INFINITY;
        for iters in [0, 1, 2, 4, 8, 16] {
            let c = kmeans(&pts, 3, iters, 1, 13).unwrap();
            let w = within_cluster_ss(&pts, &c);
            assert!(w <= prev + 1e-12, "WCSS rose from {prev} to {w} at iters={iters}");
            prev = w;
        }
    }

    #[test]
    fn degenerate_fewer_distinct_points_than_k() {
        let pts = points_1d(&[1.0, 1.0, 1.0, 2.0]);
        let c = kmeans(&pts, 3, 10, 2, 17).unwrap();
        assert_eq!(c.rows(), 3);
        // all rows distinct
        for i in 0..3 {
            for j in (i + 1)..3 {
                assert_ne!(c.row(i), c.row(j));
            }
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let pts = Tensor::from_vec(
            6,
            2,
            vec![0.0, 0.2, 0.3, -0.1, -0.2, 0.1, 4.0, 4.2, 4.3, 3.9, 3.8, 4.1],
        );
        let a = kmeans(&pts, 2, 30, 4, 23).unwrap();
        let b = kmeans(&pts, 2, 30, 4, 23).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn non_finite_input_rejected() {
        let pts = points_1d(&[1.0, f64::NAN]);
        assert!(matches!(
            kmeans(&pts, 1, 5, 1, 0),
            Err(Error::Numeric(_))
        ));
    }
}
