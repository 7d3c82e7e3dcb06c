//! Lloyd k-means for offline target generation. Deterministic given a seed;
//! empty clusters are re-seeded from the point farthest from its centroid.

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Mat;

#[derive(Debug, Clone, PartialEq)]
pub struct KmeansModel {
    pub centroids: Mat, // k x dim
    pub iterations: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid per row; ties break to the lowest centroid index.
pub fn assign_targets(features: &Mat, centroids: &Mat) -> Result<Vec<usize>> {
    if features.cols() != centroids.cols() {
        return Err(Error::DimMismatch {
            expected: centroids.cols(),
            got: features.cols(),
            context: "feature dim vs centroid dim".into(),
        });
    }
    Ok((0..features.rows())
        .map(|r| {
            let row = features.row(r);
            let mut best = 0;
            let mut best_d = sq_dist(row, centroids.row(0));
            for c in 1..centroids.rows() {
                let d = sq_dist(row, centroids.row(c));
                if d < best_d {
                    best = c;
                    best_d = d;
                }
            }
            best
        })
        .collect())
}

/// Sum of squared distances to assigned centroids.
pub fn kmeans_objective(features: &Mat, centroids: &Mat, assignment: &[usize]) -> f64 {
    (0..features.rows())
        .map(|r| sq_dist(features.row(r), centroids.row(assignment[r])))
        .sum()
}

/// Standard Lloyd iteration to assignment stability or `max_iter`.
pub fn kmeans_fit(features: &Mat, k: usize, seed: u64) -> Result<KmeansModel> {
    kmeans_fit_with(features, k, seed, 100)
}

pub fn kmeans_fit_with(features: &Mat, k: usize, seed: u64, max_iter: usize) -> Result<KmeansModel> {
    let n = features.rows();
    if k == 0 {
        return Err(Error::InvalidConfig("k must be >= 1".into()));
    }
    if n < k {
        return Err(Error::Data(format!("{n} frames is fewer than k={k}")));
    }
    let d = features.cols();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut centroids = Mat::zeros(k, d);
    for (c, &idx) in order.iter().take(k).enumerate() {
        centroids.row_mut(c).copy_from_slice(features.row(idx));
    }

    let mut assignment = assign_targets(features, &centroids)?;
    let mut iterations = 0;
    for _ in 0..max_iter {
        iterations += 1;
        // update step
        let mut sums = Mat::zeros(k, d);
        let mut counts = vec![0usize; k];
        for (r, &a) in assignment.iter().enumerate() {
            counts[a] += 1;
            for (s, &v) in sums.row_mut(a).iter_mut().zip(features.row(r)) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for j in 0..d {
                    centroids.set(c, j, sums.at(c, j) / counts[c] as f64);
                }
            } else {
                // re-seed from the point farthest from its current centroid
                let far = (0..n)
                    .max_by(|&a, &b| {
                        let da = sq_dist(features.row(a), centroids.row(assignment[a]));
                        let db = sq_dist(features.row(b), centroids.row(assignment[b]));
                        da.partial_cmp(&db).unwrap_or(std::cmp::Ordering::Equal)
                    })
                    .expect("non-empty features");
                centroids.row_mut(c).copy_from_slice(features.row(far));
            }
        }
        let new_assignment = assign_targets(features, &centroids)?;
        let stable = new_assignment == assignment;
        assignment = new_assignment;
        if stable {
            break;
        }
    }
    Ok(KmeansModel {
        centroids,
        iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn col(points: &[f64]) -> Mat {
        Mat::col_vec(points.to_vec())
    }

    /// Brute force over all assignments of n points to k clusters.
    fn brute_force_best(features: &Mat, k: usize) -> (f64, Vec<usize>) {
        let n = features.rows();
        let total = k.pow(n as u32);
        let mut best = (f64::INFINITY, vec![0; n]);
        for code in 0..total {
            let mut assignment = vec![0usize; n];
            let mut c = code;
            for slot in assignment.iter_mut() {
                *slot = c % k;
                c /= k;
            }
            // centroids = means of assigned points; empty cluster -> skip
            let d = features.cols();
            let mut sums = Mat::zeros(k, d);
            let mut counts = vec![0usize; k];
            for (r, &a) in assignment.iter().enumerate() {
                counts[a] += 1;
                for (s, &v) in sums.row_mut(a).iter_mut().zip(features.row(r)) {
                    *s += v;
                }
            }
            if counts.iter().any(|&c| c == 0) {
                continue;
            }
            let mut centroids = Mat::zeros(k, d);
            for c in 0..k {
                for j in 0..d {
                    centroids.set(c, j, sums.at(c, j) / counts[c] as f64);
                }
            }
            let obj = kmeans_objective(features, &centroids, &assignment);
            if obj < best.0 {
                best = (obj, assignment);
            }
        }
        best
    }

    #[test]
    fn two_cluster_1d_matches_brute_force() {
        let features = col(&[0.0, 0.1, 10.0, 10.1]);
        let model = kmeans_fit(&features, 2, 7).unwrap();
        let mut got: Vec<f64> = (0..2).map(|c| model.centroids.at(c, 0)).collect();
        got.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!((got[0] - 0.05).abs() < 1e-12);
        assert!((got[1] - 10.05).abs() < 1e-12);

        let (best_obj, _) = brute_force_best(&features, 2);
        let assignment = assign_targets(&features, &model.centroids).unwrap();
        let obj = kmeans_objective(&features, &model.centroids, &assignment);
        assert!((obj - best_obj).abs() < 1e-12, "lloyd {obj} vs brute {best_obj}");
    }

    #[test]
    fn k_equals_n_gives_zero_objective() {
        let features = col(&[1.0, 5.0, 9.0]);
        let model = kmeans_fit(&features, 3, 1).unwrap();
        let assignment = assign_targets(&features, &model.centroids).unwrap();
        let obj = kmeans_objective(&features, &model.centroids, &assignment);
        assert_eq!(obj, 0.0);
        let mut sorted: Vec<f64> = (0..3).map(|c| model.centroids.at(c, 0)).collect();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(sorted, vec![1.0, 5.0, 9.0]);
    }

    #[test]
    fn fewer_points_than_k_errors() {
        let features = col(&[1.0, 2.0]);
        assert!(kmeans_fit(&features, 3, 0).is_err());
    }

    /// Duplicating every point must not move the optimal centroids.
    #[test]
    fn duplicated_dataset_preserves_centroids() {
        let features = col(&[0.0, 0.1, 10.0, 10.1]);
        let doubled = col(&[0.0, 0.1, 10.0, 10.1, 0.0, 0.1, 10.0, 10.1]);
        let a = kmeans_fit(&features, 2, 3).unwrap();
        let b = kmeans_fit(&doubled, 2, 3).unwrap();
        let mut ca: Vec<f64> = (0..2).map(|c| a.centroids.at(c, 0)).collect();
        let mut cb: Vec<f64> = (0..2).map(|c| b.centroids.at(c, 0)).collect();
        ca.sort_by(|x, y| x.partial_cmp(y).unwrap());
        cb.sort_by(|x, y| x.partial_cmp(y).unwrap());
        for (x, y) in ca.iter().zip(&cb) {
            assert!((x - y).abs() < 1e-12);
        }
        // objective equivalence: doubled objective = 2x original
        let aa = assign_targets(&features, &a.centroids).unwrap();
        let ba = assign_targets(&doubled, &b.centroids).unwrap();
        let oa = kmeans_objective(&features, &a.centroids, &aa);
        let ob = kmeans_objective(&doubled, &b.centroids, &ba);
        assert!((ob - 2.0 * oa).abs() < 1e-9);
    }

    #[test]
    fn assignment_matches_exhaustive_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let features = Mat::from_vec(
            50,
            4,
            (0..200).map(|_| rng.random_range(-3.0..3.0)).collect(),
        );
        let model = kmeans_fit(&features, 5, 9).unwrap();
        let got = assign_targets(&features, &model.centroids).unwrap();
        for r in 0..features.rows() {
            let mut best = (0usize, f64::INFINITY);
            for c in 0..5 {
                let d = sq_dist(features.row(r), model.centroids.row(c));
                if d < best.1 {
                    best = (c, d);
                }
            }
            assert_eq!(got[r], best.0);
        }
    }

    #[test]
    fn frame_equal_to_centroid_and_tie_break() {
        let centroids = Mat::from_rows(&[
            vec![0.0, 0.0],
            vec![1.0, 0.0],
            vec![2.0, 0.0],
            vec![3.0, 0.0],
        ]);
        // frame exactly on centroid 2
        let f = Mat::from_rows(&[vec![2.0, 0.0]]);
        assert_eq!(assign_targets(&f, &centroids).unwrap(), vec![2]);
        // equidistant between centroids 1 and 3 -> lowest index wins
        let spread = Mat::from_rows(&[
            vec![10.0, 10.0],
            vec![0.0, 0.0],
            vec![10.0, -10.0],
            vec![2.0, 0.0],
        ]);
        let eq = Mat::from_rows(&[vec![1.0, 5.0]]);
        let d1 = sq_dist(eq.row(0), spread.row(1));
        let d3 = sq_dist(eq.row(0), spread.row(3));
        assert_eq!(d1, d3, "fixture must be equidistant");
        assert!(sq_dist(eq.row(0), spread.row(0)) > d1);
        assert!(sq_dist(eq.row(0), spread.row(2)) > d1);
        assert_eq!(assign_targets(&eq, &spread).unwrap(), vec![1]);
    }

    /// Lloyd objective is non-increasing across iterations (tracked by
    /// re-running with increasing iteration caps).
    #[test]
    fn objective_monotone_nonincreasing() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for trial in 0..20 {
            let n = rng.random_range(8..40);
            let features = Mat::from_vec(
                n,
                2,
                (0..n * 2).map(|_| rng.random_range(-5.0..5.0)).collect(),
            );
            let k = rng.random_range(2..5).min(n);
            let mut prev = f64::INFINITY;
            for cap in 1..=8 {
                let model = kmeans_fit_with(&features, k, trial, cap).unwrap();
                let assignment = assign_targets(&features, &model.centroids).unwrap();
                let obj = kmeans_objective(&features, &model.centroids, &assignment);
                assert!(
                    obj <= prev + 1e-9,
                    "objective rose from {prev} to {obj} (trial {trial}, cap {cap})"
                );
                prev = obj;
            }
        }
    }
}
