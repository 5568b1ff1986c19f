//! Lloyd's k-means with k-means++ seeding.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::matrix::FeatureMatrix;

pub const DEFAULT_MAX_ITERS: usize = 50;
pub const DEFAULT_TOL: f32 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansResult {
    /// `k × dim`.
    pub centroids: FeatureMatrix,
    /// Index of the nearest centroid for every point (ties go to the lower
    /// centroid index).
    pub assignments: Vec<usize>,
    /// Sum of squared Euclidean distances from points to their centroids.
    pub inertia: f32,
    pub iterations: usize,
}

impl KMeansResult {
    pub fn k(&self) -> usize {
        self.centroids.rows()
    }
}

#[inline]
fn sq_dist(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f32], centroids: &FeatureMatrix) -> (usize, f32) {
    let mut best = (0, f32::INFINITY);
    for (j, c) in centroids.row_iter().enumerate() {
        let d = sq_dist(point, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn assign(points: &FeatureMatrix, centroids: &FeatureMatrix) -> (Vec<usize>, Vec<f32>) {
    points.row_iter().map(|p| nearest(p, centroids)).unzip()
}

fn plus_plus_init(points: &FeatureMatrix, k: usize, rng: &mut ChaCha8Rng) -> FeatureMatrix {
    let n = points.rows();
    let mut chosen = Vec::with_capacity(k);
    let mut taken = vec![false; n];
    let first = rng.random_range(0..n);
    chosen.push(first);
    taken[first] = true;
    let mut d2: Vec<f64> = points
        .row_iter()
        .map(|p| sq_dist(p, points.row(first)) as f64)
        .collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().zip(&taken).filter(|(_, &t)| !t).map(|(d, _)| d).sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = None;
            for (i, &d) in d2.iter().enumerate() {
                if taken[i] || d <= 0.0 {
                    continue;
                }
                pick = Some(i);
                if target < d {
                    break;
                }
                target -= d;
            }
            pick.expect("positive total weight implies a candidate")
        } else {
            // every remaining point coincides with a chosen center
            let free: Vec<usize> = (0..n).filter(|&i| !taken[i]).collect();
            free[rng.random_range(0..free.len())]
        };
        chosen.push(next);
        taken[next] = true;
        for (i, p) in points.row_iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, points.row(next)) as f64);
        }
    }
    points.select_rows(&chosen)
}

/// Clusters the rows of `points` into `k` groups.
///
/// Deterministic for a fixed `(points, k, seed)`. Iteration stops once no
/// centroid moves by `tol` or more (Euclidean), or after `max_iters` Lloyd
/// updates. A cluster left empty by an update is re-seeded at the point
/// farthest from its current centroid.
pub fn kmeans(
    points: &FeatureMatrix,
    k: usize,
    seed: u64,
    max_iters: usize,
    tol: f32,
) -> Result<KMeansResult> {
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    if k > points.rows() {
        return Err(Error::invalid(format!(
            "k = {k} exceeds the number of points ({})",
            points.rows()
        )));
    }
    if max_iters == 0 {
        return Err(Error::invalid("max_iters must be at least 1"));
    }
    let dim = points.cols();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = plus_plus_init(points, k, &mut rng);
    let mut iterations = 0;

    for _ in 0..max_iters {
        iterations += 1;
        let (assignments, dists) = assign(points, &centroids);

        let mut sums = vec![0.0f64; k * dim];
        let mut counts = vec![0usize; k];
        for (p, &j) in points.row_iter().zip(&assignments) {
            counts[j] += 1;
            for (s, &v) in sums[j * dim..(j + 1) * dim].iter_mut().zip(p) {
                *s += v as f64;
            }
        }

        let mut next = FeatureMatrix::zeros(k, dim);
        let mut reseeded = vec![false; points.rows()];
        for j in 0..k {
            if counts[j] > 0 {
                let inv = 1.0 / counts[j] as f64;
                for (dst, &s) in next.row_mut(j).iter_mut().zip(&sums[j * dim..(j + 1) * dim]) {
                    *dst = (s * inv) as f32;
                }
            } else {
                let mut far = None::<(usize, f32)>;
                for (i, &d) in dists.iter().enumerate() {
                    if reseeded[i] {
                        continue;
                    }
                    if far.map_or(true, |(_, best)| d > best) {
                        far = Some((i, d));
                    }
                }
                let (i, _) = far.expect("k <= n leaves a point to re-seed from");
                reseeded[i] = true;
                next.row_mut(j).copy_from_slice(points.row(i));
            }
        }

        let shift = centroids
            .row_iter()
            .zip(next.row_iter())
            .map(|(a, b)| sq_dist(a, b).sqrt())
            .fold(0.0f32, f32::max);
        centroids = next;
        if shift < tol {
            break;
        }
    }

    let (assignments, dists) = assign(points, &centroids);
    let inertia = dists.iter().map(|&d| d as f64).sum::<f64>() as f32;
    Ok(KMeansResult {
        centroids,
        assignments,
        inertia,
        iterations,
    })
}

/// Rows picked to stand in for each cluster.
#[derive(Clone, Debug, PartialEq)]
pub struct Representatives {
    pub k: FeatureMatrix,
    pub v: FeatureMatrix,
    /// Input row of every representative, ascending.
    pub rows: Vec<usize>,
}

/// For every centroid picks the member value row closest to it (ties go to
/// the lower row index) together with the key row at the same index.
///
/// `result` must come from clustering `points_v`. A centroid that ended up
/// with no members takes the closest row not already picked. Output rows are
/// ordered by input row index, so the selection does not depend on how the
/// clusters happen to be numbered.
pub fn select_representatives(
    points_v: &FeatureMatrix,
    points_k: &FeatureMatrix,
    result: &KMeansResult,
) -> Result<Representatives> {
    if points_v.rows() != points_k.rows() {
        return Err(Error::shape(format!(
            "{} value rows but {} key rows",
            points_v.rows(),
            points_k.rows()
        )));
    }
    if result.assignments.len() != points_v.rows() || result.centroids.cols() != points_v.cols() {
        return Err(Error::shape("clustering result does not match the value rows"));
    }
    let k = result.k();
    let mut best: Vec<Option<(usize, f32)>> = vec![None; k];
    for (i, (p, &j)) in points_v.row_iter().zip(&result.assignments).enumerate() {
        let d = sq_dist(p, result.centroids.row(j));
        if best[j].map_or(true, |(_, bd)| d < bd) {
            best[j] = Some((i, d));
        }
    }
    let mut taken = vec![false; points_v.rows()];
    for b in best.iter().flatten() {
        taken[b.0] = true;
    }
    let mut rows = Vec::with_capacity(k);
    for (j, b) in best.iter().enumerate() {
        let i = match b {
            Some((i, _)) => *i,
            None => {
                let c = result.centroids.row(j);
                let mut pick = None::<(usize, f32)>;
                for (i, p) in points_v.row_iter().enumerate() {
                    if taken[i] {
                        continue;
                    }
                    let d = sq_dist(p, c);
                    if pick.map_or(true, |(_, bd)| d < bd) {
                        pick = Some((i, d));
                    }
                }
                let (i, _) = pick.ok_or_else(|| Error::invalid("more clusters than rows"))?;
                taken[i] = true;
                i
            }
        };
        rows.push(i);
    }
    rows.sort_unstable();
    Ok(Representatives {
        k: points_k.select_rows(&rows),
        v: points_v.select_rows(&rows),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn points_1d(values: &[f32]) -> FeatureMatrix {
        FeatureMatrix::new(values.len(), 1, values.to_vec()).unwrap()
    }

    /// Minimum inertia over every 2-partition of a small 1-D point set.
    fn brute_force_two_clusters(values: &[f32]) -> (f64, Vec<bool>) {
        let n = values.len();
        let mut best = (f64::INFINITY, vec![]);
        for mask in 1..(1u32 << n) - 1 {
            let side: Vec<bool> = (0..n).map(|i| mask >> i & 1 == 1).collect();
            let mut cost = 0.0;
            for s in [false, true] {
                let members: Vec<f64> = (0..n).filter(|&i| side[i] == s).map(|i| values[i] as f64).collect();
                let mean = members.iter().sum::<f64>() / members.len() as f64;
                cost += members.iter().map(|v| (v - mean).powi(2)).sum::<f64>();
            }
            if cost < best.0 {
                best = (cost, side);
            }
        }
        best
    }

    #[test]
    fn two_obvious_clusters_match_brute_force() {
        let values = [0.0, 0.1, 10.0, 10.1];
        let (cost, side) = brute_force_two_clusters(&values);
        for seed in 0..20 {
            let r = kmeans(&points_1d(&values), 2, seed, 50, 1e-4).unwrap();
            assert_eq!(r.assignments[0], r.assignments[1]);
            assert_eq!(r.assignments[2], r.assignments[3]);
            assert_ne!(r.assignments[0], r.assignments[2]);
            assert_eq!(side[0], side[1]);
            assert!((r.inertia as f64 - cost).abs() < 1e-5);
        }
    }

    #[test]
    fn saturated_k_has_zero_inertia() {
        let pts = FeatureMatrix::from_fn(7, 3, |r, c| (r * 3 + c) as f32 * 0.37);
        let r = kmeans(&pts, 7, 1, 50, 1e-4).unwrap();
        assert_eq!(r.inertia, 0.0);
        let mut a = r.assignments.clone();
        a.sort_unstable();
        assert_eq!(a, (0..7).collect::<Vec<_>>());
    }

    #[test]
    fn identical_points() {
        let pts = FeatureMatrix::from_fn(5, 2, |_, _| 3.0);
        let r = kmeans(&pts, 2, 4, 50, 1e-4).unwrap();
        assert_eq!(r.inertia, 0.0);
        assert_eq!(r.k(), 2);
        let reps = select_representatives(&pts, &pts, &r).unwrap();
        assert_eq!(reps.rows.len(), 2);
        assert_ne!(reps.rows[0], reps.rows[1]);
    }

    #[test]
    fn bad_k() {
        let pts = points_1d(&[1.0, 2.0]);
        assert!(kmeans(&pts, 0, 0, 10, 1e-4).is_err());
        assert!(kmeans(&pts, 3, 0, 10, 1e-4).is_err());
        assert!(kmeans(&pts, 1, 0, 0, 1e-4).is_err());
    }

    #[test]
    fn deterministic_for_fixed_seed() {
        let pts = FeatureMatrix::from_fn(40, 2, |r, c| ((r * 7 + c * 13) % 11) as f32);
        assert_eq!(kmeans(&pts, 5, 3, 50, 1e-4).unwrap(), kmeans(&pts, 5, 3, 50, 1e-4).unwrap());
    }

    #[test]
    fn nearest_member_is_selected() {
        let v = points_1d(&[0.0, 1.0, 9.0]);
        let k = points_1d(&[-5.0, -6.0, -7.0]);
        let r = kmeans(&v, 1, 0, 50, 1e-6).unwrap();
        assert!((r.centroids.get(0, 0) - 10.0 / 3.0).abs() < 1e-6);
        let reps = select_representatives(&v, &k, &r).unwrap();
        assert_eq!(reps.rows, vec![1]);
        assert_eq!(reps.v.as_slice(), &[1.0]);
        assert_eq!(reps.k.as_slice(), &[-6.0]);
    }

    #[test]
    fn equidistant_tie_picks_lower_index() {
        // rows 1 and 2 are both at distance 2 from the centroid at 4
        let v = points_1d(&[9.0, 2.0, 6.0]);
        let result = KMeansResult {
            centroids: points_1d(&[4.0]),
            assignments: vec![0, 0, 0],
            inertia: 33.0,
            iterations: 1,
        };
        let reps = select_representatives(&v, &v, &result).unwrap();
        assert_eq!(reps.rows, vec![1]);
    }

    #[test]
    fn saturated_selection_is_identity() {
        let v = FeatureMatrix::from_fn(6, 2, |r, c| (r as f32).sin() + c as f32);
        let k = v.map(|x| x * 2.0);
        let r = kmeans(&v, 6, 9, 50, 1e-4).unwrap();
        let reps = select_representatives(&v, &k, &r).unwrap();
        assert_eq!(reps.rows, (0..6).collect::<Vec<_>>());
        assert_eq!(reps.v, v);
        assert_eq!(reps.k, k);
    }

    #[test]
    fn misaligned_shapes() {
        let v = points_1d(&[0.0, 1.0]);
        let k = points_1d(&[0.0]);
        let r = kmeans(&v, 1, 0, 5, 1e-4).unwrap();
        assert!(select_representatives(&v, &k, &r).is_err());
    }
}
