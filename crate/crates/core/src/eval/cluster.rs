use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NOISE: i64 = -1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterReport {
    /// Cluster id per point, [`NOISE`] for noise.
    pub assignments: Vec<i64>,
    pub homogeneity: f64,
    pub completeness: f64,
}

impl ClusterReport {
    pub fn num_clusters(&self) -> usize {
        self.assignments.iter().filter(|&&a| a != NOISE).max().map_or(0, |&m| m as usize + 1)
    }

    pub fn num_noise(&self) -> usize {
        self.assignments.iter().filter(|&&a| a == NOISE).count()
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// DBSCAN under the Euclidean metric. A point is core when at least
/// `min_pts` points (itself included) lie within `eps`. Clusters are
/// numbered in the order their first core point appears; a border point
/// joins the first cluster that reaches it.
pub fn dbscan(points: &[Vec<f64>], eps: f64, min_pts: usize) -> Vec<i64> {
    let n = points.len();
    let eps2 = eps * eps;
    let neighbors: Vec<Vec<usize>> = (0..n)
        .map(|i| (0..n).filter(|&j| sq_dist(&points[i], &points[j]) <= eps2).collect())
        .collect();
    let mut labels: Vec<Option<i64>> = vec![None; n];
    let mut next = 0;
    for i in 0..n {
        if labels[i].is_some() {
            continue;
        }
        if neighbors[i].len() < min_pts {
            labels[i] = Some(NOISE);
            continue;
        }
        let id = next;
        next += 1;
        labels[i] = Some(id);
        let mut queue: VecDeque<usize> = neighbors[i].iter().copied().collect();
        while let Some(j) = queue.pop_front() {
            match labels[j] {
                Some(NOISE) => labels[j] = Some(id),
                None => {
                    labels[j] = Some(id);
                    if neighbors[j].len() >= min_pts {
                        queue.extend(&neighbors[j]);
                    }
                }
                Some(_) => {}
            }
        }
    }
    labels.into_iter().map(|l| l.unwrap_or(NOISE)).collect()
}

fn entropy<'a>(counts: impl Iterator<Item = &'a usize>, n: f64) -> f64 {
    counts
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Homogeneity and completeness from conditional entropies. Each noise
/// point counts as its own cluster; `0/0` ratios count as perfect.
pub fn homogeneity_completeness(assignments: &[i64], gold: &[usize]) -> Result<(f64, f64)> {
    if assignments.len() != gold.len() {
        return Err(Error::InvalidArgument(format!(
            "{} assignments for {} gold labels",
            assignments.len(),
            gold.len()
        )));
    }
    if assignments.is_empty() {
        return Err(Error::InvalidArgument("clustering scores need at least one point".into()));
    }
    let n = gold.len() as f64;
    // Noise point i becomes cluster (-1 - i), distinct from real ids.
    let cluster = |i: usize| if assignments[i] == NOISE { -1 - i as i64 } else { assignments[i] };
    let mut joint: BTreeMap<(i64, usize), usize> = BTreeMap::new();
    let mut by_cluster: BTreeMap<i64, usize> = BTreeMap::new();
    let mut by_class: BTreeMap<usize, usize> = BTreeMap::new();
    for (i, &g) in gold.iter().enumerate() {
        *joint.entry((cluster(i), g)).or_default() += 1;
        *by_cluster.entry(cluster(i)).or_default() += 1;
        *by_class.entry(g).or_default() += 1;
    }
    let h_class = entropy(by_class.values(), n);
    let h_cluster = entropy(by_cluster.values(), n);
    let mut h_class_given_cluster = 0.0;
    let mut h_cluster_given_class = 0.0;
    for (&(k, c), &nkc) in &joint {
        let p = nkc as f64 / n;
        h_class_given_cluster -= p * (nkc as f64 / by_cluster[&k] as f64).ln();
        h_cluster_given_class -= p * (nkc as f64 / by_class[&c] as f64).ln();
    }
    let ratio = |num: f64, den: f64| if den == 0.0 { 1.0 } else { (1.0 - num / den).clamp(0.0, 1.0) };
    Ok((ratio(h_class_given_cluster, h_class), ratio(h_cluster_given_class, h_cluster)))
}

/// Runs [`dbscan`] and scores it against `gold`.
pub fn cluster_report(points: &[Vec<f64>], gold: &[usize], eps: f64, min_pts: usize) -> Result<ClusterReport> {
    if !(eps > 0.0) || min_pts == 0 {
        return Err(Error::InvalidArgument(format!("dbscan needs eps > 0 and min_pts >= 1, got {eps}, {min_pts}")));
    }
    let assignments = dbscan(points, eps, min_pts);
    let (homogeneity, completeness) = homogeneity_completeness(&assignments, gold)?;
    Ok(ClusterReport {
        assignments,
        homogeneity,
        completeness,
    })
}

/// Rescales every column to zero mean and unit variance. Constant columns
/// become zero.
pub fn standardize(points: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let Some(d) = points.first().map(Vec::len) else { return Vec::new() };
    let n = points.len() as f64;
    let mut mean = vec![0.0; d];
    for p in points {
        for (m, x) in mean.iter_mut().zip(p) {
            *m += x / n;
        }
    }
    let constant: Vec<bool> = (0..d).map(|c| points.iter().all(|p| p[c] == points[0][c])).collect();
    let mut sd = vec![0.0; d];
    for p in points {
        for ((s, x), m) in sd.iter_mut().zip(p).zip(&mean) {
            *s += (x - m) * (x - m) / n;
        }
    }
    points
        .iter()
        .map(|p| {
            p.iter()
                .zip(&mean)
                .zip(&sd)
                .enumerate()
                .map(|(c, ((x, m), s))| if constant[c] { 0.0 } else { (x - m) / s.sqrt() })
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::reference;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Three blobs plus uniform scatter.
    fn random_points(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
        let centers: Vec<Vec<f64>> = (0..3).map(|_| (0..d).map(|_| rng.gen_range(-5.0..5.0)).collect()).collect();
        (0..n)
            .map(|_| {
                if rng.gen_bool(0.2) {
                    (0..d).map(|_| rng.gen_range(-6.0..6.0)).collect()
                } else {
                    let c = &centers[rng.gen_range(0..3)];
                    c.iter().map(|x| x + rng.gen_range(-1.0..1.0)).collect()
                }
            })
            .collect()
    }

    #[test]
    fn separated_groups_form_two_clusters() {
        let mut pts: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64 * 0.1, 0.0]).collect();
        pts.extend((0..5).map(|i| vec![100.0 + i as f64 * 0.1, 0.0]));
        let a = dbscan(&pts, 0.5, 3);
        assert_eq!(a, [0, 0, 0, 0, 0, 1, 1, 1, 1, 1]);
    }

    #[test]
    fn isolated_points_are_noise() {
        let pts: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64 * 10.0]).collect();
        assert!(dbscan(&pts, 1.0, 2).iter().all(|&a| a == NOISE));
        assert_eq!(dbscan(&pts, 1.0, 1), [0, 1, 2, 3, 4, 5]);
    }

    #[test]
    fn border_point_joins_first_cluster() {
        // 0..3 dense at x=0, 4..7 dense at x=2, border point at x=1 reaches both.
        let mut pts: Vec<Vec<f64>> = (0..4).map(|i| vec![0.0, i as f64 * 0.01]).collect();
        pts.extend((0..4).map(|i| vec![2.0, i as f64 * 0.01]));
        pts.push(vec![1.0, 0.0]);
        let a = dbscan(&pts, 1.0, 4);
        assert_eq!(a, [0, 0, 0, 0, 1, 1, 1, 1, 0]);
        assert_eq!(a, reference::dbscan(&pts, 1.0, 4));
    }

    #[test]
    fn matches_brute_force_on_random_points() {
        for seed in 0..30 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pts = random_points(&mut rng, 100, 3);
            let eps = rng.gen_range(0.5..2.0);
            let min_pts = rng.gen_range(1..8);
            assert_eq!(dbscan(&pts, eps, min_pts), reference::dbscan(&pts, eps, min_pts), "seed {seed}");
        }
    }

    #[test]
    fn homogeneity_completeness_examples() {
        let gold = [0, 0, 1, 1, 2];
        assert_eq!(homogeneity_completeness(&[3, 3, 1, 1, 0], &gold).unwrap(), (1.0, 1.0));
        let (h, c) = homogeneity_completeness(&[0; 5], &gold).unwrap();
        assert_eq!((h, c), (0.0, 1.0));
        // All noise: singletons are perfectly homogeneous.
        let (h, _) = homogeneity_completeness(&[NOISE; 5], &gold).unwrap();
        assert_eq!(h, 1.0);
        // One class: 0/0 homogeneity convention.
        assert_eq!(homogeneity_completeness(&[0, 1], &[4, 4]).unwrap().0, 1.0);
        assert!(homogeneity_completeness(&[], &[]).is_err());
        assert!(homogeneity_completeness(&[0], &[0, 1]).is_err());
    }

    #[test]
    fn random_labelings_match_entropy_oracle() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let gold: Vec<usize> = (0..400).map(|i| i % 4).collect();
            let assign: Vec<i64> = (0..400).map(|_| rng.gen_range(-1..6)).collect();
            let (h, c) = homogeneity_completeness(&assign, &gold).unwrap();
            let (oh, oc) = reference::homogeneity_completeness(&assign, &gold);
            assert!((h - oh).abs() < 1e-9 && (c - oc).abs() < 1e-9, "{h} {oh} {c} {oc}");
        }
    }

    #[test]
    fn standardized_columns_have_unit_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pts: Vec<Vec<f64>> = (0..50).map(|_| vec![rng.gen_range(0.0..10.0), 3.0, rng.gen_range(-1.0..0.0)]).collect();
        let z = standardize(&pts);
        for c in [0, 2] {
            let m: f64 = z.iter().map(|p| p[c]).sum::<f64>() / 50.0;
            let v: f64 = z.iter().map(|p| (p[c] - m).powi(2)).sum::<f64>() / 50.0;
            assert!(m.abs() < 1e-12 && (v - 1.0).abs() < 1e-12);
        }
        assert!(z.iter().all(|p| p[1] == 0.0));
    }

    proptest! {
        #[test]
        fn shuffling_keeps_core_partition_and_noise(seed in any::<u64>(), eps in 0.5f64..2.0, min_pts in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pts = random_points(&mut rng, 60, 2);
            let mut perm: Vec<usize> = (0..pts.len()).collect();
            perm.shuffle(&mut rng);
            let shuffled: Vec<Vec<f64>> = perm.iter().map(|&i| pts[i].clone()).collect();
            let a = dbscan(&pts, eps, min_pts);
            let b = dbscan(&shuffled, eps, min_pts);
            let core = |i: usize| pts.iter().filter(|q| sq_dist(&pts[i], q) <= eps * eps).count() >= min_pts;
            for (pi, &i) in perm.iter().enumerate() {
                prop_assert_eq!(a[i] == NOISE, b[pi] == NOISE);
                for (pj, &j) in perm.iter().enumerate() {
                    if core(i) && core(j) {
                        prop_assert_eq!(a[i] == a[j], b[pi] == b[pj]);
                    }
                }
            }
        }

        #[test]
        fn scores_ignore_relabeling(seed in any::<u64>(), shift in 1i64..50) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let gold: Vec<usize> = (0..80).map(|_| rng.gen_range(0..4)).collect();
            let assign: Vec<i64> = (0..80).map(|_| rng.gen_range(-1..5)).collect();
            let relabeled: Vec<i64> = assign.iter().map(|&a| if a == NOISE { a } else { (a * 7 + shift) % 1000 }).collect();
            let regold: Vec<usize> = gold.iter().map(|&g| 3 - g + 10).collect();
            let base = homogeneity_completeness(&assign, &gold).unwrap();
            let moved = homogeneity_completeness(&relabeled, &regold).unwrap();
            prop_assert!((base.0 - moved.0).abs() < 1e-12 && (base.1 - moved.1).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&base.0) && (0.0..=1.0).contains(&base.1));
        }
    }
}
