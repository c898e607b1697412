//! Brute-force reference implementations of the metrics, written
//! independently of the production code and used as test oracles.

use std::collections::BTreeSet;

use super::NOISE;

/// Per-label `[tp, fp, fn]` from 2x2 confusion tables, plus macro and
/// micro F1 through precision and recall.
pub fn f1(predictions: &[BTreeSet<usize>], gold: &[BTreeSet<usize>], num_labels: usize) -> (Vec<[usize; 3]>, f64, f64) {
    let mut counts = vec![[0usize; 3]; num_labels];
    for (l, c) in counts.iter_mut().enumerate() {
        let mut m = [[0usize; 2]; 2];
        for (p, g) in predictions.iter().zip(gold) {
            m[usize::from(p.contains(&l))][usize::from(g.contains(&l))] += 1;
        }
        *c = [m[1][1], m[1][0], m[0][1]];
    }
    let score = |[tp, fp, fn_]: [usize; 3]| {
        let prec = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
        let rec = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
        if prec + rec == 0.0 {
            0.0
        } else {
            2.0 * prec * rec / (prec + rec)
        }
    };
    let macro_f1 = counts.iter().map(|&c| score(c)).sum::<f64>() / num_labels as f64;
    let pooled = counts.iter().fold([0; 3], |a, c| [a[0] + c[0], a[1] + c[1], a[2] + c[2]]);
    (counts, macro_f1, score(pooled))
}

/// DBSCAN from an all-pairs table: core points, core components by
/// union-find, components numbered by their smallest core index, border
/// points attached to the earliest adjacent component.
pub fn dbscan(points: &[Vec<f64>], eps: f64, min_pts: usize) -> Vec<i64> {
    let n = points.len();
    let close = |i: usize, j: usize| {
        let d: f64 = points[i].iter().zip(&points[j]).map(|(a, b)| (a - b).powi(2)).sum();
        d <= eps * eps
    };
    let core: Vec<bool> = (0..n).map(|i| (0..n).filter(|&j| close(i, j)).count() >= min_pts).collect();
    fn find(p: &mut [usize], x: usize) -> usize {
        let mut r = x;
        while p[r] != r {
            r = p[r];
        }
        p[x] = r;
        r
    }
    let mut parent: Vec<usize> = (0..n).collect();
    for i in 0..n {
        for j in 0..i {
            if core[i] && core[j] && close(i, j) {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                parent[a.max(b)] = a.min(b);
            }
        }
    }
    // Union by smaller index makes every root its component's first member.
    let roots: Vec<Option<usize>> = (0..n).map(|i| core[i].then(|| find(&mut parent, i))).collect();
    let mut order: Vec<usize> = roots.iter().flatten().copied().collect();
    order.sort_unstable();
    order.dedup();
    let id_of = |root: usize| order.binary_search(&root).unwrap() as i64;
    (0..n)
        .map(|i| match roots[i] {
            Some(r) => id_of(r),
            None => (0..n)
                .filter(|&j| core[j] && close(i, j))
                .map(|j| id_of(roots[j].unwrap()))
                .min()
                .unwrap_or(NOISE),
        })
        .collect()
}

/// Homogeneity and completeness through mutual information:
/// `h = I / H(class)`, `c = I / H(cluster)`, noise points as singletons.
pub fn homogeneity_completeness(assignments: &[i64], gold: &[usize]) -> (f64, f64) {
    let n = gold.len();
    let nf = n as f64;
    let ids: Vec<i64> = assignments
        .iter()
        .enumerate()
        .map(|(i, &a)| if a == NOISE { -1 - i as i64 } else { a })
        .collect();
    let ks: BTreeSet<i64> = ids.iter().copied().collect();
    let cs: BTreeSet<usize> = gold.iter().copied().collect();
    let count_k = |k: i64| ids.iter().filter(|&&x| x == k).count() as f64;
    let count_c = |c: usize| gold.iter().filter(|&&x| x == c).count() as f64;
    let (mut mi, mut hk, mut hc) = (0.0, 0.0, 0.0);
    for &k in &ks {
        let nk = count_k(k);
        hk -= nk / nf * (nk / nf).ln();
        for &c in &cs {
            let nkc = (0..n).filter(|&i| ids[i] == k && gold[i] == c).count() as f64;
            if nkc > 0.0 {
                mi += nkc / nf * (nf * nkc / (nk * count_c(c))).ln();
            }
        }
    }
    for &c in &cs {
        let nc = count_c(c);
        hc -= nc / nf * (nc / nf).ln();
    }
    let ratio = |den: f64| if den == 0.0 { 1.0 } else { (mi / den).clamp(0.0, 1.0) };
    (ratio(hc), ratio(hk))
}
