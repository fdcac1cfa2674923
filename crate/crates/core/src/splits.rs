//! Train/test splits over user embeddings: a cluster-proportional random
//! split and an out-of-distribution split that holds out small, isolated
//! clusters.

use std::ops::RangeInclusive;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MAX_ITERS: usize = 100;
const TOL: f64 = 1e-6;

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    sq_dist(a, b).sqrt()
}

fn check_points(points: &[Vec<f64>]) -> Result<usize> {
    let d = points.first().map(Vec::len).ok_or(Error::EmptyInput)?;
    for p in points {
        if p.len() != d {
            return Err(Error::Dimension {
                what: "embedding",
                expected: d,
                found: p.len(),
            });
        }
        if !p.iter().all(|x| x.is_finite()) {
            return Err(Error::Invalid("non-finite embedding".into()));
        }
    }
    Ok(d)
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    /// Sum of squared distances to the assigned centroid after each
    /// assignment pass.
    pub objective: Vec<f64>,
}

fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = sq_dist(p, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// k-means++ seeding followed by Lloyd iterations until no centroid moves
/// more than 1e-6 or 100 iterations. A cluster that empties keeps its
/// previous centroid.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64) -> Result<KMeans> {
    let d = check_points(points)?;
    let n = points.len();
    if k == 0 || k > n {
        return Err(Error::Config(format!("k = {k} must lie in 1..={n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = vec![points[rng.random_range(0..n)].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let idx = if total > 0.0 {
            let mut x = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 && x < w {
                    pick = i;
                    break;
                }
                x -= w;
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        centroids.push(points[idx].clone());
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, &centroids[centroids.len() - 1]));
        }
    }
    let mut assignments = vec![0; n];
    let mut objective = Vec::new();
    for _ in 0..MAX_ITERS {
        let mut obj = 0.0;
        for (i, p) in points.iter().enumerate() {
            let (j, dd) = nearest(p, &centroids);
            assignments[i] = j;
            obj += dd;
        }
        objective.push(obj);
        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assignments) {
            counts[a] += 1;
            sums[a].iter_mut().zip(p).for_each(|(s, x)| *s += x);
        }
        let mut moved: f64 = 0.0;
        for j in 0..k {
            if counts[j] == 0 {
                continue;
            }
            let c: Vec<f64> = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            moved = moved.max(dist(&c, &centroids[j]));
            centroids[j] = c;
        }
        if moved < TOL {
            break;
        }
    }
    let mut obj = 0.0;
    for (i, p) in points.iter().enumerate() {
        let (j, dd) = nearest(p, &centroids);
        assignments[i] = j;
        obj += dd;
    }
    objective.push(obj);
    Ok(KMeans {
        assignments,
        centroids,
        objective,
    })
}

/// Mean silhouette. Members of singleton clusters score 0; fewer than
/// two non-empty clusters is an error.
pub fn silhouette(points: &[Vec<f64>], assignments: &[usize]) -> Result<f64> {
    check_points(points)?;
    if assignments.len() != points.len() {
        return Err(Error::Dimension {
            what: "assignments",
            expected: points.len(),
            found: assignments.len(),
        });
    }
    let k = assignments.iter().max().map_or(0, |m| m + 1);
    let mut sizes = vec![0usize; k];
    for &a in assignments {
        sizes[a] += 1;
    }
    if sizes.iter().filter(|&&s| s > 0).count() < 2 {
        return Err(Error::Degenerate("silhouette needs at least two non-empty clusters".into()));
    }
    let mut total = 0.0;
    for (i, p) in points.iter().enumerate() {
        let own = assignments[i];
        if sizes[own] == 1 {
            continue;
        }
        let mut sums = vec![0.0; k];
        for (j, q) in points.iter().enumerate() {
            if i != j {
                sums[assignments[j]] += dist(p, q);
            }
        }
        let a = sums[own] / (sizes[own] - 1) as f64;
        let b = (0..k)
            .filter(|&c| c != own && sizes[c] > 0)
            .map(|c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        if m > 0.0 {
            total += (b - a) / m;
        }
    }
    Ok(total / points.len() as f64)
}

/// `2..=min(10, n−1)`.
pub fn default_k_range(n: usize) -> RangeInclusive<usize> {
    2..=10.min(n.saturating_sub(1))
}

/// The `K` with the highest mean silhouette; ties go to the smallest.
pub fn silhouette_search(points: &[Vec<f64>], range: RangeInclusive<usize>, seed: u64) -> Result<usize> {
    check_points(points)?;
    let n = points.len();
    if range.is_empty() || *range.start() < 2 || *range.end() > n.saturating_sub(1) {
        return Err(Error::Config(format!(
            "K range {}..={} must lie within 2..={}",
            range.start(),
            range.end(),
            n.saturating_sub(1)
        )));
    }
    if points.iter().all(|p| p == &points[0]) {
        return Err(Error::Degenerate("all embeddings are identical".into()));
    }
    let mut best = (*range.start(), f64::NEG_INFINITY);
    for k in range {
        let km = kmeans(points, k, seed)?;
        let s = match silhouette(points, &km.assignments) {
            Ok(s) => s,
            Err(Error::Degenerate(_)) => continue,
            Err(e) => return Err(e),
        };
        if s > best.1 {
            best = (k, s);
        }
    }
    if best.1 == f64::NEG_INFINITY {
        return Err(Error::Degenerate("no K in range yields two non-empty clusters".into()));
    }
    Ok(best.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    Random,
    Ood,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterDiagnostics {
    pub cluster: usize,
    pub size: usize,
    /// Mean distance of members to their centroid.
    pub compactness: f64,
    /// Mean distance from this centroid to the others.
    pub isolation: f64,
    /// `isolation / (1 + size)`.
    pub score: f64,
    pub n_test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitResult {
    pub mode: SplitMode,
    pub k: usize,
    pub train_ids: Vec<String>,
    pub test_ids: Vec<String>,
    /// Members of a partially held-out cluster kept out of both sets.
    pub quarantined_ids: Vec<String>,
    /// The remainder was kept in train because quarantining it would have
    /// left no training users.
    pub quarantine_waived: bool,
    pub diagnostics: Vec<ClusterDiagnostics>,
}

fn diagnostics(points: &[Vec<f64>], km: &KMeans) -> Vec<ClusterDiagnostics> {
    let k = km.centroids.len();
    (0..k)
        .map(|c| {
            let members: Vec<usize> = (0..points.len()).filter(|&i| km.assignments[i] == c).collect();
            let compactness = if members.is_empty() {
                0.0
            } else {
                members.iter().map(|&i| dist(&points[i], &km.centroids[c])).sum::<f64>() / members.len() as f64
            };
            let isolation = if k < 2 {
                0.0
            } else {
                (0..k)
                    .filter(|&o| o != c)
                    .map(|o| dist(&km.centroids[c], &km.centroids[o]))
                    .sum::<f64>()
                    / (k - 1) as f64
            };
            ClusterDiagnostics {
                cluster: c,
                size: members.len(),
                compactness,
                isolation,
                score: isolation / (1 + members.len()) as f64,
                n_test: 0,
            }
        })
        .collect()
}

fn check_split_args(ids: &[String], points: &[Vec<f64>], n_test: usize) -> Result<()> {
    if ids.len() != points.len() {
        return Err(Error::Dimension {
            what: "user ids",
            expected: points.len(),
            found: ids.len(),
        });
    }
    if n_test == 0 || n_test >= ids.len() {
        return Err(Error::Config(format!("n_test must lie in 1..{}", ids.len())));
    }
    Ok(())
}

fn collect(ids: &[String], flags: &[u8], want: u8) -> Vec<String> {
    ids.iter().zip(flags).filter(|(_, &f)| f == want).map(|(i, _)| i.clone()).collect()
}

const TRAIN: u8 = 0;
const TEST: u8 = 1;
const QUARANTINE: u8 = 2;

/// Holds out whole clusters in descending `isolation / (1 + size)` order.
/// The first cluster that does not fit contributes its members farthest
/// from the centroid; its other members are quarantined unless
/// `permissive` or unless train would be left empty.
pub fn ood_split(
    ids: &[String],
    points: &[Vec<f64>],
    n_test: usize,
    k_range: Option<RangeInclusive<usize>>,
    seed: u64,
    permissive: bool,
) -> Result<SplitResult> {
    check_split_args(ids, points, n_test)?;
    let n = ids.len();
    let range = k_range.unwrap_or_else(|| default_k_range(n));
    let k = silhouette_search(points, range, seed)?;
    let km = kmeans(points, k, seed)?;
    let mut diag = diagnostics(points, &km);
    let mut order: Vec<usize> = (0..k).filter(|&c| diag[c].size > 0).collect();
    order.sort_by(|&a, &b| diag[b].score.total_cmp(&diag[a].score).then(a.cmp(&b)));
    let mut flags = vec![TRAIN; n];
    let mut remaining = n_test;
    let mut waived = false;
    for c in order {
        if remaining == 0 {
            break;
        }
        let mut members: Vec<usize> = (0..n).filter(|&i| km.assignments[i] == c).collect();
        if members.len() <= remaining {
            for &i in &members {
                flags[i] = TEST;
            }
            remaining -= members.len();
            diag[c].n_test = members.len();
            continue;
        }
        members.sort_by(|&a, &b| {
            let da = dist(&points[a], &km.centroids[c]);
            let db = dist(&points[b], &km.centroids[c]);
            db.total_cmp(&da).then(a.cmp(&b))
        });
        for &i in &members[..remaining] {
            flags[i] = TEST;
        }
        diag[c].n_test = remaining;
        let rest = &members[remaining..];
        let train_left = flags.iter().filter(|&&f| f == TRAIN).count() - rest.len();
        if !permissive {
            if train_left == 0 {
                waived = true;
            } else {
                for &i in rest {
                    flags[i] = QUARANTINE;
                }
            }
        }
        break;
    }
    Ok(SplitResult {
        mode: SplitMode::Ood,
        k,
        train_ids: collect(ids, &flags, TRAIN),
        test_ids: collect(ids, &flags, TEST),
        quarantined_ids: collect(ids, &flags, QUARANTINE),
        quarantine_waived: waived,
        diagnostics: diag,
    })
}

/// `clamp(n / 50, 2, 20)`, never more than `n`.
pub fn random_split_k(n: usize) -> usize {
    (n / 50).clamp(2, 20).min(n)
}

/// Largest-remainder quotas proportional to `sizes`, summing to `total`
/// and capped by each size; ties go to the lower index.
pub fn proportional_quotas(sizes: &[usize], total: usize) -> Vec<usize> {
    let n: usize = sizes.iter().sum();
    let mut quotas: Vec<usize> = sizes.iter().map(|&s| s * total / n.max(1)).collect();
    let mut rems: Vec<(usize, usize)> = sizes
        .iter()
        .enumerate()
        .map(|(i, &s)| (i, s * total % n.max(1)))
        .collect();
    rems.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut left = total - quotas.iter().sum::<usize>();
    for &(i, _) in &rems {
        if left == 0 {
            break;
        }
        if quotas[i] < sizes[i] {
            quotas[i] += 1;
            left -= 1;
        }
    }
    while left > 0 {
        let mut progressed = false;
        for &(i, _) in &rems {
            if left > 0 && quotas[i] < sizes[i] {
                quotas[i] += 1;
                left -= 1;
                progressed = true;
            }
        }
        if !progressed {
            break;
        }
    }
    quotas
}

/// Samples each cluster in proportion to its share of the population.
pub fn random_split(ids: &[String], points: &[Vec<f64>], n_test: usize, seed: u64) -> Result<SplitResult> {
    check_split_args(ids, points, n_test)?;
    let n = ids.len();
    let k = random_split_k(n);
    let km = kmeans(points, k, seed)?;
    let mut diag = diagnostics(points, &km);
    let sizes: Vec<usize> = diag.iter().map(|d| d.size).collect();
    let quotas = proportional_quotas(&sizes, n_test);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut flags = vec![TRAIN; n];
    for c in 0..k {
        let mut members: Vec<usize> = (0..n).filter(|&i| km.assignments[i] == c).collect();
        members.shuffle(&mut rng);
        for &i in &members[..quotas[c]] {
            flags[i] = TEST;
        }
        diag[c].n_test = quotas[c];
    }
    Ok(SplitResult {
        mode: SplitMode::Random,
        k,
        train_ids: collect(ids, &flags, TRAIN),
        test_ids: collect(ids, &flags, TEST),
        quarantined_ids: Vec::new(),
        quarantine_waived: false,
        diagnostics: diag,
    })
}

/// Mean over test users of the distance to the nearest train user.
pub fn nearest_train_distance(split: &SplitResult, ids: &[String], points: &[Vec<f64>]) -> f64 {
    let index = |set: &[String]| -> Vec<usize> {
        set.iter()
            .filter_map(|id| ids.iter().position(|x| x == id))
            .collect()
    };
    let train = index(&split.train_ids);
    let test = index(&split.test_ids);
    if train.is_empty() || test.is_empty() {
        return 0.0;
    }
    test.iter()
        .map(|&t| {
            train
                .iter()
                .map(|&r| dist(&points[t], &points[r]))
                .fold(f64::INFINITY, f64::min)
        })
        .sum::<f64>()
        / test.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blobs(sizes: &[usize], spread: f64, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pts = Vec::new();
        for (c, &s) in sizes.iter().enumerate() {
            for _ in 0..s {
                let mut p = vec![0.0; 3];
                p[c % 3] = 1.0 + c as f64 / 3.0;
                for x in &mut p {
                    *x += spread * (rng.random::<f64>() - 0.5);
                }
                pts.push(p);
            }
        }
        pts
    }

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("u{i:03}")).collect()
    }

    #[test]
    fn two_far_groups_separate() {
        let pts = blobs(&[10, 10], 0.05, 1);
        let km = kmeans(&pts, 2, 3).unwrap();
        assert!(km.assignments[..10].iter().all(|&a| a == km.assignments[0]));
        assert!(km.assignments[10..].iter().all(|&a| a != km.assignments[0]));
        assert!(km.objective.windows(2).all(|w| w[1] <= w[0] + 1e-12));
    }

    #[test]
    fn one_cluster_centroid_is_mean() {
        let pts = vec![vec![0.0, 0.0], vec![2.0, 0.0], vec![1.0, 3.0]];
        let km = kmeans(&pts, 1, 0).unwrap();
        assert_eq!(km.centroids[0], vec![1.0, 1.0]);
        assert!(kmeans(&pts, 4, 0).is_err());
    }

    #[test]
    fn silhouette_search_finds_three_blobs() {
        let pts = blobs(&[12, 12, 12], 0.1, 2);
        assert_eq!(silhouette_search(&pts, 2..=6, 0).unwrap(), 3);
        assert_eq!(silhouette_search(&pts, 4..=4, 0).unwrap(), 4);
        let same = vec![vec![1.0, 0.0]; 5];
        assert!(matches!(silhouette_search(&same, 2..=3, 0), Err(Error::Degenerate(_))));
    }

    #[test]
    fn outlier_blob_is_the_ood_test_set() {
        let mut pts = blobs(&[95], 0.2, 3);
        for i in 0..5 {
            pts.push(vec![-3.0, 4.0 + 0.01 * i as f64, 0.0]);
        }
        let s = ood_split(&ids(100), &pts, 5, Some(2..=4), 0, false).unwrap();
        assert_eq!(s.test_ids, ids(100)[95..].to_vec());
        assert!(s.quarantined_ids.is_empty());
    }

    #[test]
    fn ood_boundary_keeps_one_train_user() {
        let pts = blobs(&[6, 6], 0.1, 4);
        let s = ood_split(&ids(12), &pts, 11, None, 0, false).unwrap();
        assert_eq!(s.train_ids.len(), 1);
        assert_eq!(s.test_ids.len(), 11);
        assert!(s.quarantine_waived);
    }

    #[test]
    fn partial_cluster_remainder_is_quarantined() {
        let pts = blobs(&[10, 10, 10], 0.1, 5);
        let s = ood_split(&ids(30), &pts, 4, Some(3..=3), 0, false).unwrap();
        assert_eq!(s.test_ids.len(), 4);
        assert_eq!(s.quarantined_ids.len(), 6);
        let p = ood_split(&ids(30), &pts, 4, Some(3..=3), 0, true).unwrap();
        assert!(p.quarantined_ids.is_empty());
        assert_eq!(p.train_ids.len(), 26);
    }

    #[test]
    fn quotas_are_proportional_and_exact() {
        assert_eq!(proportional_quotas(&[80, 20], 10), vec![8, 2]);
        assert_eq!(proportional_quotas(&[1, 1, 1], 2), vec![1, 1, 0]);
        assert_eq!(proportional_quotas(&[1, 9], 3).iter().sum::<usize>(), 3);
        let pts = blobs(&[30, 30, 40], 0.2, 6);
        let s = random_split(&ids(100), &pts, 17, 1).unwrap();
        assert_eq!(s.test_ids.len(), 17);
        assert_eq!(s, random_split(&ids(100), &pts, 17, 1).unwrap());
    }
}
