//! Pseudo-label generation: k-means with k-means++ seeding, average-linkage
//! cosine AHC over centroids, and cluster-quality diagnostics.
//!
//! Everything here is deterministic given a seed; merge ties break on the
//! lowest (left id, right id) pair so the sequence is stable across
//! platforms and matches the naive recomputation oracle exactly.

use crate::error::{Error, Result};
use crate::seed;
use rand::prelude::*;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

/// How an assignment was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClusterMethod {
    Kmeans,
    KmeansAhc,
}

impl std::fmt::Display for ClusterMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ClusterMethod::Kmeans => write!(f, "kmeans"),
            ClusterMethod::KmeansAhc => write!(f, "kmeans+ahc"),
        }
    }
}

/// Utterances mapped to cluster indices in `0..num_clusters`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterAssignment {
    pub labels: BTreeMap<String, u32>,
    pub num_clusters: usize,
    pub method: ClusterMethod,
    pub inertia: Option<f64>,
}

impl ClusterAssignment {
    pub fn from_labels(
        ids: &[String],
        labels: &[usize],
        num_clusters: usize,
        method: ClusterMethod,
        inertia: Option<f64>,
    ) -> Result<Self> {
        if ids.len() != labels.len() {
            return Err(Error::validation("ids and labels length mismatch"));
        }
        let mut map = BTreeMap::new();
        for (id, &l) in ids.iter().zip(labels) {
            if l >= num_clusters {
                return Err(Error::validation(format!(
                    "label {l} out of range for {num_clusters} clusters"
                )));
            }
            if map.insert(id.clone(), l as u32).is_some() {
                return Err(Error::validation(format!("duplicate utterance id {id}")));
            }
        }
        Ok(ClusterAssignment {
            labels: map,
            num_clusters,
            method,
            inertia,
        })
    }

    /// Writes `utterance_id<TAB>cluster_index` rows.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for (id, l) in &self.labels {
            writeln!(out, "{id}\t{l}").expect("string write");
        }
        crate::binio::atomic_write(path, out.as_bytes())
    }

    pub fn load(path: &Path, method: ClusterMethod) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut labels = BTreeMap::new();
        let mut max_label = 0u32;
        for (idx, raw) in text.lines().enumerate() {
            if raw.is_empty() {
                continue;
            }
            let parse_err = |message: String| Error::Parse {
                path: path.to_path_buf(),
                line: idx + 1,
                message,
            };
            let (id, l) = raw
                .split_once('\t')
                .ok_or_else(|| parse_err("expected 2 tab-separated fields".into()))?;
            let l: u32 = l.parse().map_err(|e| parse_err(format!("bad label: {e}")))?;
            if labels.insert(id.to_string(), l).is_some() {
                return Err(parse_err(format!("duplicate utterance id {id}")));
            }
            max_label = max_label.max(l);
        }
        let num_clusters = if labels.is_empty() { 0 } else { max_label as usize + 1 };
        Ok(ClusterAssignment {
            labels,
            num_clusters,
            method,
            inertia: None,
        })
    }
}

/// One agglomerative merge step. `left < right` are node ids: leaves are
/// `0..n`, the cluster created by merge `i` gets id `n + i`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Merge {
    pub left: usize,
    pub right: usize,
    pub distance: f64,
}

/// Stepwise merge history. Merge distances are NOT guaranteed monotone
/// (average linkage on cosine distances can invert).
#[derive(Debug, Clone, PartialEq)]
pub struct Dendrogram {
    pub merges: Vec<Merge>,
    pub leaf_count: usize,
}

impl Dendrogram {
    /// Dumps `left<TAB>right<TAB>distance` rows for offline inspection.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for m in &self.merges {
            writeln!(out, "{}\t{}\t{}", m.left, m.right, m.distance).expect("string write");
        }
        crate::binio::atomic_write(path, out.as_bytes())
    }
}

/// Output of Lloyd's algorithm.
#[derive(Debug, Clone)]
pub struct KMeansResult {
    pub centroids: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub inertia: f64,
    /// Inertia recorded after every assignment step; non-increasing.
    pub inertia_history: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, c) in centroids.iter().enumerate() {
        let d = sq_dist(point, c);
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    (best, best_d)
}

/// k-means++ seeding: first centroid uniform, each next proportional to
/// the squared distance to the nearest chosen centroid.
fn kmeanspp_init<R: Rng>(vectors: &[Vec<f64>], k: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(k);
    let first = rng.random_range(0..vectors.len());
    centroids.push(vectors[first].clone());
    let mut d2: Vec<f64> = vectors.iter().map(|v| sq_dist(v, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random_range(0.0..total);
            let mut chosen = d2.len() - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        } else {
            // all remaining mass zero (duplicates); fall back to uniform
            rng.random_range(0..vectors.len())
        };
        centroids.push(vectors[pick].clone());
        for (i, v) in vectors.iter().enumerate() {
            let d = sq_dist(v, centroids.last().unwrap());
            if d < d2[i] {
                d2[i] = d;
            }
        }
    }
    centroids
}

/// Lloyd iterations from a k-means++ seed until the assignment reaches a
/// fixed point or `max_iters`. An empty cluster is re-seeded at the point
/// farthest from its assigned centroid.
pub fn kmeans(vectors: &[Vec<f64>], k: usize, seed_value: u64, max_iters: usize) -> Result<KMeansResult> {
    if k == 0 {
        return Err(Error::validation("k must be >= 1"));
    }
    if vectors.len() < k {
        return Err(Error::validation(format!(
            "need at least k={k} points, got {}",
            vectors.len()
        )));
    }
    let dim = vectors[0].len();
    if vectors.iter().any(|v| v.len() != dim) {
        return Err(Error::validation("ragged input vectors"));
    }
    let mut rng = seed::rng(seed_value, "kmeans", 0);
    let mut centroids = kmeanspp_init(vectors, k, &mut rng);
    let mut labels = vec![0usize; vectors.len()];
    let mut history = Vec::new();
    for _ in 0..max_iters.max(1) {
        // assignment
        let mut inertia = 0.0;
        let mut changed = false;
        for (i, v) in vectors.iter().enumerate() {
            let (c, d) = nearest(v, &centroids);
            if labels[i] != c {
                changed = true;
            }
            labels[i] = c;
            inertia += d;
        }
        history.push(inertia);
        if !changed && history.len() > 1 {
            break;
        }
        // update
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (v, &l) in vectors.iter().zip(&labels) {
            counts[l] += 1;
            for (s, x) in sums[l].iter_mut().zip(v) {
                *s += x;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for s in sums[c].iter_mut() {
                    *s /= counts[c] as f64;
                }
                centroids[c] = sums[c].clone();
            } else {
                // farthest point from its current centroid
                let far = (0..vectors.len())
                    .max_by(|&a, &b| {
                        let da = sq_dist(&vectors[a], &centroids[labels[a]]);
                        let db = sq_dist(&vectors[b], &centroids[labels[b]]);
                        da.total_cmp(&db)
                    })
                    .expect("nonempty input");
                centroids[c] = vectors[far].clone();
            }
        }
    }
    let inertia = *history.last().expect("at least one iteration");
    Ok(KMeansResult {
        centroids,
        labels,
        inertia,
        inertia_history: history,
    })
}

/// Best-of-`restarts` k-means by final inertia; each restart derives its
/// own seed.
pub fn kmeans_restarts(
    vectors: &[Vec<f64>],
    k: usize,
    seed_value: u64,
    max_iters: usize,
    restarts: usize,
) -> Result<KMeansResult> {
    let mut best: Option<KMeansResult> = None;
    for r in 0..restarts.max(1) {
        let result = kmeans(vectors, k, seed::derive(seed_value, "restart", r as u64), max_iters)?;
        if best.as_ref().is_none_or(|b| result.inertia < b.inertia) {
            best = Some(result);
        }
    }
    Ok(best.expect("at least one restart"))
}

fn normalize_rows(vectors: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    vectors
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(Error::validation(format!("zero vector at index {i}")));
            }
            Ok(v.iter().map(|x| x / norm).collect())
        })
        .collect()
}

/// Average-linkage AHC on cosine distance `1 - cos(a, b)`, merging until
/// `k_target` clusters remain. Cluster-to-cluster distances are maintained
/// with the Lance-Williams update for average linkage, which equals the
/// mean over cross pairs.
pub fn ahc_average_cosine(
    vectors: &[Vec<f64>],
    k_target: usize,
) -> Result<(Dendrogram, Vec<usize>)> {
    let n = vectors.len();
    if k_target == 0 || n < k_target {
        return Err(Error::validation(format!(
            "need n >= k_target >= 1, got n={n}, k_target={k_target}"
        )));
    }
    let unit = normalize_rows(vectors)?;

    // slot-level state; slot ids are node ids (leaves 0..n, merges n+step)
    let mut ids: Vec<usize> = (0..n).collect();
    let mut sizes: Vec<f64> = vec![1.0; n];
    let mut dist: Vec<Vec<f64>> = vec![vec![0.0; n]; n];
    for a in 0..n {
        for b in (a + 1)..n {
            let cos: f64 = unit[a].iter().zip(&unit[b]).map(|(x, y)| x * y).sum();
            let d = 1.0 - cos;
            dist[a][b] = d;
            dist[b][a] = d;
        }
    }
    let mut members: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
    let mut merges = Vec::with_capacity(n - k_target);

    while ids.len() > k_target {
        // minimum distance pair; ties break on lowest (left id, right id)
        let mut best: Option<(f64, usize, usize, usize, usize)> = None;
        for i in 0..ids.len() {
            for j in (i + 1)..ids.len() {
                let (lo, hi) = if ids[i] < ids[j] { (ids[i], ids[j]) } else { (ids[j], ids[i]) };
                let cand = (dist[i][j], lo, hi, i, j);
                let better = match &best {
                    None => true,
                    Some((d, l, h, _, _)) => {
                        (cand.0, cand.1, cand.2) < (*d, *l, *h)
                    }
                };
                if better {
                    best = Some(cand);
                }
            }
        }
        let (d, lo, hi, i, j) = best.expect("more than k_target clusters active");
        merges.push(Merge {
            left: lo,
            right: hi,
            distance: d,
        });
        // Lance-Williams for (unweighted-pair) average linkage:
        // D(A u B, C) = (|A| D(A,C) + |B| D(B,C)) / (|A| + |B|)
        let (si, sj) = (sizes[i], sizes[j]);
        for t in 0..ids.len() {
            if t == i || t == j {
                continue;
            }
            let updated = (si * dist[i][t] + sj * dist[j][t]) / (si + sj);
            dist[i][t] = updated;
            dist[t][i] = updated;
        }
        ids[i] = n + merges.len() - 1;
        sizes[i] = si + sj;
        let moved = members[j].clone();
        members[i].extend(moved);
        // drop slot j
        ids.remove(j);
        sizes.remove(j);
        members.remove(j);
        dist.remove(j);
        for row in dist.iter_mut() {
            row.remove(j);
        }
    }

    // final clusters ordered by id for deterministic label indices
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.sort_by_key(|&s| ids[s]);
    let mut labels = vec![0usize; n];
    for (cluster_idx, &slot) in order.iter().enumerate() {
        for &leaf in &members[slot] {
            labels[leaf] = cluster_idx;
        }
    }
    Ok((
        Dendrogram {
            merges,
            leaf_count: n,
        },
        labels,
    ))
}

/// Two-stage clustering: k-means to `k_coarse` centroids, AHC over the
/// centroids to `k_final`, labels inherited through the centroid. Also
/// returns the centroid-level dendrogram for inspection.
pub fn two_stage_cluster(
    ids: &[String],
    vectors: &[Vec<f64>],
    k_coarse: usize,
    k_final: usize,
    seed_value: u64,
) -> Result<(ClusterAssignment, Dendrogram)> {
    if k_final == 0 || k_coarse < k_final || vectors.len() < k_coarse {
        return Err(Error::validation(format!(
            "need n >= k_coarse >= k_final >= 1, got n={}, k_coarse={k_coarse}, k_final={k_final}",
            vectors.len()
        )));
    }
    let km = kmeans(vectors, k_coarse, seed_value, 100)?;
    let (dendrogram, coarse_labels) = ahc_average_cosine(&km.centroids, k_final)?;
    let labels: Vec<usize> = km.labels.iter().map(|&c| coarse_labels[c]).collect();
    let mut assignment =
        ClusterAssignment::from_labels(ids, &labels, k_final, ClusterMethod::KmeansAhc, Some(km.inertia))?;
    densify(&mut assignment);
    Ok((assignment, dendrogram))
}

/// Single-stage k-means labels.
pub fn kmeans_cluster(
    ids: &[String],
    vectors: &[Vec<f64>],
    k: usize,
    seed_value: u64,
) -> Result<ClusterAssignment> {
    let km = kmeans(vectors, k, seed_value, 100)?;
    let mut assignment =
        ClusterAssignment::from_labels(ids, &km.labels, k, ClusterMethod::Kmeans, Some(km.inertia))?;
    densify(&mut assignment);
    Ok(assignment)
}

/// Remaps cluster indices to a dense `0..K` range (drops empty indices),
/// preserving index order.
pub fn densify(assignment: &mut ClusterAssignment) {
    let mut used: Vec<u32> = assignment.labels.values().copied().collect();
    used.sort_unstable();
    used.dedup();
    let remap: BTreeMap<u32, u32> = used
        .iter()
        .enumerate()
        .map(|(new, &old)| (old, new as u32))
        .collect();
    for l in assignment.labels.values_mut() {
        *l = remap[l];
    }
    assignment.num_clusters = used.len();
}

/// Purity and normalized mutual information of an assignment against
/// reference labels. Diagnostics only; never feeds training.
pub fn cluster_metrics(
    assignment: &BTreeMap<String, u32>,
    reference: &BTreeMap<String, u32>,
) -> Result<(f64, f64)> {
    if assignment.len() != reference.len()
        || !assignment.keys().all(|k| reference.contains_key(k))
    {
        return Err(Error::validation("assignment/reference key sets differ"));
    }
    let n = assignment.len() as f64;
    if assignment.is_empty() {
        return Err(Error::validation("empty assignment"));
    }
    let mut joint: BTreeMap<(u32, u32), f64> = BTreeMap::new();
    let mut by_cluster: BTreeMap<u32, f64> = BTreeMap::new();
    let mut by_class: BTreeMap<u32, f64> = BTreeMap::new();
    for (id, &k) in assignment {
        let j = reference[id];
        *joint.entry((k, j)).or_default() += 1.0;
        *by_cluster.entry(k).or_default() += 1.0;
        *by_class.entry(j).or_default() += 1.0;
    }
    let purity: f64 = by_cluster
        .keys()
        .map(|&k| {
            joint
                .iter()
                .filter(|((ck, _), _)| *ck == k)
                .map(|(_, &c)| c)
                .fold(0.0, f64::max)
        })
        .sum::<f64>()
        / n;
    let entropy = |counts: &BTreeMap<u32, f64>| -> f64 {
        counts
            .values()
            .map(|&c| {
                let p = c / n;
                if p > 0.0 {
                    -p * p.ln()
                } else {
                    0.0
                }
            })
            .sum()
    };
    let hx = entropy(&by_cluster);
    let hy = entropy(&by_class);
    let mi: f64 = joint
        .iter()
        .map(|(&(k, j), &c)| {
            let pxy = c / n;
            let px = by_cluster[&k] / n;
            let py = by_class[&j] / n;
            pxy * (pxy / (px * py)).ln()
        })
        .sum();
    let nmi = if hx + hy == 0.0 {
        1.0 // both partitions trivial and identical
    } else {
        2.0 * mi / (hx + hy)
    };
    Ok((purity, nmi.clamp(0.0, 1.0)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn kmeans_two_points() {
        let pts = vec![vec![0.0, 0.0], vec![0.0, 1.0]];
        let r = kmeans(&pts, 2, 1, 50).unwrap();
        assert!(r.inertia.abs() < 1e-15);
        let mut cents = r.centroids.clone();
        cents.sort_by(|a, b| a[1].total_cmp(&b[1]));
        assert_eq!(cents, pts);

        let r1 = kmeans(&pts, 1, 1, 50).unwrap();
        assert_eq!(r1.centroids[0], vec![0.0, 0.5]);
        assert!((r1.inertia - 0.5).abs() < 1e-12);

        assert!(kmeans(&pts, 3, 1, 50).is_err());
    }

    #[test]
    fn kmeans_inertia_non_increasing_and_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pts: Vec<Vec<f64>> = (0..60)
            .map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let a = kmeans(&pts, 5, 9, 100).unwrap();
        let b = kmeans(&pts, 5, 9, 100).unwrap();
        assert_eq!(a.labels, b.labels);
        assert_eq!(a.centroids, b.centroids);
        for w in a.inertia_history.windows(2) {
            assert!(w[1] <= w[0] + 1e-9, "inertia increased: {:?}", w);
        }
    }

    #[test]
    fn ahc_first_merge_joins_closest_cosine_pair() {
        // brute-force cosine table says (v0, v1) are closest
        let v = vec![vec![1.0, 0.0], vec![0.9, 0.1], vec![0.0, 1.0]];
        let (dend, labels) = ahc_average_cosine(&v, 2).unwrap();
        assert_eq!(dend.merges.len(), 1);
        assert_eq!((dend.merges[0].left, dend.merges[0].right), (0, 1));
        assert_eq!(labels[0], labels[1]);
        assert_ne!(labels[0], labels[2]);
    }

    #[test]
    fn ahc_singletons_and_duplicates() {
        let v = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0]];
        let (dend, labels) = ahc_average_cosine(&v, 3).unwrap();
        assert!(dend.merges.is_empty());
        assert_eq!(labels, vec![0, 1, 2]);

        // duplicates merge first at distance ~0
        let v = vec![vec![0.0, 2.0], vec![1.0, 0.0], vec![0.0, 1.0]];
        let (dend, _) = ahc_average_cosine(&v, 2).unwrap();
        assert_eq!((dend.merges[0].left, dend.merges[0].right), (0, 2));
        assert!(dend.merges[0].distance.abs() < 1e-12);

        assert!(ahc_average_cosine(&[vec![0.0, 0.0]], 1).is_err());
    }

    #[test]
    fn ahc_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let v: Vec<Vec<f64>> = (0..20)
            .map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let scaled: Vec<Vec<f64>> = v
            .iter()
            .map(|row| row.iter().map(|x| x * 37.5).collect())
            .collect();
        let (d1, l1) = ahc_average_cosine(&v, 4).unwrap();
        let (d2, l2) = ahc_average_cosine(&scaled, 4).unwrap();
        assert_eq!(l1, l2);
        let pairs1: Vec<(usize, usize)> = d1.merges.iter().map(|m| (m.left, m.right)).collect();
        let pairs2: Vec<(usize, usize)> = d2.merges.iter().map(|m| (m.left, m.right)).collect();
        assert_eq!(pairs1, pairs2);
    }

    fn blobs(centers: &[Vec<f64>], per: usize, spread: f64, seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pts = Vec::new();
        let mut truth = Vec::new();
        for (b, c) in centers.iter().enumerate() {
            for _ in 0..per {
                pts.push(
                    c.iter()
                        .map(|&x| x + rng.random_range(-spread..spread))
                        .collect(),
                );
                truth.push(b);
            }
        }
        (pts, truth)
    }

    #[test]
    fn two_stage_recovers_blobs() {
        let centers = vec![vec![10.0, 0.0], vec![0.0, 10.0], vec![-10.0, -10.0]];
        let (pts, truth) = blobs(&centers, 12, 0.5, 3);
        let ids: Vec<String> = (0..pts.len()).map(|i| format!("u{i}")).collect();
        let (a, _) = two_stage_cluster(&ids, &pts, 9, 3, 5).unwrap();
        let truth_map: BTreeMap<String, u32> = ids
            .iter()
            .cloned()
            .zip(truth.iter().map(|&t| t as u32))
            .collect();
        let (purity, nmi) = cluster_metrics(&a.labels, &truth_map).unwrap();
        assert_eq!(purity, 1.0);
        assert!((nmi - 1.0).abs() < 1e-12);
    }

    #[test]
    fn two_stage_degenerate_equals_single_stage() {
        let centers = vec![vec![8.0, 0.0], vec![-8.0, 3.0]];
        let (pts, _) = blobs(&centers, 6, 0.3, 9);
        let ids: Vec<String> = (0..pts.len()).map(|i| format!("u{i}")).collect();

        // k_coarse == n: same partition as pure AHC
        let (a, _) = two_stage_cluster(&ids, &pts, pts.len(), 2, 7).unwrap();
        let (_, ahc_labels) = ahc_average_cosine(&pts, 2).unwrap();
        let b = ClusterAssignment::from_labels(&ids, &ahc_labels, 2, ClusterMethod::KmeansAhc, None)
            .unwrap();
        let (purity, _) = cluster_metrics(&a.labels, &b.labels).unwrap();
        assert_eq!(purity, 1.0);

        // k_coarse == k_final: same partition as pure k-means
        let (c, _) = two_stage_cluster(&ids, &pts, 2, 2, 7).unwrap();
        let km = kmeans_cluster(&ids, &pts, 2, 7).unwrap();
        let (purity, _) = cluster_metrics(&c.labels, &km.labels).unwrap();
        assert_eq!(purity, 1.0);
    }

    #[test]
    fn metrics_known_values() {
        let ids: Vec<String> = (0..4).map(|i| format!("u{i}")).collect();
        let a: BTreeMap<String, u32> =
            ids.iter().cloned().zip([0u32, 0, 1, 1]).collect();
        let (p, n) = cluster_metrics(&a, &a).unwrap();
        assert_eq!(p, 1.0);
        assert!((n - 1.0).abs() < 1e-12);

        // single cluster vs two balanced classes
        let single: BTreeMap<String, u32> = ids.iter().cloned().zip([0u32; 4]).collect();
        let (p, n) = cluster_metrics(&single, &a).unwrap();
        assert!((p - 0.5).abs() < 1e-12);
        assert!(n.abs() < 1e-12);

        let mismatched: BTreeMap<String, u32> = [("zz".to_string(), 0u32)].into();
        assert!(cluster_metrics(&mismatched, &a).is_err());
    }

    /// Oracle: direct contingency-table recomputation on a random case.
    #[test]
    fn metrics_match_direct_contingency_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let ids: Vec<String> = (0..20).map(|i| format!("u{i}")).collect();
        let a: BTreeMap<String, u32> = ids
            .iter()
            .map(|id| (id.clone(), rng.random_range(0..3u32)))
            .collect();
        let b: BTreeMap<String, u32> = ids
            .iter()
            .map(|id| (id.clone(), rng.random_range(0..4u32)))
            .collect();
        let (purity, nmi) = cluster_metrics(&a, &b).unwrap();

        // independent recomputation with dense arrays
        let n = ids.len() as f64;
        let mut table = [[0.0f64; 4]; 3];
        for id in &ids {
            table[a[id] as usize][b[id] as usize] += 1.0;
        }
        let mut purity_oracle = 0.0;
        for row in &table {
            purity_oracle += row.iter().fold(0.0f64, |m, &v| m.max(v));
        }
        purity_oracle /= n;
        let row_sum: Vec<f64> = table.iter().map(|r| r.iter().sum()).collect();
        let col_sum: Vec<f64> = (0..4).map(|j| table.iter().map(|r| r[j]).sum()).collect();
        let mut mi = 0.0;
        for (i, row) in table.iter().enumerate() {
            for (j, &c) in row.iter().enumerate() {
                if c > 0.0 {
                    mi += (c / n) * ((c * n) / (row_sum[i] * col_sum[j])).ln();
                }
            }
        }
        let h = |sums: &[f64]| -> f64 {
            sums.iter()
                .filter(|&&s| s > 0.0)
                .map(|&s| -(s / n) * (s / n).ln())
                .sum()
        };
        let nmi_oracle = 2.0 * mi / (h(&row_sum) + h(&col_sum));
        assert!((purity - purity_oracle).abs() < 1e-12);
        assert!((nmi - nmi_oracle).abs() < 1e-12);
    }

    #[test]
    fn assignment_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ids: Vec<String> = vec!["a".into(), "b".into()];
        let a = ClusterAssignment::from_labels(&ids, &[1, 0], 2, ClusterMethod::Kmeans, None).unwrap();
        let path = dir.path().join("labels.tsv");
        a.save(&path).unwrap();
        let back = ClusterAssignment::load(&path, ClusterMethod::Kmeans).unwrap();
        assert_eq!(a.labels, back.labels);
        assert_eq!(back.num_clusters, 2);
    }
}
