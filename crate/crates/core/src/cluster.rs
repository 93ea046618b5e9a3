//! Pseudo-label production: k-reciprocal re-ranked distances, DBSCAN with a
//! radius derived from the fraction `p` of smallest pair distances, k-means,
//! and outlier-aware label assignment.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{write_file, DomainDataset};
use crate::error::{Error, Result};
use crate::tensor::{pairwise_sqeuclidean, sq_dist, Matrix, Rng};

/// Symmetric, nonnegative, zero-diagonal `n × n` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceMatrix {
    n: usize,
    data: Vec<f64>,
}

impl DistanceMatrix {
    pub fn new(m: Matrix) -> Result<Self> {
        let (r, c) = m.shape();
        if r != c {
            return Err(Error::ShapeMismatch {
                op: "DistanceMatrix::new",
                left: (r, c),
                right: (c, r),
            });
        }
        for i in 0..r {
            if m.get(i, i) != 0.0 {
                return Err(Error::InvalidConfig(format!("distance diagonal ({i},{i}) is nonzero")));
            }
            for j in 0..i {
                let (a, b) = (m.get(i, j), m.get(j, i));
                if !(a >= 0.0 && b >= 0.0) || (a - b).abs() > 1e-9 {
                    return Err(Error::InvalidConfig(format!(
                        "distance ({i},{j}) not symmetric nonnegative"
                    )));
                }
            }
        }
        Ok(Self {
            n: r,
            data: m.into_data(),
        })
    }

    /// Squared Euclidean distances between rows of `x`.
    pub fn sqeuclidean(x: &Matrix) -> Result<Self> {
        let mut d = pairwise_sqeuclidean(x, x)?;
        for i in 0..x.rows() {
            d.set(i, i, 0.0);
        }
        Self::new(d)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    pub fn to_matrix(&self) -> Matrix {
        Matrix::new(self.n, self.n, self.data.clone()).expect("square by construction")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RerankConfig {
    pub k1: usize,
    pub k2: usize,
    pub lambda: f64,
}

impl Default for RerankConfig {
    fn default() -> Self {
        Self {
            k1: 20,
            k2: 6,
            lambda: 0.3,
        }
    }
}

impl RerankConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k1 == 0 || self.k2 == 0 || self.k2 > self.k1 {
            return Err(Error::InvalidConfig(format!(
                "re-ranking needs 1 <= k2 <= k1, got k1={} k2={}",
                self.k1, self.k2
            )));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::InvalidConfig(format!("lambda {} not in [0, 1]", self.lambda)));
        }
        Ok(())
    }
}

/// Row-wise ranking by `(distance, index)`.
fn argsort_rows(d: &Matrix) -> Vec<Vec<usize>> {
    (0..d.rows())
        .map(|i| {
            let row = d.row(i);
            let mut idx: Vec<usize> = (0..row.len()).collect();
            idx.sort_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)));
            idx
        })
        .collect()
}

/// `R(i, k)`: members of the top `k + 1` of `i` that also have `i` in their
/// own top `k + 1`, in rank order.
fn k_reciprocal(rank: &[Vec<usize>], i: usize, k: usize) -> Vec<usize> {
    rank[i][..=k]
        .iter()
        .copied()
        .filter(|&c| rank[c][..=k].contains(&i))
        .collect()
}

/// k-reciprocal re-ranked distances between the rows of `features`.
///
/// Squared Euclidean distances are divided by their global maximum, each
/// point gets a weighted indicator vector over its expanded k-reciprocal set,
/// the vectors are averaged over the `k2` nearest neighbours, and the
/// generalized Jaccard distance is blended with the normalized distance.
pub fn k_reciprocal_distances(features: &Matrix, cfg: &RerankConfig) -> Result<DistanceMatrix> {
    cfg.validate()?;
    let n = features.rows();
    if n <= cfg.k1 {
        return Err(Error::InvalidConfig(format!(
            "re-ranking needs n > k1, got n={n} k1={}",
            cfg.k1
        )));
    }
    let mut original = pairwise_sqeuclidean(features, features)?;
    for i in 0..n {
        original.set(i, i, 0.0);
    }
    let max = original.data().iter().copied().fold(0.0, f64::max);
    if max > 0.0 {
        original = original.scale(1.0 / max);
    }
    let rank = argsort_rows(&original);
    let half = (cfg.k1 as f64 / 2.0).round_ties_even() as usize;

    // Sparse rows of V as (column, weight), sorted by column.
    let mut v: Vec<Vec<(usize, f64)>> = Vec::with_capacity(n);
    let mut mark = vec![false; n];
    for i in 0..n {
        let r = k_reciprocal(&rank, i, cfg.k1);
        let mut expansion = r.clone();
        for &c in &r {
            let rc = k_reciprocal(&rank, c, half);
            let common = rc.iter().filter(|x| r.contains(x)).count();
            if common as f64 > 2.0 / 3.0 * rc.len() as f64 {
                expansion.extend(rc);
            }
        }
        for &c in &expansion {
            mark[c] = true;
        }
        let cols: Vec<usize> = (0..n).filter(|&c| mark[c]).collect();
        for &c in &cols {
            mark[c] = false;
        }
        let weights: Vec<f64> = cols.iter().map(|&c| (-original.get(i, c)).exp()).collect();
        let total: f64 = weights.iter().sum();
        v.push(cols.into_iter().zip(weights.into_iter().map(|w| w / total)).collect());
    }

    if cfg.k2 != 1 {
        let mut acc = vec![0.0; n];
        let mut qe = Vec::with_capacity(n);
        for i in 0..n {
            for &r in &rank[i][..cfg.k2] {
                for &(c, w) in &v[r] {
                    acc[c] += w;
                }
            }
            let mut row = Vec::new();
            for (c, a) in acc.iter_mut().enumerate() {
                if *a != 0.0 {
                    row.push((c, *a / cfg.k2 as f64));
                    *a = 0.0;
                }
            }
            qe.push(row);
        }
        v = qe;
    }

    // Inverted index: for each column, the rows with a nonzero entry.
    let mut inverted: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    for (i, row) in v.iter().enumerate() {
        for &(c, w) in row {
            inverted[c].push((i, w));
        }
    }
    let sums: Vec<f64> = v.iter().map(|row| row.iter().map(|&(_, w)| w).sum()).collect();
    let mut out = Matrix::zeros(n, n);
    let mut min_acc = vec![0.0; n];
    for i in 0..n {
        for &(c, w) in &v[i] {
            for &(j, wj) in &inverted[c] {
                min_acc[j] += w.min(wj);
            }
        }
        for j in 0..n {
            let m = min_acc[j];
            let jaccard = 1.0 - m / (sums[i] + sums[j] - m);
            out.set(i, j, (1.0 - cfg.lambda) * jaccard + cfg.lambda * original.get(i, j));
            min_acc[j] = 0.0;
        }
    }
    for i in 0..n {
        out.set(i, i, 0.0);
        for j in 0..i {
            let s = (0.5 * (out.get(i, j) + out.get(j, i))).max(0.0);
            out.set(i, j, s);
            out.set(j, i, s);
        }
    }
    DistanceMatrix::new(out)
}

/// Mean of the smallest `⌈p · n(n−1)/2⌉` pair distances (each pair once).
pub fn eps_from_p(d: &DistanceMatrix, p: f64) -> Result<f64> {
    let n = d.n();
    if n < 2 {
        return Err(Error::InvalidConfig("eps_from_p needs at least 2 points".into()));
    }
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::InvalidConfig(format!("p = {p} not in (0, 1]")));
    }
    let mut pairs: Vec<f64> = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        pairs.extend_from_slice(&d.row(i)[i + 1..]);
    }
    // tolerate representation error in p · pairs, e.g. 0.2 · 10
    let m = ((p * pairs.len() as f64 - 1e-9).ceil() as usize).clamp(1, pairs.len());
    if m < pairs.len() {
        pairs.select_nth_unstable_by(m - 1, f64::total_cmp);
    }
    let smallest = &mut pairs[..m];
    smallest.sort_by(f64::total_cmp);
    Ok(smallest.iter().sum::<f64>() / m as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DbscanConfig {
    pub p: f64,
    pub min_samples: usize,
}

impl Default for DbscanConfig {
    fn default() -> Self {
        Self {
            p: 0.0016,
            min_samples: 4,
        }
    }
}

impl DbscanConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.p > 0.0 && self.p <= 1.0) {
            return Err(Error::InvalidConfig(format!("p = {} not in (0, 1]", self.p)));
        }
        if self.min_samples < 2 {
            return Err(Error::InvalidConfig("min_samples must be >= 2".into()));
        }
        Ok(())
    }
}

/// Cluster id per sample (`None` = outlier), ids contiguous from 0.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PseudoLabelSet {
    labels: Vec<Option<usize>>,
    num_clusters: usize,
}

impl PseudoLabelSet {
    pub fn new(labels: Vec<Option<usize>>) -> Result<Self> {
        let num_clusters = labels.iter().flatten().max().map_or(0, |m| m + 1);
        let mut seen = vec![false; num_clusters];
        for l in labels.iter().flatten() {
            seen[*l] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::InvalidConfig(format!(
                "cluster ids not contiguous: {missing} unused"
            )));
        }
        Ok(Self { labels, num_clusters })
    }

    pub fn labels(&self) -> &[Option<usize>] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_clusters(&self) -> usize {
        self.num_clusters
    }

    pub fn num_outliers(&self) -> usize {
        self.labels.iter().filter(|l| l.is_none()).count()
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.num_clusters];
        for l in self.labels.iter().flatten() {
            sizes[*l] += 1;
        }
        sizes
    }

    /// `index,cluster` with outliers written as `-1`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("index,cluster\n");
        for (i, l) in self.labels.iter().enumerate() {
            match l {
                Some(c) => out.push_str(&format!("{i},{c}\n")),
                None => out.push_str(&format!("{i},-1\n")),
            }
        }
        out
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        write_file(path, self.to_csv().as_bytes())
    }
}

/// DBSCAN on a precomputed distance matrix.
///
/// A point is core when at least `min_samples` points (itself included) lie
/// within `eps`. Points are scanned in index order and each new cluster is
/// expanded completely before the next starts, so a border point reachable
/// from several clusters joins the one with the smallest core index.
pub fn dbscan(d: &DistanceMatrix, eps: f64, min_samples: usize) -> Result<PseudoLabelSet> {
    // eps = 0 is legitimate: re-ranked distances can be exactly zero
    if !(eps >= 0.0 && eps.is_finite()) {
        return Err(Error::InvalidConfig(format!("eps = {eps} must be finite and >= 0")));
    }
    let n = d.n();
    let neighbours: Vec<Vec<usize>> = (0..n)
        .map(|i| (0..n).filter(|&j| d.get(i, j) <= eps).collect())
        .collect();
    let core: Vec<bool> = neighbours.iter().map(|nb| nb.len() >= min_samples).collect();
    let mut labels: Vec<Option<usize>> = vec![None; n];
    let mut next = 0;
    let mut stack = Vec::new();
    for start in 0..n {
        if !core[start] || labels[start].is_some() {
            continue;
        }
        labels[start] = Some(next);
        stack.push(start);
        while let Some(p) = stack.pop() {
            for &q in &neighbours[p] {
                if labels[q].is_none() {
                    labels[q] = Some(next);
                    if core[q] {
                        stack.push(q);
                    }
                }
            }
        }
        next += 1;
    }
    PseudoLabelSet::new(labels)
}

#[derive(Clone, Debug)]
pub struct KMeansResult {
    pub labels: PseudoLabelSet,
    pub centroids: Matrix,
    /// Within-cluster sum of squares after each assignment step.
    pub inertia: Vec<f64>,
}

fn nearest(x: &[f64], centroids: &Matrix) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for c in 0..centroids.rows() {
        let d = sq_dist(x, centroids.row(c));
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// Lloyd's algorithm with k-means++ seeding, run to an assignment fixpoint
/// or `max_iters`. An empty cluster is re-seeded at the point farthest from
/// its assigned centroid.
pub fn kmeans(features: &Matrix, k: usize, rng: &mut Rng, max_iters: usize) -> Result<KMeansResult> {
    let n = features.rows();
    if k == 0 || k > n {
        return Err(Error::InvalidConfig(format!(
            "k-means needs 1 <= k <= n, got k={k} n={n}"
        )));
    }
    let dim = features.cols();
    let mut centroids = Matrix::zeros(k, dim);
    centroids.row_mut(0).copy_from_slice(features.row(rng.below(n)));
    let mut closest: Vec<f64> = (0..n).map(|i| sq_dist(features.row(i), centroids.row(0))).collect();
    for c in 1..k {
        let total: f64 = closest.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.uniform() * total;
            let mut acc = 0.0;
            let mut pick = n - 1;
            for (i, &w) in closest.iter().enumerate() {
                acc += w;
                if acc > target && w > 0.0 {
                    pick = i;
                    break;
                }
            }
            pick
        } else {
            rng.below(n)
        };
        centroids.row_mut(c).copy_from_slice(features.row(pick));
        for (i, best) in closest.iter_mut().enumerate() {
            *best = best.min(sq_dist(features.row(i), centroids.row(c)));
        }
    }

    let mut assign = vec![usize::MAX; n];
    let mut inertia = Vec::new();
    for _ in 0..max_iters.max(1) {
        let mut changed = false;
        let mut wcss = 0.0;
        let mut dists = vec![0.0; n];
        for i in 0..n {
            let (c, d) = nearest(features.row(i), &centroids);
            if assign[i] != c {
                assign[i] = c;
                changed = true;
            }
            dists[i] = d;
            wcss += d;
        }
        inertia.push(wcss);
        if !changed {
            break;
        }
        let mut sums = Matrix::zeros(k, dim);
        let mut counts = vec![0usize; k];
        for i in 0..n {
            counts[assign[i]] += 1;
            for (s, x) in sums.row_mut(assign[i]).iter_mut().zip(features.row(i)) {
                *s += x;
            }
        }
        let mut taken = vec![false; n];
        for c in 0..k {
            if counts[c] > 0 {
                for (dst, s) in centroids.row_mut(c).iter_mut().zip(sums.row(c)) {
                    *dst = s / counts[c] as f64;
                }
            } else {
                let far = (0..n)
                    .filter(|&i| !taken[i])
                    .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)))
                    .expect("k <= n leaves a free point");
                taken[far] = true;
                centroids.row_mut(c).copy_from_slice(features.row(far));
            }
        }
    }
    Ok(KMeansResult {
        labels: compact(assign.into_iter().map(Some).collect())?,
        centroids,
        inertia,
    })
}

/// Relabel clusters to `0..M` by first appearance.
fn compact(labels: Vec<Option<usize>>) -> Result<PseudoLabelSet> {
    let mut map = std::collections::BTreeMap::new();
    let labels = labels
        .into_iter()
        .map(|l| {
            l.map(|c| {
                let next = map.len();
                *map.entry(c).or_insert(next)
            })
        })
        .collect();
    PseudoLabelSet::new(labels)
}

/// Rows kept for training and their compacted pseudo-labels.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PseudoLabeled {
    pub rows: Vec<usize>,
    pub labels: Vec<usize>,
    pub num_clusters: usize,
}

/// Drop outliers and clusters with fewer than two members, then re-compact
/// the remaining cluster ids in order of first appearance.
pub fn assign_pseudo_labels(labels: &PseudoLabelSet, dataset: &DomainDataset) -> Result<PseudoLabeled> {
    if labels.len() != dataset.len() {
        return Err(Error::InvalidConfig(format!(
            "{} pseudo-labels for {} rows",
            labels.len(),
            dataset.len()
        )));
    }
    let sizes = labels.cluster_sizes();
    let kept: Vec<Option<usize>> = labels.labels().iter().map(|l| l.filter(|&c| sizes[c] >= 2)).collect();
    let compacted = compact(kept)?;
    if compacted.num_clusters() < 2 {
        return Err(Error::ClusterCollapse {
            clusters: compacted.num_clusters(),
        });
    }
    let (rows, ids): (Vec<usize>, Vec<usize>) = compacted
        .labels()
        .iter()
        .enumerate()
        .filter_map(|(i, l)| l.map(|c| (i, c)))
        .unzip();
    Ok(PseudoLabeled {
        rows,
        labels: ids,
        num_clusters: compacted.num_clusters(),
    })
}
