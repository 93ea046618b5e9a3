//! Retrieval metrics (mAP, CMC) under the cross-camera re-ID protocol and
//! clustering diagnostics against hidden target ground truth.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cluster::PseudoLabelSet;
use crate::data::DomainDataset;
use crate::encoder::TwoBranchEncoder;
use crate::error::{Error, Result};
use crate::nn::Domain;
use crate::tensor::{pairwise_sqeuclidean, Matrix};

/// Capability to read hidden target-train identities. Its field is private
/// to this module, so no other code can construct one.
pub struct EvalAccess {
    _sealed: (),
}

const ACCESS: EvalAccess = EvalAccess { _sealed: () };

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalProtocol {
    pub exclude_same_camera_same_id: bool,
    pub cmc_ranks: Vec<usize>,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        Self {
            exclude_same_camera_same_id: true,
            cmc_ranks: vec![1, 5, 10],
        }
    }
}

impl EvalProtocol {
    pub fn validate(&self) -> Result<()> {
        if self.cmc_ranks.contains(&0) || !self.cmc_ranks.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::InvalidConfig(
                "cmc_ranks must be positive and strictly ascending".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterDiagnostics {
    /// `None` when the ground truth is unknown.
    pub nmi: Option<f64>,
    pub num_clusters: usize,
    pub outlier_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub map: f64,
    pub cmc: BTreeMap<usize, f64>,
    pub num_queries: usize,
    pub clusters: Option<ClusterDiagnostics>,
    pub fingerprint: String,
    pub seed: u64,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn csv_header(&self) -> String {
        let mut cols = vec!["map".to_string()];
        cols.extend(self.cmc.keys().map(|r| format!("cmc{r}")));
        cols.extend(
            [
                "num_queries",
                "nmi",
                "num_clusters",
                "outlier_fraction",
                "fingerprint",
                "seed",
            ]
            .map(String::from),
        );
        cols.join(",")
    }

    pub fn csv_row(&self) -> String {
        let mut cols = vec![self.map.to_string()];
        cols.extend(self.cmc.values().map(f64::to_string));
        cols.push(self.num_queries.to_string());
        let c = self.clusters.as_ref();
        cols.push(c.and_then(|c| c.nmi).map_or(String::new(), |v| v.to_string()));
        cols.push(c.map_or(String::new(), |c| c.num_clusters.to_string()));
        cols.push(c.map_or(String::new(), |c| c.outlier_fraction.to_string()));
        cols.push(self.fingerprint.clone());
        cols.push(self.seed.to_string());
        cols.join(",")
    }

    /// Header plus one row.
    pub fn to_csv(&self) -> String {
        format!("{}\n{}\n", self.csv_header(), self.csv_row())
    }
}

/// SHA-256 of the JSON serialization, as lowercase hex.
pub fn config_fingerprint<T: Serialize>(config: &T) -> Result<String> {
    let digest = Sha256::digest(serde_json::to_vec(config)?);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

/// Gallery order for one query: ascending distance, ties by gallery index.
pub fn rank_ties(distances: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..distances.len()).collect();
    order.sort_by(|&a, &b| distances[a].total_cmp(&distances[b]).then(a.cmp(&b)));
    order
}

/// Identity and camera of each row.
#[derive(Clone, Copy, Debug)]
pub struct Annotations<'a> {
    pub identities: &'a [usize],
    pub cameras: &'a [usize],
}

impl<'a> Annotations<'a> {
    pub fn of(d: &'a DomainDataset) -> Result<Self> {
        Ok(Self {
            identities: d.identities()?,
            cameras: d.cameras(),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalMetrics {
    pub map: f64,
    pub cmc: BTreeMap<usize, f64>,
    pub average_precision: Vec<f64>,
}

/// mAP and CMC from a `queries × gallery` distance matrix.
///
/// With `skip_unmatched`, queries without a valid match are left out
/// instead of failing (used for leave-one-out retrieval on a training set).
pub fn retrieval_metrics(
    dist: &Matrix,
    query: Annotations<'_>,
    gallery: Annotations<'_>,
    protocol: &EvalProtocol,
    skip_unmatched: bool,
) -> Result<RetrievalMetrics> {
    protocol.validate()?;
    let (nq, ng) = dist.shape();
    if query.identities.len() != nq || gallery.identities.len() != ng {
        return Err(Error::ShapeMismatch {
            op: "retrieval_metrics",
            left: (nq, ng),
            right: (query.identities.len(), gallery.identities.len()),
        });
    }
    let mut aps = Vec::with_capacity(nq);
    let mut hits = vec![0usize; protocol.cmc_ranks.len()];
    for q in 0..nq {
        let (qid, qcam) = (query.identities[q], query.cameras[q]);
        let mut found = 0usize;
        let mut valid = 0usize;
        let mut precision_sum = 0.0;
        let mut first: Option<usize> = None;
        let total_relevant = (0..ng)
            .filter(|&g| {
                gallery.identities[g] == qid && !(protocol.exclude_same_camera_same_id && gallery.cameras[g] == qcam)
            })
            .count();
        if total_relevant == 0 {
            if skip_unmatched {
                continue;
            }
            return Err(Error::NoValidMatch { query: q });
        }
        for g in rank_ties(dist.row(q)) {
            let same_id = gallery.identities[g] == qid;
            if same_id && protocol.exclude_same_camera_same_id && gallery.cameras[g] == qcam {
                continue;
            }
            valid += 1;
            if same_id {
                found += 1;
                precision_sum += found as f64 / valid as f64;
                first.get_or_insert(valid);
                if found == total_relevant {
                    break;
                }
            }
        }
        aps.push(precision_sum / total_relevant as f64);
        let first = first.expect("total_relevant > 0");
        for (h, &r) in hits.iter_mut().zip(&protocol.cmc_ranks) {
            if first <= r {
                *h += 1;
            }
        }
    }
    if aps.is_empty() {
        return Err(Error::NoValidMatch { query: 0 });
    }
    let n = aps.len() as f64;
    Ok(RetrievalMetrics {
        map: aps.iter().sum::<f64>() / n,
        cmc: protocol
            .cmc_ranks
            .iter()
            .zip(&hits)
            .map(|(&r, &h)| (r, h as f64 / n))
            .collect(),
        average_precision: aps,
    })
}

/// Retrieval metrics on already computed (normalized) embeddings.
pub fn evaluate_embeddings(
    query_emb: &Matrix,
    gallery_emb: &Matrix,
    query: &DomainDataset,
    gallery: &DomainDataset,
    protocol: &EvalProtocol,
) -> Result<RetrievalMetrics> {
    let dist = pairwise_sqeuclidean(query_emb, gallery_emb)?;
    retrieval_metrics(
        &dist,
        Annotations::of(query)?,
        Annotations::of(gallery)?,
        protocol,
        false,
    )
}

/// Embed query and gallery through the target path and score retrieval.
pub fn evaluate(
    query: &DomainDataset,
    gallery: &DomainDataset,
    encoder: &TwoBranchEncoder,
    protocol: &EvalProtocol,
) -> Result<EvalReport> {
    let qe = encoder.embed(query.features(), Domain::Target)?;
    let ge = encoder.embed(gallery.features(), Domain::Target)?;
    let m = evaluate_embeddings(&qe, &ge, query, gallery, protocol)?;
    Ok(EvalReport {
        map: m.map,
        cmc: m.cmc,
        num_queries: query.len(),
        clusters: None,
        fingerprint: String::new(),
        seed: 0,
    })
}

/// Leave-one-out mAP of a labeled set against itself; the self match is
/// removed by the same-camera rule.
pub fn self_retrieval_map(embeddings: &Matrix, data: &DomainDataset) -> Result<f64> {
    let dist = pairwise_sqeuclidean(embeddings, embeddings)?;
    let ann = Annotations::of(data)?;
    Ok(retrieval_metrics(&dist, ann, ann, &EvalProtocol::default(), true)?.map)
}

fn entropy_of_counts(counts: impl Iterator<Item = usize>, n: f64) -> f64 {
    let mut c: Vec<usize> = counts.filter(|&c| c > 0).collect();
    c.sort_unstable();
    -c.iter()
        .map(|&k| {
            let p = k as f64 / n;
            p * p.ln()
        })
        .sum::<f64>()
}

/// Normalized mutual information with arithmetic-mean normalization over
/// the non-outlier samples. Two single-cluster labelings score 1.
pub fn nmi(pseudo: &PseudoLabelSet, truth: &[usize]) -> Result<f64> {
    if pseudo.len() != truth.len() {
        return Err(Error::InvalidConfig(format!(
            "nmi: {} pseudo-labels vs {} truth labels",
            pseudo.len(),
            truth.len()
        )));
    }
    let pairs: Vec<(usize, usize)> = pseudo
        .labels()
        .iter()
        .zip(truth)
        .filter_map(|(p, &t)| p.map(|p| (p, t)))
        .collect();
    if pairs.is_empty() {
        return Err(Error::InvalidConfig("nmi: no labeled samples in common".into()));
    }
    let n = pairs.len() as f64;
    let mut pu: BTreeMap<usize, usize> = BTreeMap::new();
    let mut pv: BTreeMap<usize, usize> = BTreeMap::new();
    let mut joint: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for &(a, b) in &pairs {
        *pu.entry(a).or_default() += 1;
        *pv.entry(b).or_default() += 1;
        *joint.entry((a, b)).or_default() += 1;
    }
    let hu = entropy_of_counts(pu.into_values(), n);
    let hv = entropy_of_counts(pv.into_values(), n);
    let huv = entropy_of_counts(joint.into_values(), n);
    if hu == 0.0 && hv == 0.0 {
        return Ok(1.0);
    }
    let mi = hu + hv - huv;
    Ok((mi / (0.5 * (hu + hv))).clamp(0.0, 1.0))
}

/// Cluster count, outlier fraction, and NMI against the hidden truth when
/// it is known and at least one sample is clustered.
pub fn cluster_diagnostics(pseudo: &PseudoLabelSet, target_train: &DomainDataset) -> Result<ClusterDiagnostics> {
    let nmi = match target_train.hidden_identities(&ACCESS) {
        // undefined when every sample is an outlier
        Ok(_) if pseudo.num_outliers() == pseudo.len() => None,
        Ok(truth) => Some(nmi(pseudo, truth)?),
        Err(Error::LabelsHidden) => None,
        Err(e) => return Err(e),
    };
    Ok(ClusterDiagnostics {
        nmi,
        num_clusters: pseudo.num_clusters(),
        outlier_fraction: pseudo.num_outliers() as f64 / pseudo.len().max(1) as f64,
    })
}

/// Test hook: pseudo-labels equal to the hidden ground truth.
pub fn ground_truth_clusterer(target_train: &DomainDataset) -> Result<PseudoLabelSet> {
    let truth = target_train.hidden_identities(&ACCESS)?;
    let (compact, _) = crate::data::compact_labels(truth);
    PseudoLabelSet::new(compact.into_iter().map(Some).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Split;
    use crate::tensor::Rng;
    use proptest::prelude::*;

    fn ann<'a>(ids: &'a [usize], cams: &'a [usize]) -> Annotations<'a> {
        Annotations {
            identities: ids,
            cameras: cams,
        }
    }

    fn metrics(d: &Matrix, qi: &[usize], qc: &[usize], gi: &[usize], gc: &[usize]) -> Result<RetrievalMetrics> {
        retrieval_metrics(d, ann(qi, qc), ann(gi, gc), &EvalProtocol::default(), false)
    }

    #[test]
    fn single_match_at_rank_one() {
        let d = Matrix::from_rows(&[vec![0.1, 0.5, 0.9]]).unwrap();
        let m = metrics(&d, &[7], &[0], &[7, 1, 2], &[1, 1, 1]).unwrap();
        assert_eq!(m.map, 1.0);
        assert_eq!(m.cmc[&1], 1.0);
    }

    #[test]
    fn relevant_at_ranks_one_and_three() {
        let d = Matrix::from_rows(&[vec![0.1, 0.2, 0.3, 0.4]]).unwrap();
        let m = metrics(&d, &[7], &[0], &[7, 1, 7, 2], &[1, 1, 2, 1]).unwrap();
        assert_eq!(m.map, (1.0 + 2.0 / 3.0) / 2.0);
        assert!((m.map - 5.0 / 6.0).abs() <= f64::EPSILON);
    }

    #[test]
    fn same_camera_matches_are_excluded() {
        // the nearest item is the same identity on the same camera: ignored
        let d = Matrix::from_rows(&[vec![0.0, 0.5, 0.9]]).unwrap();
        let m = metrics(&d, &[7], &[0], &[7, 7, 1], &[0, 1, 1]).unwrap();
        assert_eq!(m.map, 1.0);
        let err = metrics(&d, &[7], &[0], &[7, 1, 1], &[0, 1, 1]).unwrap_err();
        assert!(matches!(err, Error::NoValidMatch { query: 0 }));
    }

    #[test]
    fn tie_order_follows_gallery_index() {
        assert_eq!(rank_ties(&[1.0; 5]), vec![0, 1, 2, 3, 4]);
        let mut d = vec![5.0; 10];
        d[7] = 0.5;
        d[3] = 0.5;
        assert_eq!(&rank_ties(&d)[..2], &[3, 7]);
    }

    /// Direct counting: an item's rank is one plus the number of valid
    /// items ordered before it.
    fn naive_metrics(
        d: &Matrix,
        qi: &[usize],
        qc: &[usize],
        gi: &[usize],
        gc: &[usize],
        ranks: &[usize],
    ) -> (f64, Vec<f64>) {
        let before = |q: usize, a: usize, b: usize| d.get(q, a) < d.get(q, b) || (d.get(q, a) == d.get(q, b) && a < b);
        let valid = |q: usize, g: usize| !(gi[g] == qi[q] && gc[g] == qc[q]);
        let mut ap_sum = 0.0;
        let mut cmc = vec![0.0; ranks.len()];
        for q in 0..d.rows() {
            let rel: Vec<usize> = (0..d.cols()).filter(|&g| valid(q, g) && gi[g] == qi[q]).collect();
            let mut ap = 0.0;
            let mut best = usize::MAX;
            for &g in &rel {
                let rank = 1 + (0..d.cols()).filter(|&h| valid(q, h) && before(q, h, g)).count();
                let rel_before = 1 + rel.iter().filter(|&&h| before(q, h, g)).count();
                ap += rel_before as f64 / rank as f64;
                best = best.min(rank);
            }
            ap_sum += ap / rel.len() as f64;
            for (c, &r) in cmc.iter_mut().zip(ranks) {
                if best <= r {
                    *c += 1.0;
                }
            }
        }
        let n = d.rows() as f64;
        (ap_sum / n, cmc.into_iter().map(|c| c / n).collect())
    }

    fn random_protocol(seed: u64, nq: usize, ng: usize) -> (Matrix, Vec<usize>, Vec<usize>, Vec<usize>, Vec<usize>) {
        let mut rng = Rng::new(seed);
        let ids = 20;
        let qi: Vec<usize> = (0..nq).map(|q| q % ids).collect();
        let qc: Vec<usize> = (0..nq).map(|_| rng.below(3)).collect();
        let mut gi: Vec<usize> = (0..ng).map(|_| rng.below(ids)).collect();
        let mut gc: Vec<usize> = (0..ng).map(|_| rng.below(3)).collect();
        // guarantee one valid match per identity and camera
        for id in 0..ids {
            for cam in 0..3 {
                gi.push(id);
                gc.push(cam);
            }
        }
        // quantized distances so ties occur
        let d = Matrix::from_fn(nq, gi.len(), |_, _| (rng.uniform() * 50.0).floor());
        (d, qi, qc, gi, gc)
    }

    #[test]
    fn matches_naive_oracle_on_200_queries() {
        let (d, qi, qc, gi, gc) = random_protocol(11, 200, 300);
        let m = metrics(&d, &qi, &qc, &gi, &gc).unwrap();
        let (map, cmc) = naive_metrics(&d, &qi, &qc, &gi, &gc, &[1, 5, 10]);
        assert!((m.map - map).abs() < 1e-10);
        assert_eq!(m.cmc.values().copied().collect::<Vec<_>>(), cmc);
    }

    #[test]
    fn permuted_gallery_matches_oracle() {
        let (d, qi, qc, gi, gc) = random_protocol(12, 50, 100);
        let ng = gi.len();
        let mut perm: Vec<usize> = (0..ng).collect();
        Rng::new(1).shuffle(&mut perm);
        let pd = Matrix::from_fn(d.rows(), ng, |q, g| d.get(q, perm[g]));
        let pgi: Vec<usize> = perm.iter().map(|&g| gi[g]).collect();
        let pgc: Vec<usize> = perm.iter().map(|&g| gc[g]).collect();
        let m = metrics(&pd, &qi, &qc, &pgi, &pgc).unwrap();
        let (map, _) = naive_metrics(&pd, &qi, &qc, &pgi, &pgc, &[1]);
        assert!((m.map - map).abs() < 1e-10);
        // without ties the metric does not depend on gallery order
        let dn = Matrix::from_fn(d.rows(), ng, |q, g| d.get(q, g) + g as f64 * 1e-6);
        let pdn = Matrix::from_fn(d.rows(), ng, |q, g| dn.get(q, perm[g]));
        let a = metrics(&dn, &qi, &qc, &gi, &gc).unwrap().map;
        let b = metrics(&pdn, &qi, &qc, &pgi, &pgc).unwrap().map;
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn perfect_and_worst_rankings() {
        let gi = [0, 0, 1, 1, 2, 2];
        let gc = [1, 1, 1, 1, 1, 1];
        let good = Matrix::from_rows(&[vec![0.0, 0.1, 1.0, 1.0, 1.0, 1.0]]).unwrap();
        assert_eq!(metrics(&good, &[0], &[0], &gi, &gc).unwrap().map, 1.0);
        let bad = Matrix::from_rows(&[vec![9.0, 9.5, 1.0, 1.0, 1.0, 1.0]]).unwrap();
        let m = metrics(&bad, &[0], &[0], &gi, &gc).unwrap().map;
        let (oracle, _) = naive_metrics(&bad, &[0], &[0], &gi, &gc, &[1]);
        assert_eq!(m, oracle);
        assert!((m - (1.0 / 5.0 + 2.0 / 6.0) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn nmi_examples() {
        let truth = [3, 3, 5, 5, 9, 9];
        let relabeled = PseudoLabelSet::new(vec![Some(2), Some(2), Some(0), Some(0), Some(1), Some(1)]).unwrap();
        assert_eq!(nmi(&relabeled, &truth).unwrap(), 1.0);
        let single = PseudoLabelSet::new(vec![Some(0); 6]).unwrap();
        assert_eq!(nmi(&single, &truth).unwrap(), 0.0);
        let none = PseudoLabelSet::new(vec![None; 6]).unwrap();
        assert!(nmi(&none, &truth).is_err());
    }

    fn oracle_nmi(u: &[usize], v: &[usize]) -> f64 {
        let n = u.len() as f64;
        let mut hu = 0.0;
        let mut hv = 0.0;
        let mut mi = 0.0;
        let ku = u.iter().max().unwrap() + 1;
        let kv = v.iter().max().unwrap() + 1;
        for a in 0..ku {
            let pa = u.iter().filter(|&&x| x == a).count() as f64 / n;
            if pa > 0.0 {
                hu -= pa * pa.ln();
            }
        }
        for b in 0..kv {
            let pb = v.iter().filter(|&&x| x == b).count() as f64 / n;
            if pb > 0.0 {
                hv -= pb * pb.ln();
            }
            for a in 0..ku {
                let pa = u.iter().filter(|&&x| x == a).count() as f64 / n;
                let pab = u.iter().zip(v).filter(|&(&x, &y)| x == a && y == b).count() as f64 / n;
                if pab > 0.0 {
                    mi += pab * (pab / (pa * pb)).ln();
                }
            }
        }
        mi / ((hu + hv) / 2.0)
    }

    #[test]
    fn nmi_matches_entropy_oracle() {
        for seed in 0..10 {
            let mut rng = Rng::new(seed);
            let u: Vec<usize> = (0..40).map(|_| rng.below(4)).collect();
            let v: Vec<usize> = (0..40).map(|_| rng.below(5)).collect();
            let (cu, _) = crate::data::compact_labels(&u);
            let set = PseudoLabelSet::new(cu.into_iter().map(Some).collect()).unwrap();
            assert!((nmi(&set, &v).unwrap() - oracle_nmi(&u, &v)).abs() < 1e-10);
        }
    }

    #[test]
    fn diagnostics_read_hidden_truth() {
        let ds = DomainDataset::new(
            Domain::Target,
            Split::Train,
            Matrix::zeros(4, 1),
            vec![5, 5, 6, 6],
            vec![0; 4],
        )
        .unwrap();
        assert!(ds.identities().is_err());
        let truth = ground_truth_clusterer(&ds).unwrap();
        assert_eq!(truth.labels(), &[Some(0), Some(0), Some(1), Some(1)]);
        let diag = cluster_diagnostics(&truth, &ds).unwrap();
        assert_eq!(diag.nmi, Some(1.0));
        let unknown = DomainDataset::unlabeled(Domain::Target, Split::Train, Matrix::zeros(4, 1), vec![0; 4]).unwrap();
        assert_eq!(cluster_diagnostics(&truth, &unknown).unwrap().nmi, None);
    }

    #[test]
    fn report_serialization_is_stable() {
        let report = EvalReport {
            map: 0.5,
            cmc: [(1, 0.25), (5, 0.5), (10, 0.75)].into_iter().collect(),
            num_queries: 4,
            clusters: None,
            fingerprint: config_fingerprint(&EvalProtocol::default()).unwrap(),
            seed: 3,
        };
        assert_eq!(report.fingerprint.len(), 64);
        assert_eq!(report.to_json().unwrap(), report.clone().to_json().unwrap());
        let csv = report.to_csv();
        assert!(csv.starts_with("map,cmc1,cmc5,cmc10,num_queries,nmi,num_clusters,outlier_fraction,fingerprint,seed\n0.5,0.25,0.5,0.75,4,,,,"));
        let back: EvalReport = serde_json::from_str(&report.to_json().unwrap()).unwrap();
        assert_eq!(back, report);
    }

    proptest! {
        #[test]
        fn metrics_invariant_under_monotone_transform(seed in any::<u64>()) {
            let (d, qi, qc, gi, gc) = random_protocol(seed, 30, 60);
            let a = metrics(&d, &qi, &qc, &gi, &gc).unwrap();
            let t = d.map(|x| (x * 0.3).exp() + 2.0);
            let b = metrics(&t, &qi, &qc, &gi, &gc).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn cmc_is_monotone_and_reaches_one(seed in any::<u64>()) {
            let (d, qi, qc, gi, gc) = random_protocol(seed, 30, 40);
            let ng = gi.len();
            let protocol = EvalProtocol { cmc_ranks: vec![1, 2, 5, 10, ng], ..EvalProtocol::default() };
            let m = retrieval_metrics(&d, ann(&qi, &qc), ann(&gi, &gc), &protocol, false).unwrap();
            let v: Vec<f64> = m.cmc.values().copied().collect();
            prop_assert!(v.windows(2).all(|w| w[0] <= w[1]));
            prop_assert_eq!(*v.last().unwrap(), 1.0);
            prop_assert!(m.map > 0.0 && m.map <= 1.0);
        }
    }
}
