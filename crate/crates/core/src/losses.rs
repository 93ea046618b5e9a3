//! Batch-hard triplet loss, softmax cross-entropy, their per-domain sum, and
//! the joint source + target objective.
//!
//! Both base losses use sum reduction by default, matching a literal
//! `Σ_i` over the batch; [`Reduction::Mean`] divides loss and gradients by
//! the batch size.

use serde::{Deserialize, Serialize};

use crate::encoder::{BnMode, ClassifierHead, SingleBranchEncoder, TwoBranchEncoder};
use crate::error::{Error, Result};
use crate::nn::{Domain, Mode};
use crate::tensor::{sq_dist, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    #[default]
    Sum,
    Mean,
}

impl Reduction {
    fn factor(self, n: usize) -> f64 {
        match self {
            Reduction::Sum => 1.0,
            Reduction::Mean => 1.0 / n as f64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Triplet margin `m ≥ 0`.
    pub margin: f64,
    pub reduction: Reduction,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            margin: 0.3,
            reduction: Reduction::Sum,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TripletOutput {
    pub loss: f64,
    /// Gradient with respect to the embeddings.
    pub grad: Matrix,
    /// Hardest positive of each anchor.
    pub positives: Vec<usize>,
    /// Hardest negative of each anchor.
    pub negatives: Vec<usize>,
}

/// Batch-hard triplet loss over Euclidean distances.
///
/// Mining ties are broken towards the lowest index. An anchor whose hinge
/// argument is exactly zero contributes no gradient, and a zero distance
/// contributes a zero subgradient.
pub fn triplet_batch_hard(e: &Matrix, labels: &[usize], cfg: &LossConfig) -> Result<TripletOutput> {
    let n = e.rows();
    if labels.len() != n {
        return Err(Error::ShapeMismatch {
            op: "triplet_batch_hard",
            left: e.shape(),
            right: (labels.len(), 1),
        });
    }
    if cfg.margin < 0.0 || !cfg.margin.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "triplet margin {} must be >= 0",
            cfg.margin
        )));
    }
    let mut dist = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let d = sq_dist(e.row(i), e.row(j)).sqrt();
            dist[i * n + j] = d;
            dist[j * n + i] = d;
        }
    }

    let scale = cfg.reduction.factor(n);
    let mut loss = 0.0;
    let mut grad = Matrix::zeros(n, e.cols());
    let mut positives = Vec::with_capacity(n);
    let mut negatives = Vec::with_capacity(n);
    for i in 0..n {
        let mut pos: Option<usize> = None;
        let mut neg: Option<usize> = None;
        for j in 0..n {
            if j == i {
                continue;
            }
            let d = dist[i * n + j];
            if labels[j] == labels[i] {
                if pos.is_none_or(|p| d > dist[i * n + p]) {
                    pos = Some(j);
                }
            } else if neg.is_none_or(|q| d < dist[i * n + q]) {
                neg = Some(j);
            }
        }
        let p = pos.ok_or(Error::MissingTripletPartner {
            label: labels[i],
            missing: "positive",
        })?;
        let q = neg.ok_or(Error::MissingTripletPartner {
            label: labels[i],
            missing: "negative",
        })?;
        positives.push(p);
        negatives.push(q);

        let (d_ap, d_an) = (dist[i * n + p], dist[i * n + q]);
        let hinge = d_ap - d_an + cfg.margin;
        if hinge <= 0.0 {
            continue;
        }
        loss += hinge;
        if d_ap > 0.0 {
            for c in 0..e.cols() {
                let g = scale * (e.get(i, c) - e.get(p, c)) / d_ap;
                grad.row_mut(i)[c] += g;
                grad.row_mut(p)[c] -= g;
            }
        }
        if d_an > 0.0 {
            for c in 0..e.cols() {
                let g = scale * (e.get(i, c) - e.get(q, c)) / d_an;
                grad.row_mut(i)[c] -= g;
                grad.row_mut(q)[c] += g;
            }
        }
    }
    Ok(TripletOutput {
        loss: loss * scale,
        grad,
        positives,
        negatives,
    })
}

#[derive(Clone, Debug)]
pub struct SoftmaxOutput {
    pub loss: f64,
    pub grad_embeddings: Matrix,
    pub grad_head: Matrix,
}

/// Cross-entropy of `softmax(E · W)` against `labels`, with max-logit
/// subtraction for stability.
pub fn softmax_ce(e: &Matrix, labels: &[usize], head: &ClassifierHead, reduction: Reduction) -> Result<SoftmaxOutput> {
    let n = e.rows();
    if labels.len() != n {
        return Err(Error::ShapeMismatch {
            op: "softmax_ce",
            left: e.shape(),
            right: (labels.len(), 1),
        });
    }
    let classes = head.num_classes();
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::LabelOutOfRange { label: bad, classes });
    }
    let logits = e.matmul(&head.weight.value)?;
    let scale = reduction.factor(n);
    let mut loss = 0.0;
    let mut g = Matrix::zeros(n, classes);
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = row.iter().map(|l| (l - max).exp()).sum();
        let lse = max + denom.ln();
        loss += lse - row[y];
        let dst = g.row_mut(i);
        for k in 0..classes {
            dst[k] = scale * (row[k] - max).exp() / denom;
        }
        dst[y] -= scale;
    }
    Ok(SoftmaxOutput {
        loss: loss * scale,
        grad_embeddings: g.matmul_t(&head.weight.value)?,
        grad_head: e.t_matmul(&g)?,
    })
}

/// `L = L_cls + L_tri` on one domain's batch.
#[derive(Clone, Debug)]
pub struct DomainLoss {
    pub total: f64,
    pub ce: f64,
    pub triplet: f64,
    pub grad_embeddings: Matrix,
    pub grad_head: Matrix,
}

pub fn domain_loss(e: &Matrix, labels: &[usize], head: &ClassifierHead, cfg: &LossConfig) -> Result<DomainLoss> {
    let ce = softmax_ce(e, labels, head, cfg.reduction)?;
    let tri = triplet_batch_hard(e, labels, cfg)?;
    let total = ce.loss + tri.loss;
    if !total.is_finite() {
        return Err(Error::NonFinite("domain loss".into()));
    }
    Ok(DomainLoss {
        total,
        ce: ce.loss,
        triplet: tri.loss,
        grad_embeddings: ce.grad_embeddings.add(&tri.grad)?,
        grad_head: ce.grad_head,
    })
}

/// Scalar summary of one domain's term.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TermValue {
    pub total: f64,
    pub ce: f64,
    pub triplet: f64,
}

impl From<&DomainLoss> for TermValue {
    fn from(l: &DomainLoss) -> Self {
        Self {
            total: l.total,
            ce: l.ce,
            triplet: l.triplet,
        }
    }
}

/// Value of the joint criterion `L = L^S + L^T` for one step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointLoss {
    pub source: Option<TermValue>,
    pub target: TermValue,
    pub total: f64,
}

/// Forward + backward of `L^S` on the initial encoder; accumulates gradients.
pub fn source_loss_step(
    enc: &mut SingleBranchEncoder,
    x: &Matrix,
    labels: &[usize],
    cfg: &LossConfig,
) -> Result<DomainLoss> {
    let e = enc.forward(x, Mode::Train)?;
    let loss = domain_loss(&e, labels, &enc.head, cfg)?;
    enc.backward(&loss.grad_embeddings)?;
    enc.head.weight.grad.add_assign(&loss.grad_head)?;
    Ok(loss)
}

fn target_head(enc: &TwoBranchEncoder) -> Result<&ClassifierHead> {
    enc.target_head
        .as_ref()
        .ok_or_else(|| Error::Usage("target classifier not initialized".into()))
}

/// Forward + backward of `L = L^S + L^T` (unit weight on both terms),
/// accumulating gradients into every reachable parameter.
///
/// Each batch goes through its own path; with domain-specific batch norm
/// the two passes are independent, so accumulating their gradients equals
/// differentiating the sum.
pub fn joint_loss(
    enc: &mut TwoBranchEncoder,
    source: (&Matrix, &[usize]),
    target: (&Matrix, &[usize]),
    cfg: &LossConfig,
) -> Result<JointLoss> {
    joint_loss_terms(enc, Some(source), target, cfg)
}

/// Like [`joint_loss`], with the source term optional (target-only training).
pub fn joint_loss_terms(
    enc: &mut TwoBranchEncoder,
    source: Option<(&Matrix, &[usize])>,
    target: (&Matrix, &[usize]),
    cfg: &LossConfig,
) -> Result<JointLoss> {
    let (xt, yt) = target;
    if yt.is_empty() || xt.rows() == 0 {
        return Err(Error::EmptyPseudoLabels);
    }
    target_head(enc)?;

    let (src_term, tgt_term) = match source {
        Some((xs, ys)) if enc.config.bn_mode == BnMode::Shared => {
            let (es, et) = enc.forward_mixed(xs, xt)?;
            let ls = domain_loss(&es, ys, &enc.source_head, cfg)?;
            let lt = domain_loss(&et, yt, target_head(enc)?, cfg)?;
            enc.backward_mixed(&ls.grad_embeddings, &lt.grad_embeddings)?;
            enc.source_head.weight.grad.add_assign(&ls.grad_head)?;
            accumulate_target_head(enc, &lt)?;
            (Some(TermValue::from(&ls)), TermValue::from(&lt))
        }
        Some((xs, ys)) => {
            let es = enc.forward(xs, Domain::Source, Mode::Train)?;
            let ls = domain_loss(&es, ys, &enc.source_head, cfg)?;
            enc.backward(Domain::Source, &ls.grad_embeddings)?;
            enc.source_head.weight.grad.add_assign(&ls.grad_head)?;
            let lt = target_step(enc, xt, yt, cfg)?;
            (Some(TermValue::from(&ls)), lt)
        }
        None => (None, target_step(enc, xt, yt, cfg)?),
    };
    let total = src_term.map_or(0.0, |s| s.total) + tgt_term.total;
    Ok(JointLoss {
        source: src_term,
        target: tgt_term,
        total,
    })
}

fn target_step(enc: &mut TwoBranchEncoder, xt: &Matrix, yt: &[usize], cfg: &LossConfig) -> Result<TermValue> {
    let et = enc.forward(xt, Domain::Target, Mode::Train)?;
    let lt = domain_loss(&et, yt, target_head(enc)?, cfg)?;
    enc.backward(Domain::Target, &lt.grad_embeddings)?;
    accumulate_target_head(enc, &lt)?;
    Ok(TermValue::from(&lt))
}

fn accumulate_target_head(enc: &mut TwoBranchEncoder, lt: &DomainLoss) -> Result<()> {
    let head = enc
        .target_head
        .as_mut()
        .ok_or_else(|| Error::Usage("target classifier not initialized".into()))?;
    head.weight.grad.add_assign(&lt.grad_head)
}
