//! Central finite-difference utilities and the gradient-check suite run by
//! the `gradcheck` command.

use serde::Serialize;

use crate::encoder::{ClassifierHead, EncoderConfig, SingleBranchEncoder, TwoBranchEncoder};
use crate::error::Result;
use crate::losses::{self, LossConfig, Reduction};
use crate::nn::{BatchNormLayer, Domain, LinearLayer, Mode, Param, Relu};
use crate::tensor::{Matrix, Rng};

/// Central differences `(f(x + h·e_i) − f(x − h·e_i)) / 2h` for every coordinate.
pub fn finite_difference(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let plus = f(&probe);
            probe[i] = x[i] - h;
            let minus = f(&probe);
            probe[i] = x[i];
            (plus - minus) / (2.0 * h)
        })
        .collect()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, or 0 when both vectors are (numerically) zero.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale < 1e-12 {
        0.0
    } else {
        diff / scale
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub seed: u64,
    pub relative_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

const STEP: f64 = 1e-5;

fn record(out: &mut Vec<CheckResult>, name: &str, seed: u64, analytic: &[f64], numeric: &[f64], tol: f64) {
    let err = relative_error(analytic, numeric);
    out.push(CheckResult {
        name: name.to_string(),
        seed,
        relative_error: err,
        tolerance: tol,
        passed: err < tol,
    });
}

fn probe_sum(y: &Matrix, probe: &Matrix) -> f64 {
    y.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum()
}

/// Runs every finite-difference check with one seed.
pub fn run_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    check_linear(seed, &mut out)?;
    check_relu(seed, &mut out)?;
    check_batchnorm(seed, &mut out)?;
    check_triplet(seed, &mut out)?;
    check_softmax(seed, &mut out)?;
    check_single_branch(seed, &mut out)?;
    check_joint(seed, &mut out)?;
    Ok(out)
}

fn check_linear(seed: u64, out: &mut Vec<CheckResult>) -> Result<()> {
    let mut rng = Rng::stream(seed, 101);
    let layer = LinearLayer::new(5, 4, &mut rng);
    let x = rng.gaussian_matrix(6, 5, 1.0);
    let probe = rng.gaussian_matrix(6, 4, 1.0);
    let mut l = layer.clone();
    l.forward(&x)?;
    let gx = l.backward(&probe)?;
    let num = finite_difference(x.data(), STEP, |v| {
        probe_sum(&layer.apply(&Matrix::new(6, 5, v.to_vec()).unwrap()).unwrap(), &probe)
    });
    record(out, "linear.input", seed, gx.data(), &num, 1e-6);
    let num = finite_difference(layer.weight.value.data(), STEP, |v| {
        let mut l2 = layer.clone();
        l2.weight.value = Matrix::new(5, 4, v.to_vec()).unwrap();
        probe_sum(&l2.apply(&x).unwrap(), &probe)
    });
    record(out, "linear.weight", seed, l.weight.grad.data(), &num, 1e-6);
    Ok(())
}

fn check_relu(seed: u64, out: &mut Vec<CheckResult>) -> Result<()> {
    let mut rng = Rng::stream(seed, 102);
    let x = rng
        .gaussian_matrix(6, 5, 1.0)
        .map(|v| if v.abs() < 1e-3 { 0.1 } else { v });
    let probe = rng.gaussian_matrix(6, 5, 1.0);
    let mut relu = Relu::default();
    relu.forward(&x);
    let g = relu.backward(&probe)?;
    let num = finite_difference(x.data(), STEP, |v| {
        probe_sum(&Relu::apply(&Matrix::new(6, 5, v.to_vec()).unwrap()), &probe)
    });
    record(out, "relu.input", seed, g.data(), &num, 1e-6);
    Ok(())
}

fn check_batchnorm(seed: u64, out: &mut Vec<CheckResult>) -> Result<()> {
    let mut rng = Rng::stream(seed, 103);
    let mut bn = BatchNormLayer::new(4, &Domain::ALL);
    bn.gamma.value = rng.gaussian_matrix(1, 4, 1.0);
    bn.beta.value = rng.gaussian_matrix(1, 4, 1.0);
    let x = rng.gaussian_matrix(8, 4, 2.0);
    let probe = rng.gaussian_matrix(8, 4, 1.0);
    let mut b = bn.clone();
    b.forward(&x, Domain::Source, Mode::Train)?;
    let gx = b.backward(&probe)?;
    let eval = |layer: &BatchNormLayer, input: &Matrix| {
        let mut l = layer.clone();
        probe_sum(&l.forward(input, Domain::Source, Mode::Train).unwrap(), &probe)
    };
    let num = finite_difference(x.data(), STEP, |v| eval(&bn, &Matrix::new(8, 4, v.to_vec()).unwrap()));
    record(out, "batchnorm.input", seed, gx.data(), &num, 1e-5);
    let num = finite_difference(bn.gamma.value.data(), STEP, |v| {
        let mut l = bn.clone();
        l.gamma.value = Matrix::row_vector(v.to_vec());
        eval(&l, &x)
    });
    record(out, "batchnorm.gamma", seed, b.gamma.grad.data(), &num, 1e-5);
    let num = finite_difference(bn.beta.value.data(), STEP, |v| {
        let mut l = bn.clone();
        l.beta.value = Matrix::row_vector(v.to_vec());
        eval(&l, &x)
    });
    record(out, "batchnorm.beta", seed, b.beta.grad.data(), &num, 1e-5);
    Ok(())
}

/// Random PK-shaped labels: `ids` identities × `shots` rows each.
fn pk_labels(ids: usize, shots: usize) -> Vec<usize> {
    (0..ids).flat_map(|i| std::iter::repeat_n(i, shots)).collect()
}

fn check_triplet(seed: u64, out: &mut Vec<CheckResult>) -> Result<()> {
    let mut rng = Rng::stream(seed, 104);
    let labels = pk_labels(3, 3);
    let e = rng.gaussian_matrix(labels.len(), 4, 1.0);
    let cfg = LossConfig {
        margin: 0.3,
        reduction: Reduction::Sum,
    };
    let res = losses::triplet_batch_hard(&e, &labels, &cfg)?;
    let num = finite_difference(e.data(), STEP, |v| {
        let m = Matrix::new(e.rows(), e.cols(), v.to_vec()).unwrap();
        losses::triplet_batch_hard(&m, &labels, &cfg).unwrap().loss
    });
    record(out, "triplet.embeddings", seed, res.grad.data(), &num, 1e-5);
    Ok(())
}

fn check_softmax(seed: u64, out: &mut Vec<CheckResult>) -> Result<()> {
    let mut rng = Rng::stream(seed, 105);
    let labels = vec![0, 2, 1, 3, 2, 0];
    let e = rng.gaussian_matrix(labels.len(), 5, 1.0);
    let head = ClassifierHead::from_weight(rng.gaussian_matrix(5, 4, 1.0));
    let res = losses::softmax_ce(&e, &labels, &head, Reduction::Sum)?;
    let num = finite_difference(e.data(), STEP, |v| {
        let m = Matrix::new(e.rows(), e.cols(), v.to_vec()).unwrap();
        losses::softmax_ce(&m, &labels, &head, Reduction::Sum).unwrap().loss
    });
    record(
        out,
        "softmax_ce.embeddings",
        seed,
        res.grad_embeddings.data(),
        &num,
        1e-6,
    );
    let num = finite_difference(head.weight.value.data(), STEP, |v| {
        let h = ClassifierHead::from_weight(Matrix::new(5, 4, v.to_vec()).unwrap());
        losses::softmax_ce(&e, &labels, &h, Reduction::Sum).unwrap().loss
    });
    record(out, "softmax_ce.head", seed, res.grad_head.data(), &num, 1e-6);
    Ok(())
}

fn small_config(shared_depth: usize) -> EncoderConfig {
    EncoderConfig {
        input_dim: 5,
        block_dims: vec![6, 6],
        embed_dim: 4,
        shared_depth,
        ..EncoderConfig::default()
    }
}

/// Collects a flat copy of every parameter value and analytic gradient.
fn flatten(params: &[(String, &mut Param)]) -> (Vec<f64>, Vec<f64>) {
    let mut values = Vec::new();
    let mut grads = Vec::new();
    for (_, p) in params {
        values.extend_from_slice(p.value.data());
        grads.extend_from_slice(p.grad.data());
    }
    (values, grads)
}

fn unflatten(params: &mut [(String, &mut Param)], values: &[f64]) {
    let mut offset = 0;
    for (_, p) in params.iter_mut() {
        let n = p.value.len();
        p.value.data_mut().copy_from_slice(&values[offset..offset + n]);
        offset += n;
    }
}

fn check_single_branch(seed: u64, out: &mut Vec<CheckResult>) -> Result<()> {
    let mut rng = Rng::stream(seed, 106);
    let cfg = small_config(2);
    let labels = pk_labels(3, 3);
    let mut enc = SingleBranchEncoder::new(cfg, 3, &mut rng)?;
    enc.head.weight.value = rng.gaussian_matrix(4, 3, 0.5);
    let x = rng.gaussian_matrix(labels.len(), 5, 1.0);
    let loss_cfg = LossConfig::default();

    enc.zero_grad();
    losses::source_loss_step(&mut enc, &x, &labels, &loss_cfg)?;
    let (values, grads) = flatten(&enc.params_mut());
    let base = enc.clone();
    let num = finite_difference(&values, STEP, |v| {
        let mut e = base.clone();
        unflatten(&mut e.params_mut(), v);
        let emb = e.forward(&x, Mode::Train).unwrap();
        losses::domain_loss(&emb, &labels, &e.head, &loss_cfg).unwrap().total
    });
    record(out, "encoder.single_branch", seed, &grads, &num, 1e-5);
    Ok(())
}

fn check_joint(seed: u64, out: &mut Vec<CheckResult>) -> Result<()> {
    let mut rng = Rng::stream(seed, 107);
    let loss_cfg = LossConfig::default();
    let src_labels = pk_labels(3, 3);
    let tgt_labels = pk_labels(2, 4);
    let xs = rng.gaussian_matrix(src_labels.len(), 5, 1.0);
    let xt = rng.gaussian_matrix(tgt_labels.len(), 5, 1.0).map(|v| 0.5 * v + 0.3);
    for shared_depth in [0, 1, 2] {
        let cfg = small_config(shared_depth);
        let init = SingleBranchEncoder::new(cfg.clone(), 3, &mut rng)?;
        let mut enc = TwoBranchEncoder::from_init(&init, cfg)?;
        enc.reinit_target_head(2, &mut rng)?;
        // Perturb the target branch so both paths differ.
        for (_, p) in enc.params_mut(&[Domain::Target]) {
            let noise = rng.gaussian_matrix(p.value.rows(), p.value.cols(), 0.1);
            p.value.add_assign(&noise)?;
        }
        enc.source_head.weight.value = rng.gaussian_matrix(4, 3, 0.5);

        enc.zero_grad();
        losses::joint_loss(&mut enc, (&xs, &src_labels), (&xt, &tgt_labels), &loss_cfg)?;
        let (values, grads) = flatten(&enc.params_mut(&Domain::ALL));
        let base = enc.clone();
        let num = finite_difference(&values, STEP, |v| {
            let mut e = base.clone();
            unflatten(&mut e.params_mut(&Domain::ALL), v);
            let es = e.forward(&xs, Domain::Source, Mode::Train).unwrap();
            let ls = losses::domain_loss(&es, &src_labels, &e.source_head, &loss_cfg).unwrap();
            let et = e.forward(&xt, Domain::Target, Mode::Train).unwrap();
            let head = e.target_head.as_ref().unwrap();
            let lt = losses::domain_loss(&et, &tgt_labels, head, &loss_cfg).unwrap();
            ls.total + lt.total
        });
        record(
            out,
            &format!("joint_objective.shared_depth_{shared_depth}"),
            seed,
            &grads,
            &num,
            1e-5,
        );
    }
    Ok(())
}
