//! Layers with hand-written forward and backward passes, plus Adam and the
//! step learning-rate schedule.
//!
//! Layers cache what their backward pass needs during a train-mode
//! `forward`. Gradients accumulate (`+=`) into each [`Param::grad`], so two
//! forward/backward passes on different batches followed by one optimizer
//! step apply the gradient of the summed loss.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Matrix, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub const ALL: [Domain; 2] = [Domain::Source, Domain::Target];

    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "source" => Ok(Domain::Source),
            "target" => Ok(Domain::Target),
            other => Err(Error::UnknownDomain(other.to_string())),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A trainable array and its accumulated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Matrix,
    pub grad: Matrix,
}

impl Param {
    pub fn new(value: Matrix) -> Self {
        let grad = Matrix::zeros(value.rows(), value.cols());
        Self { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// Named mutable views of every parameter reachable from a module.
pub type ParamRefs<'a> = Vec<(String, &'a mut Param)>;

#[derive(Clone, Debug)]
pub struct LinearLayer {
    /// `in_dim × out_dim`
    pub weight: Param,
    /// `1 × out_dim`
    pub bias: Param,
    cached_input: Option<Matrix>,
}

impl LinearLayer {
    /// He-normal weights (`std = sqrt(2 / in_dim)`), zero bias.
    pub fn new(in_dim: usize, out_dim: usize, rng: &mut Rng) -> Self {
        let std = (2.0 / in_dim as f64).sqrt();
        Self::from_parts(rng.gaussian_matrix(in_dim, out_dim, std), vec![0.0; out_dim])
            .expect("bias length matches weight columns")
    }

    pub fn from_parts(weight: Matrix, bias: Vec<f64>) -> Result<Self> {
        if bias.len() != weight.cols() {
            return Err(Error::ShapeMismatch {
                op: "LinearLayer::from_parts",
                left: weight.shape(),
                right: (1, bias.len()),
            });
        }
        Ok(Self {
            weight: Param::new(weight),
            bias: Param::new(Matrix::row_vector(bias)),
            cached_input: None,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.value.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.value.cols()
    }

    /// `x · W + b` without touching the cache.
    pub fn apply(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.in_dim() {
            return Err(Error::ShapeMismatch {
                op: "linear_forward",
                left: x.shape(),
                right: self.weight.value.shape(),
            });
        }
        let mut out = x.matmul(&self.weight.value)?;
        out.add_row_broadcast(self.bias.value.data())?;
        Ok(out)
    }

    pub fn forward(&mut self, x: &Matrix) -> Result<Matrix> {
        let out = self.apply(x)?;
        self.cached_input = Some(x.clone());
        Ok(out)
    }

    /// Accumulates weight/bias gradients and returns the input gradient.
    pub fn backward(&mut self, grad_out: &Matrix) -> Result<Matrix> {
        let input = self
            .cached_input
            .take()
            .ok_or_else(|| Error::Usage("linear backward called before forward".into()))?;
        if grad_out.shape() != (input.rows(), self.out_dim()) {
            return Err(Error::ShapeMismatch {
                op: "linear_backward",
                left: grad_out.shape(),
                right: (input.rows(), self.out_dim()),
            });
        }
        self.weight.grad.add_assign(&input.t_matmul(grad_out)?)?;
        for (g, s) in self.bias.grad.data_mut().iter_mut().zip(grad_out.column_sums()) {
            *g += s;
        }
        grad_out.matmul_t(&self.weight.value)
    }

    pub fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut ParamRefs<'a>) {
        out.push((format!("{prefix}.weight"), &mut self.weight));
        out.push((format!("{prefix}.bias"), &mut self.bias));
    }
}

#[derive(Clone, Debug, Default)]
pub struct Relu {
    cached_input: Option<Matrix>,
}

impl Relu {
    pub fn apply(x: &Matrix) -> Matrix {
        x.map(|v| v.max(0.0))
    }

    pub fn forward(&mut self, x: &Matrix) -> Matrix {
        self.cached_input = Some(x.clone());
        Self::apply(x)
    }

    pub fn backward(&mut self, grad_out: &Matrix) -> Result<Matrix> {
        let input = self
            .cached_input
            .take()
            .ok_or_else(|| Error::Usage("relu backward called before forward".into()))?;
        if input.shape() != grad_out.shape() {
            return Err(Error::ShapeMismatch {
                op: "relu_backward",
                left: grad_out.shape(),
                right: input.shape(),
            });
        }
        let data = input
            .data()
            .iter()
            .zip(grad_out.data())
            .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
            .collect();
        Matrix::new(input.rows(), input.cols(), data)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    fn fresh(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            var: vec![1.0; dim],
        }
    }
}

#[derive(Clone, Debug)]
struct BnCache {
    normalized: Matrix,
    inv_std: Vec<f64>,
}

/// Batch normalization with shared affine parameters and one running
/// statistics slot per declared domain.
#[derive(Clone, Debug)]
pub struct BatchNormLayer {
    pub gamma: Param,
    pub beta: Param,
    stats: BTreeMap<Domain, RunningStats>,
    pub epsilon: f64,
    pub momentum: f64,
    cache: Option<BnCache>,
    last_mode: Option<Mode>,
}

impl BatchNormLayer {
    pub const DEFAULT_EPSILON: f64 = 1e-5;
    pub const DEFAULT_MOMENTUM: f64 = 0.1;

    pub fn new(dim: usize, domains: &[Domain]) -> Self {
        Self {
            gamma: Param::new(Matrix::filled(1, dim, 1.0)),
            beta: Param::new(Matrix::zeros(1, dim)),
            stats: domains.iter().map(|&d| (d, RunningStats::fresh(dim))).collect(),
            epsilon: Self::DEFAULT_EPSILON,
            momentum: Self::DEFAULT_MOMENTUM,
            cache: None,
            last_mode: None,
        }
    }

    pub fn dim(&self) -> usize {
        self.gamma.value.cols()
    }

    pub fn domains(&self) -> impl Iterator<Item = Domain> + '_ {
        self.stats.keys().copied()
    }

    pub fn stats(&self, domain: Domain) -> Result<&RunningStats> {
        self.stats
            .get(&domain)
            .ok_or_else(|| Error::UnknownDomain(domain.to_string()))
    }

    pub fn stats_mut(&mut self, domain: Domain) -> Result<&mut RunningStats> {
        self.stats
            .get_mut(&domain)
            .ok_or_else(|| Error::UnknownDomain(domain.to_string()))
    }

    pub fn set_stats(&mut self, domain: Domain, stats: RunningStats) -> Result<()> {
        if stats.mean.len() != self.dim() || stats.var.len() != self.dim() {
            return Err(Error::ShapeMismatch {
                op: "BatchNormLayer::set_stats",
                left: (1, stats.mean.len()),
                right: (1, self.dim()),
            });
        }
        *self.stats_mut(domain)? = stats;
        Ok(())
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.dim() {
            return Err(Error::ShapeMismatch {
                op: "batchnorm_forward",
                left: x.shape(),
                right: (1, self.dim()),
            });
        }
        Ok(())
    }

    /// Eval-mode normalization with the stored statistics of `domain`.
    pub fn apply_eval(&self, x: &Matrix, domain: Domain) -> Result<Matrix> {
        self.check_input(x)?;
        let stats = self.stats(domain)?;
        let inv_std: Vec<f64> = stats.var.iter().map(|v| 1.0 / (v + self.epsilon).sqrt()).collect();
        Ok(self.affine(x, &stats.mean, &inv_std))
    }

    fn affine(&self, x: &Matrix, mean: &[f64], inv_std: &[f64]) -> Matrix {
        let gamma = self.gamma.value.data();
        let beta = self.beta.value.data();
        let mut out = x.clone();
        for i in 0..out.rows() {
            for (c, v) in out.row_mut(i).iter_mut().enumerate() {
                *v = gamma[c] * (*v - mean[c]) * inv_std[c] + beta[c];
            }
        }
        out
    }

    pub fn forward(&mut self, x: &Matrix, domain: Domain, mode: Mode) -> Result<Matrix> {
        if mode == Mode::Eval {
            let out = self.apply_eval(x, domain)?;
            self.cache = None;
            self.last_mode = Some(Mode::Eval);
            return Ok(out);
        }
        self.check_input(x)?;
        if !self.stats.contains_key(&domain) {
            return Err(Error::UnknownDomain(domain.to_string()));
        }
        let n = x.rows();
        if n < 2 {
            return Err(Error::BatchTooSmall(n));
        }
        let mean = x.column_means();
        let mut var = vec![0.0; self.dim()];
        for row in x.iter_rows() {
            for ((v, &xv), &m) in var.iter_mut().zip(row).zip(&mean) {
                *v += (xv - m) * (xv - m);
            }
        }
        var.iter_mut().for_each(|v| *v /= n as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.epsilon).sqrt()).collect();

        let mut normalized = x.clone();
        for i in 0..n {
            for (c, v) in normalized.row_mut(i).iter_mut().enumerate() {
                *v = (*v - mean[c]) * inv_std[c];
            }
        }
        let gamma = self.gamma.value.data();
        let beta = self.beta.value.data();
        let mut out = normalized.clone();
        for i in 0..n {
            for (c, v) in out.row_mut(i).iter_mut().enumerate() {
                *v = gamma[c] * *v + beta[c];
            }
        }

        let momentum = self.momentum;
        let unbias = n as f64 / (n as f64 - 1.0);
        let slot = self.stats.get_mut(&domain).expect("checked above");
        for c in 0..mean.len() {
            slot.mean[c] = (1.0 - momentum) * slot.mean[c] + momentum * mean[c];
            slot.var[c] = (1.0 - momentum) * slot.var[c] + momentum * var[c] * unbias;
        }

        self.cache = Some(BnCache { normalized, inv_std });
        self.last_mode = Some(Mode::Train);
        Ok(out)
    }

    /// Accumulates gamma/beta gradients and returns the input gradient.
    pub fn backward(&mut self, grad_out: &Matrix) -> Result<Matrix> {
        let cache = match (self.cache.take(), self.last_mode) {
            (Some(c), _) => c,
            (None, Some(Mode::Eval)) => {
                return Err(Error::Usage(
                    "batchnorm backward called after an eval-mode forward".into(),
                ))
            }
            (None, _) => return Err(Error::Usage("batchnorm backward called before forward".into())),
        };
        let xhat = &cache.normalized;
        if grad_out.shape() != xhat.shape() {
            return Err(Error::ShapeMismatch {
                op: "batchnorm_backward",
                left: grad_out.shape(),
                right: xhat.shape(),
            });
        }
        let n = xhat.rows() as f64;
        let dim = self.dim();
        let gamma = self.gamma.value.data().to_vec();

        let mut sum_g = vec![0.0; dim];
        let mut sum_g_xhat = vec![0.0; dim];
        for (g_row, x_row) in grad_out.iter_rows().zip(xhat.iter_rows()) {
            for c in 0..dim {
                sum_g[c] += g_row[c];
                sum_g_xhat[c] += g_row[c] * x_row[c];
            }
        }
        for c in 0..dim {
            self.gamma.grad.data_mut()[c] += sum_g_xhat[c];
            self.beta.grad.data_mut()[c] += sum_g[c];
        }

        // dx = γ·inv_std/N · (N·g − Σg − x̂·Σ(g·x̂))
        let mut grad_in = Matrix::zeros(xhat.rows(), dim);
        for i in 0..xhat.rows() {
            let g_row = grad_out.row(i);
            let x_row = xhat.row(i);
            let dst = grad_in.row_mut(i);
            for c in 0..dim {
                dst[c] = gamma[c] * cache.inv_std[c] / n * (n * g_row[c] - sum_g[c] - x_row[c] * sum_g_xhat[c]);
            }
        }
        Ok(grad_in)
    }

    pub fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut ParamRefs<'a>) {
        out.push((format!("{prefix}.gamma"), &mut self.gamma));
        out.push((format!("{prefix}.beta"), &mut self.beta));
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 3.5e-4,
            weight_decay: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct AdamSlot {
    m: Matrix,
    v: Matrix,
    step: u64,
}

/// Adam with classic L2 weight decay (`g ← g + λθ` before the moment updates).
///
/// Moments and the step counter are kept per named parameter so that one
/// parameter (e.g. a freshly re-initialized classifier) can be reset
/// without disturbing the others.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    slots: BTreeMap<String, AdamSlot>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            slots: BTreeMap::new(),
        }
    }

    pub fn step_count(&self, name: &str) -> u64 {
        self.slots.get(name).map_or(0, |s| s.step)
    }

    /// Forgets the state of every parameter whose name starts with `prefix`.
    pub fn reset(&mut self, prefix: &str) {
        self.slots.retain(|name, _| !name.starts_with(prefix));
    }

    /// Applies one update with learning rate `lr` to every listed parameter.
    /// Nothing is modified if any gradient is non-finite or mis-shaped.
    pub fn step(&mut self, params: &mut [(String, &mut Param)], lr: f64) -> Result<()> {
        for (name, p) in params.iter() {
            if p.grad.shape() != p.value.shape() {
                return Err(Error::ShapeMismatch {
                    op: "adam_step",
                    left: p.grad.shape(),
                    right: p.value.shape(),
                });
            }
            if let Some(slot) = self.slots.get(name) {
                if slot.m.shape() != p.value.shape() {
                    return Err(Error::ShapeMismatch {
                        op: "adam_step",
                        left: slot.m.shape(),
                        right: p.value.shape(),
                    });
                }
            }
            if !p.grad.is_finite() {
                return Err(Error::NonFinite(format!("gradient of {name}")));
            }
        }
        let AdamConfig {
            weight_decay,
            beta1,
            beta2,
            epsilon,
            ..
        } = self.config;
        for (name, p) in params.iter_mut() {
            let (rows, cols) = p.value.shape();
            let slot = self.slots.entry(name.clone()).or_insert_with(|| AdamSlot {
                m: Matrix::zeros(rows, cols),
                v: Matrix::zeros(rows, cols),
                step: 0,
            });
            slot.step += 1;
            let bc1 = 1.0 - beta1.powi(slot.step as i32);
            let bc2 = 1.0 - beta2.powi(slot.step as i32);
            let values = p.value.data_mut();
            let grads = p.grad.data();
            let m = slot.m.data_mut();
            let v = slot.v.data_mut();
            for i in 0..values.len() {
                let g = grads[i] + weight_decay * values[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                values[i] -= lr * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}

/// Step schedule: `initial_lr · decay_factor^(#decay epochs ≤ epoch)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub initial_lr: f64,
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
}

impl LrSchedule {
    pub fn constant(lr: f64) -> Self {
        Self {
            initial_lr: lr,
            decay_epochs: Vec::new(),
            decay_factor: 1.0,
        }
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let decays = self.decay_epochs.iter().filter(|&&e| e <= epoch).count();
        self.initial_lr * self.decay_factor.powi(decays as i32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_difference, relative_error};

    fn weighted_sum(y: &Matrix, w: &Matrix) -> f64 {
        y.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
    }

    #[test]
    fn linear_identity_and_hand_example() {
        let mut layer = LinearLayer::from_parts(Matrix::identity(2), vec![0.0, 0.0]).unwrap();
        let x = Matrix::from_rows(&[vec![1.5, -2.0], vec![0.25, 4.0]]).unwrap();
        assert_eq!(layer.forward(&x).unwrap(), x);

        let layer = LinearLayer::from_parts(Matrix::identity(2), vec![1.0, 2.0]).unwrap();
        let out = layer.apply(&Matrix::from_rows(&[vec![1.0, 1.0]]).unwrap()).unwrap();
        assert_eq!(out.data(), &[2.0, 3.0]);
    }

    #[test]
    fn linear_shape_mismatch() {
        let mut rng = Rng::new(0);
        let mut layer = LinearLayer::new(3, 2, &mut rng);
        assert!(layer.forward(&Matrix::zeros(4, 5)).is_err());
    }

    #[test]
    fn linear_gradients_match_finite_differences() {
        let mut rng = Rng::new(5);
        let layer = LinearLayer::new(4, 3, &mut rng);
        let x = rng.gaussian_matrix(6, 4, 1.0);
        let probe = rng.gaussian_matrix(6, 3, 1.0);

        let mut l = layer.clone();
        l.forward(&x).unwrap();
        let gx = l.backward(&probe).unwrap();

        let num_x = finite_difference(x.data(), 1e-5, |v| {
            let xm = Matrix::new(6, 4, v.to_vec()).unwrap();
            weighted_sum(&layer.apply(&xm).unwrap(), &probe)
        });
        assert!(relative_error(gx.data(), &num_x) < 1e-6);

        let num_w = finite_difference(layer.weight.value.data(), 1e-5, |v| {
            let mut l2 = layer.clone();
            l2.weight.value = Matrix::new(4, 3, v.to_vec()).unwrap();
            weighted_sum(&l2.apply(&x).unwrap(), &probe)
        });
        assert!(relative_error(l.weight.grad.data(), &num_w) < 1e-6);

        let num_b = finite_difference(layer.bias.value.data(), 1e-5, |v| {
            let mut l2 = layer.clone();
            l2.bias.value = Matrix::row_vector(v.to_vec());
            weighted_sum(&l2.apply(&x).unwrap(), &probe)
        });
        assert!(relative_error(l.bias.grad.data(), &num_b) < 1e-6);
    }

    #[test]
    fn relu_trivial_cases_and_usage_error() {
        let mut relu = Relu::default();
        assert!(relu.backward(&Matrix::zeros(1, 1)).is_err());
        let neg = Matrix::filled(2, 3, -1.5);
        assert_eq!(relu.forward(&neg), Matrix::zeros(2, 3));
        let pos = Matrix::filled(2, 3, 0.7);
        assert_eq!(relu.forward(&pos), pos);
    }

    #[test]
    fn relu_gradient_away_from_kink() {
        let mut rng = Rng::new(8);
        let x = rng
            .gaussian_matrix(5, 4, 1.0)
            .map(|v| if v.abs() < 1e-3 { 0.5 } else { v });
        let probe = rng.gaussian_matrix(5, 4, 1.0);
        let mut relu = Relu::default();
        relu.forward(&x);
        let g = relu.backward(&probe).unwrap();
        let num = finite_difference(x.data(), 1e-5, |v| {
            weighted_sum(&Relu::apply(&Matrix::new(5, 4, v.to_vec()).unwrap()), &probe)
        });
        assert!(relative_error(g.data(), &num) < 1e-6);
    }

    #[test]
    fn batchnorm_standardized_input_passes_through() {
        // columns with mean 0 and biased variance 1
        let x = Matrix::from_rows(&[vec![1.0, -1.0], vec![-1.0, 1.0], vec![1.0, 1.0], vec![-1.0, -1.0]]).unwrap();
        let mut bn = BatchNormLayer::new(2, &Domain::ALL);
        let y = bn.forward(&x, Domain::Source, Mode::Train).unwrap();
        assert!(y.max_abs_diff(&x) < 1e-5);
    }

    #[test]
    fn batchnorm_constant_column_maps_to_beta() {
        let x = Matrix::from_rows(&[vec![3.0, 1.0], vec![3.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let mut bn = BatchNormLayer::new(2, &Domain::ALL);
        bn.beta.value = Matrix::row_vector(vec![0.25, 0.0]);
        let y = bn.forward(&x, Domain::Target, Mode::Train).unwrap();
        for i in 0..3 {
            assert_eq!(y.get(i, 0), 0.25);
        }
    }

    #[test]
    fn batchnorm_train_touches_only_its_domain() {
        let mut rng = Rng::new(1);
        let mut bn = BatchNormLayer::new(3, &Domain::ALL);
        bn.forward(&rng.gaussian_matrix(8, 3, 2.0), Domain::Target, Mode::Train)
            .unwrap();
        let before = bn.stats(Domain::Target).unwrap().clone();
        bn.forward(&rng.gaussian_matrix(8, 3, 5.0), Domain::Source, Mode::Train)
            .unwrap();
        assert_eq!(bn.stats(Domain::Target).unwrap(), &before);
        assert_ne!(bn.stats(Domain::Source).unwrap(), &before);
    }

    #[test]
    fn batchnorm_errors() {
        let mut bn = BatchNormLayer::new(2, &[Domain::Source]);
        assert!(matches!(
            bn.forward(&Matrix::zeros(1, 2), Domain::Source, Mode::Train),
            Err(Error::BatchTooSmall(1))
        ));
        assert!(matches!(
            bn.forward(&Matrix::zeros(4, 2), Domain::Target, Mode::Train),
            Err(Error::UnknownDomain(_))
        ));
        bn.forward(&Matrix::zeros(4, 2), Domain::Source, Mode::Eval).unwrap();
        assert!(matches!(bn.backward(&Matrix::zeros(4, 2)), Err(Error::Usage(_))));
    }

    #[test]
    fn batchnorm_zero_gamma_and_zero_grad() {
        let mut rng = Rng::new(2);
        let x = rng.gaussian_matrix(6, 3, 1.0);
        let mut bn = BatchNormLayer::new(3, &Domain::ALL);
        bn.gamma.value = Matrix::zeros(1, 3);
        bn.forward(&x, Domain::Source, Mode::Train).unwrap();
        let g = bn.backward(&rng.gaussian_matrix(6, 3, 1.0)).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));

        let mut bn = BatchNormLayer::new(3, &Domain::ALL);
        bn.forward(&x, Domain::Source, Mode::Train).unwrap();
        let g = bn.backward(&Matrix::zeros(6, 3)).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
        assert!(bn.gamma.grad.data().iter().all(|&v| v == 0.0));
        assert!(bn.beta.grad.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn batchnorm_gradients_match_finite_differences() {
        let mut rng = Rng::new(21);
        let mut bn = BatchNormLayer::new(4, &Domain::ALL);
        bn.gamma.value = rng.gaussian_matrix(1, 4, 1.0);
        bn.beta.value = rng.gaussian_matrix(1, 4, 1.0);
        let x = rng.gaussian_matrix(7, 4, 2.0);
        let probe = rng.gaussian_matrix(7, 4, 1.0);

        let mut b = bn.clone();
        b.forward(&x, Domain::Source, Mode::Train).unwrap();
        let gx = b.backward(&probe).unwrap();

        let eval = |layer: &BatchNormLayer, input: &Matrix| {
            let mut l = layer.clone();
            weighted_sum(&l.forward(input, Domain::Source, Mode::Train).unwrap(), &probe)
        };
        let num_x = finite_difference(x.data(), 1e-5, |v| eval(&bn, &Matrix::new(7, 4, v.to_vec()).unwrap()));
        assert!(relative_error(gx.data(), &num_x) < 1e-5);
        let num_gamma = finite_difference(bn.gamma.value.data(), 1e-5, |v| {
            let mut l = bn.clone();
            l.gamma.value = Matrix::row_vector(v.to_vec());
            eval(&l, &x)
        });
        assert!(relative_error(b.gamma.grad.data(), &num_gamma) < 1e-5);
        let num_beta = finite_difference(bn.beta.value.data(), 1e-5, |v| {
            let mut l = bn.clone();
            l.beta.value = Matrix::row_vector(v.to_vec());
            eval(&l, &x)
        });
        assert!(relative_error(b.beta.grad.data(), &num_beta) < 1e-5);
    }

    #[test]
    fn batchnorm_train_output_is_standardized() {
        let mut rng = Rng::new(4);
        let x = rng.gaussian_matrix(16, 5, 3.0).map(|v| v + 7.0);
        let mut bn = BatchNormLayer::new(5, &Domain::ALL);
        bn.epsilon = 0.0;
        let y = bn.forward(&x, Domain::Target, Mode::Train).unwrap();
        for (c, m) in y.column_means().iter().enumerate() {
            assert!(m.abs() < 1e-9);
            let var: f64 = (0..16).map(|i| y.get(i, c).powi(2)).sum::<f64>() / 16.0;
            assert!((var - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn batchnorm_interleaving_does_not_change_per_domain_stats() {
        let mut rng = Rng::new(6);
        let src: Vec<Matrix> = (0..4).map(|_| rng.gaussian_matrix(5, 3, 1.0)).collect();
        let tgt: Vec<Matrix> = (0..4).map(|_| rng.gaussian_matrix(5, 3, 4.0)).collect();

        let mut separate = BatchNormLayer::new(3, &Domain::ALL);
        for b in &src {
            separate.forward(b, Domain::Source, Mode::Train).unwrap();
        }
        for b in &tgt {
            separate.forward(b, Domain::Target, Mode::Train).unwrap();
        }
        let mut interleaved = BatchNormLayer::new(3, &Domain::ALL);
        for (s, t) in src.iter().zip(&tgt) {
            interleaved.forward(t, Domain::Target, Mode::Train).unwrap();
            interleaved.forward(s, Domain::Source, Mode::Train).unwrap();
        }
        for d in Domain::ALL {
            assert_eq!(separate.stats(d).unwrap(), interleaved.stats(d).unwrap());
        }
    }

    #[test]
    fn adam_zero_gradient_without_decay_is_noop() {
        let mut p = Param::new(Matrix::from_rows(&[vec![1.0, -2.0]]).unwrap());
        let before = p.value.clone();
        let mut adam = Adam::new(AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        });
        for _ in 0..3 {
            adam.step(&mut [("p".to_string(), &mut p)], 1e-3).unwrap();
        }
        assert_eq!(p.value, before);
        assert_eq!(adam.step_count("p"), 3);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        for g in [3.7, -0.02, 1e4] {
            let mut p = Param::new(Matrix::row_vector(vec![0.5]));
            p.grad = Matrix::row_vector(vec![g]);
            let mut adam = Adam::new(AdamConfig {
                weight_decay: 0.0,
                ..AdamConfig::default()
            });
            adam.step(&mut [("p".to_string(), &mut p)], 0.001).unwrap();
            let moved = p.value.get(0, 0) - 0.5;
            assert!((moved + 0.001 * g.signum()).abs() < 1e-8, "{moved}");
        }
    }

    #[test]
    fn adam_zero_lr_is_noop() {
        let mut rng = Rng::new(12);
        let mut p = Param::new(rng.gaussian_matrix(3, 3, 1.0));
        p.grad = rng.gaussian_matrix(3, 3, 1.0);
        let before = p.value.clone();
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(&mut [("p".to_string(), &mut p)], 0.0).unwrap();
        assert_eq!(p.value, before);
    }

    #[test]
    fn adam_rejects_non_finite_and_bad_shapes() {
        let mut p = Param::new(Matrix::zeros(1, 2));
        p.grad = Matrix::row_vector(vec![1.0, f64::NAN]);
        let mut adam = Adam::new(AdamConfig::default());
        let err = adam.step(&mut [("head.w".to_string(), &mut p)], 1e-3).unwrap_err();
        assert!(err.to_string().contains("head.w"));
        p.grad = Matrix::zeros(2, 1);
        assert!(adam.step(&mut [("head.w".to_string(), &mut p)], 1e-3).is_err());
    }

    /// Straightforward Adam over flat vectors, kept independent of `Adam`.
    fn reference_adam(theta: &mut [f64], grads: &[Vec<f64>], lr: f64, wd: f64) {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        let mut m = vec![0.0; theta.len()];
        let mut v = vec![0.0; theta.len()];
        for (t, g) in grads.iter().enumerate() {
            let t = (t + 1) as i32;
            for i in 0..theta.len() {
                let gi = g[i] + wd * theta[i];
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                let mh = m[i] / (1.0 - b1.powi(t));
                let vh = v[i] / (1.0 - b2.powi(t));
                theta[i] -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }

    #[test]
    fn adam_matches_reference_over_100_steps() {
        let mut rng = Rng::new(77);
        let init = rng.gaussian_vec(10, 1.0);
        let grads: Vec<Vec<f64>> = (0..100).map(|_| rng.gaussian_vec(10, 1.0)).collect();

        let mut expected = init.clone();
        reference_adam(&mut expected, &grads, 0.01, 5e-4);

        let mut p = Param::new(Matrix::new(2, 5, init).unwrap());
        let mut adam = Adam::new(AdamConfig {
            weight_decay: 5e-4,
            ..AdamConfig::default()
        });
        for g in &grads {
            p.grad = Matrix::new(2, 5, g.clone()).unwrap();
            adam.step(&mut [("p".to_string(), &mut p)], 0.01).unwrap();
        }
        let diff = p
            .value
            .data()
            .iter()
            .zip(&expected)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-10, "{diff}");
    }

    #[test]
    fn lr_schedule_values() {
        let s = LrSchedule {
            initial_lr: 0.00035,
            decay_epochs: vec![40, 70],
            decay_factor: 0.1,
        };
        let close = |a: f64, b: f64| ((a - b) / b).abs() < 1e-12;
        assert_eq!(s.lr_at(0), 0.00035);
        assert!(close(s.lr_at(39), 0.00035));
        assert!(close(s.lr_at(40), 0.000035));
        assert!(close(s.lr_at(69), 0.000035));
        assert!(close(s.lr_at(70), 0.0000035));
        let mut prev = f64::INFINITY;
        for e in 0..100 {
            assert!(s.lr_at(e) <= prev);
            prev = s.lr_at(e);
        }
    }
}
