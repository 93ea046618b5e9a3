//! Single- and two-branch feature encoders.
//!
//! A block is `Linear → BatchNorm → ReLU`; the embedding layer is a bare
//! `Linear`. The two-branch encoder routes every input through a shared
//! trunk of `shared_depth` blocks, then through the source or target branch
//! (remaining blocks plus embedding). With `shared_depth == L` the two
//! branches are one object and the model is fully shared.
//!
//! Batch-norm affine parameters are shared wherever the layer is shared;
//! only running statistics are kept per domain. In [`BnMode::Shared`] every
//! layer has a single statistics slot (keyed `Domain::Source`) used by both
//! domains, and joint training feeds the two batches as one mixed batch.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{BatchNormLayer, Domain, LinearLayer, Mode, Param, ParamRefs, Relu, RunningStats};
use crate::tensor::{Matrix, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BnMode {
    #[default]
    DomainSpecific,
    Shared,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub block_dims: Vec<usize>,
    pub embed_dim: usize,
    /// Number of leading blocks shared by both paths, in `0..=block_dims.len()`.
    pub shared_depth: usize,
    pub bn_mode: BnMode,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            input_dim: 32,
            block_dims: vec![64, 64, 64, 64],
            embed_dim: 32,
            shared_depth: 3,
            bn_mode: BnMode::DomainSpecific,
        }
    }
}

impl EncoderConfig {
    pub fn depth(&self) -> usize {
        self.block_dims.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.embed_dim == 0 || self.block_dims.contains(&0) {
            return Err(Error::InvalidConfig("encoder dimensions must be positive".into()));
        }
        if self.shared_depth > self.depth() {
            return Err(Error::InvalidConfig(format!(
                "shared_depth {} exceeds block count {}",
                self.shared_depth,
                self.depth()
            )));
        }
        Ok(())
    }

    /// Input width of block `i` (or of the embedding layer when `i == L`).
    fn width_before(&self, i: usize) -> usize {
        if i == 0 {
            self.input_dim
        } else {
            self.block_dims[i - 1]
        }
    }

    fn stat_domains(&self) -> &'static [Domain] {
        match self.bn_mode {
            BnMode::DomainSpecific => &Domain::ALL,
            BnMode::Shared => &[Domain::Source],
        }
    }

    /// Which statistics slot a batch of `domain` uses.
    fn stats_slot(&self, domain: Domain) -> Domain {
        match self.bn_mode {
            BnMode::DomainSpecific => domain,
            BnMode::Shared => Domain::Source,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Block {
    pub linear: LinearLayer,
    pub bn: BatchNormLayer,
    relu: Relu,
}

impl Block {
    fn new(in_dim: usize, out_dim: usize, domains: &[Domain], rng: &mut Rng) -> Self {
        Self {
            linear: LinearLayer::new(in_dim, out_dim, rng),
            bn: BatchNormLayer::new(out_dim, domains),
            relu: Relu::default(),
        }
    }

    /// Copy of `other` whose statistics slots are `domains`, each seeded from
    /// `other`'s `seed_slot` statistics.
    fn reslotted(other: &Block, domains: &[Domain], seed_slot: Domain) -> Result<Self> {
        let mut bn = BatchNormLayer::new(other.bn.dim(), domains);
        bn.gamma.value = other.bn.gamma.value.clone();
        bn.beta.value = other.bn.beta.value.clone();
        bn.epsilon = other.bn.epsilon;
        bn.momentum = other.bn.momentum;
        let seed = other.bn.stats(seed_slot)?.clone();
        for &d in domains {
            bn.set_stats(d, seed.clone())?;
        }
        let mut linear = other.linear.clone();
        linear.weight.zero_grad();
        linear.bias.zero_grad();
        Ok(Self {
            linear,
            bn,
            relu: Relu::default(),
        })
    }

    fn forward(&mut self, x: &Matrix, slot: Domain, mode: Mode) -> Result<Matrix> {
        let h = self.linear.forward(x)?;
        let h = self.bn.forward(&h, slot, mode)?;
        Ok(self.relu.forward(&h))
    }

    fn infer(&self, x: &Matrix, slot: Domain) -> Result<Matrix> {
        let h = self.linear.apply(x)?;
        let h = self.bn.apply_eval(&h, slot)?;
        Ok(Relu::apply(&h))
    }

    fn backward(&mut self, grad: &Matrix) -> Result<Matrix> {
        let g = self.relu.backward(grad)?;
        let g = self.bn.backward(&g)?;
        self.linear.backward(&g)
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut ParamRefs<'a>) {
        self.linear.params_mut(&format!("{prefix}.linear"), out);
        self.bn.params_mut(&format!("{prefix}.bn"), out);
    }
}

/// A run of blocks, optionally followed by the embedding layer.
#[derive(Clone, Debug)]
pub struct Stack {
    /// Global index of the first block (for parameter names).
    first: usize,
    pub blocks: Vec<Block>,
    pub embedding: Option<LinearLayer>,
}

impl Stack {
    fn forward(&mut self, x: &Matrix, slot: Domain, mode: Mode) -> Result<Matrix> {
        let mut h = x.clone();
        for b in &mut self.blocks {
            h = b.forward(&h, slot, mode)?;
        }
        match &mut self.embedding {
            Some(e) => e.forward(&h),
            None => Ok(h),
        }
    }

    fn infer(&self, x: &Matrix, slot: Domain) -> Result<Matrix> {
        let mut h = x.clone();
        for b in &self.blocks {
            h = b.infer(&h, slot)?;
        }
        match &self.embedding {
            Some(e) => e.apply(&h),
            None => Ok(h),
        }
    }

    fn backward(&mut self, grad: &Matrix) -> Result<Matrix> {
        let mut g = match &mut self.embedding {
            Some(e) => e.backward(grad)?,
            None => grad.clone(),
        };
        for b in self.blocks.iter_mut().rev() {
            g = b.backward(&g)?;
        }
        Ok(g)
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut ParamRefs<'a>) {
        let first = self.first;
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.params_mut(&format!("{prefix}.block{}", first + i), out);
        }
        if let Some(e) = &mut self.embedding {
            e.params_mut(&format!("{prefix}.embed"), out);
        }
    }

    fn param_names(&self, prefix: &str) -> Vec<String> {
        let mut names = Vec::new();
        for i in 0..self.blocks.len() {
            let p = format!("{prefix}.block{}", self.first + i);
            for leaf in ["linear.weight", "linear.bias", "bn.gamma", "bn.beta"] {
                names.push(format!("{p}.{leaf}"));
            }
        }
        if self.embedding.is_some() {
            names.push(format!("{prefix}.embed.weight"));
            names.push(format!("{prefix}.embed.bias"));
        }
        names
    }

    fn arrays(&self, prefix: &str, out: &mut Vec<(String, Matrix)>) {
        for (i, b) in self.blocks.iter().enumerate() {
            let p = format!("{prefix}.block{}", self.first + i);
            out.push((format!("{p}.linear.weight"), b.linear.weight.value.clone()));
            out.push((format!("{p}.linear.bias"), b.linear.bias.value.clone()));
            out.push((format!("{p}.bn.gamma"), b.bn.gamma.value.clone()));
            out.push((format!("{p}.bn.beta"), b.bn.beta.value.clone()));
            for d in b.bn.domains() {
                let s = b.bn.stats(d).expect("declared slot");
                out.push((format!("{p}.bn.{d}.mean"), Matrix::row_vector(s.mean.clone())));
                out.push((format!("{p}.bn.{d}.var"), Matrix::row_vector(s.var.clone())));
            }
        }
        if let Some(e) = &self.embedding {
            out.push((format!("{prefix}.embed.weight"), e.weight.value.clone()));
            out.push((format!("{prefix}.embed.bias"), e.bias.value.clone()));
        }
    }

    fn load_arrays(&mut self, prefix: &str, src: &mut ArrayReader<'_>) -> Result<()> {
        let first = self.first;
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let p = format!("{prefix}.block{}", first + i);
            src.take_into(&format!("{p}.linear.weight"), &mut b.linear.weight.value)?;
            src.take_into(&format!("{p}.linear.bias"), &mut b.linear.bias.value)?;
            src.take_into(&format!("{p}.bn.gamma"), &mut b.bn.gamma.value)?;
            src.take_into(&format!("{p}.bn.beta"), &mut b.bn.beta.value)?;
            let domains: Vec<Domain> = b.bn.domains().collect();
            for d in domains {
                let dim = b.bn.dim();
                let mut mean = Matrix::zeros(1, dim);
                let mut var = Matrix::zeros(1, dim);
                src.take_into(&format!("{p}.bn.{d}.mean"), &mut mean)?;
                src.take_into(&format!("{p}.bn.{d}.var"), &mut var)?;
                b.bn.set_stats(
                    d,
                    RunningStats {
                        mean: mean.into_data(),
                        var: var.into_data(),
                    },
                )?;
            }
        }
        if let Some(e) = &mut self.embedding {
            src.take_into(&format!("{prefix}.embed.weight"), &mut e.weight.value)?;
            src.take_into(&format!("{prefix}.embed.bias"), &mut e.bias.value)?;
        }
        Ok(())
    }
}

/// Sequential reader used when restoring a checkpoint.
pub(crate) struct ArrayReader<'a> {
    arrays: std::slice::Iter<'a, (String, Matrix)>,
}

impl<'a> ArrayReader<'a> {
    pub(crate) fn new(arrays: &'a [(String, Matrix)]) -> Self {
        Self { arrays: arrays.iter() }
    }

    pub(crate) fn take_into(&mut self, name: &str, dst: &mut Matrix) -> Result<()> {
        let (found, value) = self
            .arrays
            .next()
            .ok_or_else(|| Error::Checkpoint(format!("missing array {name}")))?;
        if found != name {
            return Err(Error::Checkpoint(format!("expected array {name}, found {found}")));
        }
        if value.shape() != dst.shape() {
            return Err(Error::Checkpoint(format!(
                "array {name} has shape {:?}, expected {:?}",
                value.shape(),
                dst.shape()
            )));
        }
        *dst = value.clone();
        Ok(())
    }

    pub(crate) fn finish(mut self) -> Result<()> {
        match self.arrays.next() {
            Some((name, _)) => Err(Error::Checkpoint(format!("unexpected trailing array {name}"))),
            None => Ok(()),
        }
    }
}

/// Linear classifier without bias: `logits = E · W`, `W` is `embed_dim × M`.
#[derive(Clone, Debug)]
pub struct ClassifierHead {
    pub weight: Param,
}

impl ClassifierHead {
    pub const INIT_STD: f64 = 0.001;

    pub fn new(embed_dim: usize, classes: usize, rng: &mut Rng) -> Self {
        Self::from_weight(rng.gaussian_matrix(embed_dim, classes, Self::INIT_STD))
    }

    pub fn from_weight(weight: Matrix) -> Self {
        Self {
            weight: Param::new(weight),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.weight.value.cols()
    }

    pub fn embed_dim(&self) -> usize {
        self.weight.value.rows()
    }
}

/// The source-trained initial encoder: all blocks, embedding, source head.
#[derive(Clone, Debug)]
pub struct SingleBranchEncoder {
    pub config: EncoderConfig,
    pub stack: Stack,
    pub head: ClassifierHead,
}

impl SingleBranchEncoder {
    /// Fresh encoder whose batch-norm layers carry only a source slot.
    pub fn new(config: EncoderConfig, num_classes: usize, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let blocks = (0..config.depth())
            .map(|i| Block::new(config.width_before(i), config.block_dims[i], &[Domain::Source], rng))
            .collect();
        let embedding = LinearLayer::new(config.width_before(config.depth()), config.embed_dim, rng);
        let head = ClassifierHead::new(config.embed_dim, num_classes, rng);
        Ok(Self {
            config,
            stack: Stack {
                first: 0,
                blocks,
                embedding: Some(embedding),
            },
            head,
        })
    }

    /// Train mode returns raw embeddings; eval mode returns L2-normalized ones.
    pub fn forward(&mut self, x: &Matrix, mode: Mode) -> Result<Matrix> {
        self.check_input(x)?;
        match mode {
            Mode::Train => self.stack.forward(x, Domain::Source, Mode::Train),
            Mode::Eval => self.embed(x),
        }
    }

    pub fn backward(&mut self, grad: &Matrix) -> Result<()> {
        self.stack.backward(grad).map(|_| ())
    }

    pub fn embed(&self, x: &Matrix) -> Result<Matrix> {
        self.check_input(x)?;
        Ok(self.stack.infer(x, Domain::Source)?.l2_normalize_rows())
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.config.input_dim {
            return Err(Error::ShapeMismatch {
                op: "encoder_forward",
                left: x.shape(),
                right: (x.rows(), self.config.input_dim),
            });
        }
        Ok(())
    }

    pub fn params_mut(&mut self) -> ParamRefs<'_> {
        let mut out = Vec::new();
        self.stack.params_mut("net", &mut out);
        out.push(("head.source.weight".to_string(), &mut self.head.weight));
        out
    }

    pub fn zero_grad(&mut self) {
        for (_, p) in self.params_mut() {
            p.zero_grad();
        }
    }

    pub(crate) fn arrays(&self) -> Vec<(String, Matrix)> {
        let mut out = Vec::new();
        self.stack.arrays("net", &mut out);
        out.push(("head.source.weight".to_string(), self.head.weight.value.clone()));
        out
    }

    pub(crate) fn load_arrays(&mut self, arrays: &[(String, Matrix)]) -> Result<()> {
        let mut reader = ArrayReader::new(arrays);
        self.stack.load_arrays("net", &mut reader)?;
        reader.take_into("head.source.weight", &mut self.head.weight.value)?;
        reader.finish()
    }
}

#[derive(Clone, Debug)]
pub enum Branches {
    Separate {
        source: Stack,
        target: Stack,
    },
    /// `shared_depth == L`: one object serves both paths.
    Shared(Stack),
}

#[derive(Clone, Debug)]
pub struct TwoBranchEncoder {
    pub config: EncoderConfig,
    pub trunk: Stack,
    pub branches: Branches,
    pub source_head: ClassifierHead,
    pub target_head: Option<ClassifierHead>,
}

impl TwoBranchEncoder {
    /// Builds `E^C`, `E^S`, `E^T` so that both paths reproduce `init` exactly.
    /// Target statistics slots are seeded from the source slots.
    pub fn from_init(init: &SingleBranchEncoder, config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let ic = &init.config;
        if ic.input_dim != config.input_dim || ic.block_dims != config.block_dims || ic.embed_dim != config.embed_dim {
            return Err(Error::ShapeMismatch {
                op: "init_two_branch",
                left: (ic.input_dim, ic.embed_dim),
                right: (config.input_dim, config.embed_dim),
            });
        }
        let domains = config.stat_domains();
        let s = config.shared_depth;
        let copy_blocks = |range: std::ops::Range<usize>| -> Result<Vec<Block>> {
            range
                .map(|i| Block::reslotted(&init.stack.blocks[i], domains, Domain::Source))
                .collect()
        };
        let embedding = || {
            let mut e = init
                .stack
                .embedding
                .clone()
                .expect("single-branch encoder has an embedding");
            e.weight.zero_grad();
            e.bias.zero_grad();
            e
        };
        let trunk = Stack {
            first: 0,
            blocks: copy_blocks(0..s)?,
            embedding: None,
        };
        let branch = || -> Result<Stack> {
            Ok(Stack {
                first: s,
                blocks: copy_blocks(s..config.depth())?,
                embedding: Some(embedding()),
            })
        };
        let branches = if s == config.depth() {
            Branches::Shared(branch()?)
        } else {
            Branches::Separate {
                source: branch()?,
                target: branch()?,
            }
        };
        let mut source_head = init.head.clone();
        source_head.weight.zero_grad();
        Ok(Self {
            config,
            trunk,
            branches,
            source_head,
            target_head: None,
        })
    }

    fn branch_mut(&mut self, domain: Domain) -> &mut Stack {
        match &mut self.branches {
            Branches::Shared(b) => b,
            Branches::Separate { source, target } => match domain {
                Domain::Source => source,
                Domain::Target => target,
            },
        }
    }

    fn branch(&self, domain: Domain) -> &Stack {
        match &self.branches {
            Branches::Shared(b) => b,
            Branches::Separate { source, target } => match domain {
                Domain::Source => source,
                Domain::Target => target,
            },
        }
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.config.input_dim {
            return Err(Error::ShapeMismatch {
                op: "encoder_forward",
                left: x.shape(),
                right: (x.rows(), self.config.input_dim),
            });
        }
        Ok(())
    }

    /// Routes `x` through the trunk and the branch of `domain`. Train mode
    /// returns raw embeddings and caches for [`Self::backward`]; eval mode
    /// returns L2-normalized embeddings.
    pub fn forward(&mut self, x: &Matrix, domain: Domain, mode: Mode) -> Result<Matrix> {
        self.check_input(x)?;
        if mode == Mode::Eval {
            return self.embed(x, domain);
        }
        let slot = self.config.stats_slot(domain);
        let h = self.trunk.forward(x, slot, Mode::Train)?;
        self.branch_mut(domain).forward(&h, slot, Mode::Train)
    }

    /// Backpropagates the gradient of the last train-mode forward of `domain`.
    pub fn backward(&mut self, domain: Domain, grad: &Matrix) -> Result<()> {
        let g = self.branch_mut(domain).backward(grad)?;
        self.trunk.backward(&g).map(|_| ())
    }

    /// Normalized eval-mode embeddings; does not touch any cache.
    pub fn embed(&self, x: &Matrix, domain: Domain) -> Result<Matrix> {
        Ok(self.embed_raw(x, domain)?.l2_normalize_rows())
    }

    pub fn embed_raw(&self, x: &Matrix, domain: Domain) -> Result<Matrix> {
        self.check_input(x)?;
        let slot = self.config.stats_slot(domain);
        let h = self.trunk.infer(x, slot)?;
        self.branch(domain).infer(&h, slot)
    }

    /// Train-mode forward of both batches as one mixed batch through the
    /// trunk (only meaningful with [`BnMode::Shared`]).
    pub fn forward_mixed(&mut self, xs: &Matrix, xt: &Matrix) -> Result<(Matrix, Matrix)> {
        if self.config.bn_mode != BnMode::Shared {
            return Err(Error::Usage("mixed-batch forward requires shared batch norm".into()));
        }
        self.check_input(xs)?;
        self.check_input(xt)?;
        let ns = xs.rows();
        let h = self.trunk.forward(&xs.vstack(xt)?, Domain::Source, Mode::Train)?;
        match &mut self.branches {
            Branches::Shared(b) => Ok(b.forward(&h, Domain::Source, Mode::Train)?.split_rows(ns)),
            Branches::Separate { source, target } => {
                let (hs, ht) = h.split_rows(ns);
                Ok((
                    source.forward(&hs, Domain::Source, Mode::Train)?,
                    target.forward(&ht, Domain::Source, Mode::Train)?,
                ))
            }
        }
    }

    pub fn backward_mixed(&mut self, gs: &Matrix, gt: &Matrix) -> Result<()> {
        let g = match &mut self.branches {
            Branches::Shared(b) => b.backward(&gs.vstack(gt)?)?,
            Branches::Separate { source, target } => source.backward(gs)?.vstack(&target.backward(gt)?)?,
        };
        self.trunk.backward(&g).map(|_| ())
    }

    /// Replaces the target classifier with a fresh one of `num_clusters`
    /// columns. Optimizer state for it must be reset by the caller.
    pub fn reinit_target_head(&mut self, num_clusters: usize, rng: &mut Rng) -> Result<&ClassifierHead> {
        if num_clusters < 2 {
            return Err(Error::InvalidConfig(format!(
                "target classifier needs at least 2 classes, got {num_clusters}"
            )));
        }
        Ok(self
            .target_head
            .insert(ClassifierHead::new(self.config.embed_dim, num_clusters, rng)))
    }

    pub fn head(&self, domain: Domain) -> Option<&ClassifierHead> {
        match domain {
            Domain::Source => Some(&self.source_head),
            Domain::Target => self.target_head.as_ref(),
        }
    }

    /// Names of shared-trunk parameters.
    pub fn shared_parameters(&self) -> Vec<String> {
        let mut names = self.trunk.param_names("trunk");
        if let Branches::Shared(b) = &self.branches {
            names.extend(b.param_names("branch"));
        }
        names
    }

    fn branch_prefix(&self, domain: Domain) -> &'static str {
        match (&self.branches, domain) {
            (Branches::Shared(_), _) => "branch",
            (_, Domain::Source) => "source",
            (_, Domain::Target) => "target",
        }
    }

    /// Names of every parameter reachable from the path of `domain`:
    /// trunk, branch, and that domain's head (if present).
    pub fn trainable_parameters(&self, domain: Domain) -> Vec<String> {
        let mut names = self.trunk.param_names("trunk");
        names.extend(self.branch(domain).param_names(self.branch_prefix(domain)));
        if self.head(domain).is_some() {
            names.push(format!("head.{domain}.weight"));
        }
        names
    }

    /// Mutable parameters reachable from any of `domains`, each listed once.
    pub fn params_mut(&mut self, domains: &[Domain]) -> ParamRefs<'_> {
        let want_source = domains.contains(&Domain::Source);
        let want_target = domains.contains(&Domain::Target);
        let mut out = Vec::new();
        if !want_source && !want_target {
            return out;
        }
        self.trunk.params_mut("trunk", &mut out);
        match &mut self.branches {
            Branches::Shared(b) => b.params_mut("branch", &mut out),
            Branches::Separate { source, target } => {
                if want_source {
                    source.params_mut("source", &mut out);
                }
                if want_target {
                    target.params_mut("target", &mut out);
                }
            }
        }
        if want_source {
            out.push(("head.source.weight".to_string(), &mut self.source_head.weight));
        }
        if want_target {
            if let Some(h) = &mut self.target_head {
                out.push(("head.target.weight".to_string(), &mut h.weight));
            }
        }
        out
    }

    pub fn zero_grad(&mut self) {
        for (_, p) in self.params_mut(&Domain::ALL) {
            p.zero_grad();
        }
    }

    pub(crate) fn arrays(&self) -> Vec<(String, Matrix)> {
        let mut out = Vec::new();
        self.trunk.arrays("trunk", &mut out);
        match &self.branches {
            Branches::Shared(b) => b.arrays("branch", &mut out),
            Branches::Separate { source, target } => {
                source.arrays("source", &mut out);
                target.arrays("target", &mut out);
            }
        }
        out.push(("head.source.weight".to_string(), self.source_head.weight.value.clone()));
        if let Some(h) = &self.target_head {
            out.push(("head.target.weight".to_string(), h.weight.value.clone()));
        }
        out
    }

    pub(crate) fn load_arrays(&mut self, arrays: &[(String, Matrix)]) -> Result<()> {
        let mut reader = ArrayReader::new(arrays);
        self.trunk.load_arrays("trunk", &mut reader)?;
        match &mut self.branches {
            Branches::Shared(b) => b.load_arrays("branch", &mut reader)?,
            Branches::Separate { source, target } => {
                source.load_arrays("source", &mut reader)?;
                target.load_arrays("target", &mut reader)?;
            }
        }
        reader.take_into("head.source.weight", &mut self.source_head.weight.value)?;
        if let Some(h) = &mut self.target_head {
            reader.take_into("head.target.weight", &mut h.weight.value)?;
        }
        reader.finish()
    }

    /// Direct access to the stacks for tests and diagnostics.
    pub fn branch_stack(&self, domain: Domain) -> &Stack {
        self.branch(domain)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(shared_depth: usize) -> EncoderConfig {
        EncoderConfig {
            input_dim: 6,
            block_dims: vec![8, 8, 8],
            embed_dim: 5,
            shared_depth,
            bn_mode: BnMode::DomainSpecific,
        }
    }

    fn trained_init(rng: &mut Rng) -> SingleBranchEncoder {
        let mut init = SingleBranchEncoder::new(cfg(0), 4, rng).unwrap();
        // populate non-trivial source statistics
        for _ in 0..3 {
            init.forward(&rng.gaussian_matrix(10, 6, 2.0), Mode::Train).unwrap();
        }
        init
    }

    #[test]
    fn paths_match_init_after_construction() {
        let mut rng = Rng::new(1);
        let init = trained_init(&mut rng);
        let x = rng.gaussian_matrix(7, 6, 1.0);
        let expected = init.embed(&x).unwrap();
        for s in 0..=3 {
            let enc = TwoBranchEncoder::from_init(&init, cfg(s)).unwrap();
            assert_eq!(enc.embed(&x, Domain::Source).unwrap(), expected);
            assert_eq!(enc.embed(&x, Domain::Target).unwrap(), expected);
        }
    }

    #[test]
    fn source_forward_leaves_target_statistics_alone() {
        let mut rng = Rng::new(3);
        let init = trained_init(&mut rng);
        let mut enc = TwoBranchEncoder::from_init(&init, cfg(2)).unwrap();
        let target_stats = |e: &TwoBranchEncoder| -> Vec<RunningStats> {
            let branch = e.branch_stack(Domain::Target);
            e.trunk
                .blocks
                .iter()
                .chain(&branch.blocks)
                .map(|b| b.bn.stats(Domain::Target).unwrap().clone())
                .collect()
        };
        let before = target_stats(&enc);
        enc.forward(&rng.gaussian_matrix(9, 6, 3.0), Domain::Source, Mode::Train)
            .unwrap();
        assert_eq!(target_stats(&enc), before);
        let trunk_source = enc.trunk.blocks[0].bn.stats(Domain::Source).unwrap().clone();
        assert_ne!(
            trunk_source,
            init.stack.blocks[0].bn.stats(Domain::Source).unwrap().clone()
        );
    }

    #[test]
    fn sharing_boundaries() {
        let mut rng = Rng::new(2);
        let init = trained_init(&mut rng);
        let enc0 = TwoBranchEncoder::from_init(&init, cfg(0)).unwrap();
        assert!(enc0.shared_parameters().is_empty());
        let src: std::collections::BTreeSet<_> = enc0.trainable_parameters(Domain::Source).into_iter().collect();
        let tgt: std::collections::BTreeSet<_> = enc0.trainable_parameters(Domain::Target).into_iter().collect();
        assert!(src.is_disjoint(&tgt));

        let enc3 = TwoBranchEncoder::from_init(&init, cfg(3)).unwrap();
        assert!(matches!(enc3.branches, Branches::Shared(_)));
        let src: std::collections::BTreeSet<_> = enc3.trainable_parameters(Domain::Source).into_iter().collect();
        let tgt: std::collections::BTreeSet<_> = enc3.trainable_parameters(Domain::Target).into_iter().collect();
        // no target head yet: the source set has exactly one more entry
        let diff: Vec<_> = src.symmetric_difference(&tgt).collect();
        assert_eq!(diff, vec!["head.source.weight"]);
    }

    #[test]
    fn union_counts_every_parameter_once() {
        let mut rng = Rng::new(3);
        let init = trained_init(&mut rng);
        for s in 0..3 {
            let mut enc = TwoBranchEncoder::from_init(&init, cfg(s)).unwrap();
            enc.reinit_target_head(5, &mut rng).unwrap();
            let shared = enc.shared_parameters().len();
            let src_branch = enc.branch_stack(Domain::Source).param_names("x").len();
            let tgt_branch = enc.branch_stack(Domain::Target).param_names("x").len();
            let all = enc.params_mut(&Domain::ALL);
            let names: std::collections::BTreeSet<_> = all.iter().map(|(n, _)| n.clone()).collect();
            assert_eq!(names.len(), all.len());
            assert_eq!(all.len(), shared + src_branch + tgt_branch + 2);
        }
    }

    #[test]
    fn shared_count_is_monotone_in_depth() {
        let mut rng = Rng::new(4);
        let init = trained_init(&mut rng);
        let counts: Vec<usize> = (0..=3)
            .map(|s| {
                TwoBranchEncoder::from_init(&init, cfg(s))
                    .unwrap()
                    .shared_parameters()
                    .len()
            })
            .collect();
        assert!(counts.windows(2).all(|w| w[0] <= w[1]), "{counts:?}");
    }

    #[test]
    fn perturbing_target_branch_leaves_source_path() {
        let mut rng = Rng::new(5);
        let init = trained_init(&mut rng);
        let x = rng.gaussian_matrix(4, 6, 1.0);
        let mut enc = TwoBranchEncoder::from_init(&init, cfg(2)).unwrap();
        let src_before = enc.embed(&x, Domain::Source).unwrap();
        let tgt_before = enc.embed(&x, Domain::Target).unwrap();
        if let Branches::Separate { target, .. } = &mut enc.branches {
            let w = &mut target.embedding.as_mut().unwrap().weight.value;
            let v = w.get(0, 0);
            w.set(0, 0, v + 0.5);
        }
        assert_eq!(enc.embed(&x, Domain::Source).unwrap(), src_before);
        assert_ne!(enc.embed(&x, Domain::Target).unwrap(), tgt_before);
    }

    #[test]
    fn eval_embeddings_are_unit_norm_and_distinct() {
        let mut rng = Rng::new(6);
        let init = trained_init(&mut rng);
        let mut enc = TwoBranchEncoder::from_init(&init, cfg(1)).unwrap();
        let x = rng.gaussian_matrix(2, 6, 1.0);
        let e = enc.forward(&x, Domain::Target, Mode::Eval).unwrap();
        for row in e.iter_rows() {
            let n: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-12);
        }
        assert_ne!(e.row(0), e.row(1));
        assert!(enc.forward(&Matrix::zeros(2, 3), Domain::Target, Mode::Eval).is_err());
    }

    #[test]
    fn target_head_reinit() {
        let mut rng = Rng::new(7);
        let init = trained_init(&mut rng);
        let mut enc = TwoBranchEncoder::from_init(&init, cfg(2)).unwrap();
        let source_head = enc.source_head.weight.value.clone();
        assert!(enc.reinit_target_head(1, &mut rng).is_err());
        let a = enc
            .reinit_target_head(500, &mut Rng::new(9))
            .unwrap()
            .weight
            .value
            .clone();
        assert_eq!(a.cols(), 500);
        let b = enc
            .reinit_target_head(500, &mut Rng::new(9))
            .unwrap()
            .weight
            .value
            .clone();
        assert_eq!(a, b);
        assert_eq!(enc.source_head.weight.value, source_head);
    }

    #[test]
    fn init_shape_mismatch() {
        let mut rng = Rng::new(8);
        let init = trained_init(&mut rng);
        let mut other = cfg(1);
        other.block_dims = vec![8, 8];
        assert!(TwoBranchEncoder::from_init(&init, other).is_err());
        let mut bad = cfg(1);
        bad.shared_depth = 4;
        assert!(TwoBranchEncoder::from_init(&init, bad).is_err());
    }
}
