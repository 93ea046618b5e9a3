//! End-to-end training: supervised source initialization, then rounds of
//! {embed target → distances → cluster → pseudo-label → joint training},
//! plus the target-only and source-only baselines and parameter sweeps.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::{Arc, Mutex};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint;
use crate::cluster::{
    assign_pseudo_labels, dbscan, eps_from_p, k_reciprocal_distances, kmeans, DbscanConfig, PseudoLabelSet,
    RerankConfig,
};
use crate::data::{fmt_f64, pk_batches, write_file, DomainDataset, PkConfig, SynthConfig, SyntheticData};
use crate::encoder::{EncoderConfig, SingleBranchEncoder, TwoBranchEncoder};
use crate::error::{Error, Result};
use crate::eval::{self, EvalProtocol, EvalReport};
use crate::losses::{self, JointLoss, LossConfig};
use crate::nn::{Adam, AdamConfig, Domain, LrSchedule, Mode};
use crate::tensor::{Matrix, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    #[default]
    SourceGuided,
    TargetOnly,
    SourceOnly,
}

impl RunMode {
    pub fn as_str(self) -> &'static str {
        match self {
            RunMode::SourceGuided => "source_guided",
            RunMode::TargetOnly => "target_only",
            RunMode::SourceOnly => "source_only",
        }
    }
}

impl fmt::Display for RunMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RunMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "source_guided" => Ok(RunMode::SourceGuided),
            "target_only" => Ok(RunMode::TargetOnly),
            "source_only" => Ok(RunMode::SourceOnly),
            other => Err(format!("unknown mode `{other}`")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Clusterer {
    #[default]
    Dbscan,
    Kmeans,
}

impl FromStr for Clusterer {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "dbscan" => Ok(Clusterer::Dbscan),
            "kmeans" => Ok(Clusterer::Kmeans),
            other => Err(format!("unknown clusterer `{other}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub mode: RunMode,
    pub data: SynthConfig,
    pub encoder: EncoderConfig,
    pub loss: LossConfig,
    pub optimizer: AdamConfig,
    pub init_epochs: usize,
    /// Learning-rate multiplier applied at half and at 7/8 of `init_epochs`.
    pub init_decay_factor: f64,
    /// Constant learning rate of the adaptation phase.
    pub uda_lr: f64,
    pub n_iter: usize,
    pub n_epoch: usize,
    pub clusterer: Clusterer,
    pub dbscan: DbscanConfig,
    /// Number of k-means clusters.
    pub k: usize,
    pub kmeans_max_iters: usize,
    pub rerank: RerankConfig,
    pub pk: PkConfig,
    pub protocol: EvalProtocol,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            mode: RunMode::SourceGuided,
            data: SynthConfig::default(),
            encoder: EncoderConfig::default(),
            loss: LossConfig::default(),
            optimizer: AdamConfig::default(),
            init_epochs: 40,
            init_decay_factor: 0.1,
            uda_lr: AdamConfig::default().lr,
            n_iter: 5,
            n_epoch: 5,
            clusterer: Clusterer::Dbscan,
            dbscan: DbscanConfig::default(),
            k: 80,
            kmeans_max_iters: 100,
            rerank: RerankConfig::default(),
            pk: PkConfig::default(),
            protocol: EvalProtocol::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.pk.validate()?;
        self.dbscan.validate()?;
        self.rerank.validate()?;
        self.protocol.validate()?;
        self.data.validate()?;
        if self.n_iter == 0 || self.n_epoch == 0 {
            return Err(Error::InvalidConfig("n_iter and n_epoch must be >= 1".into()));
        }
        if self.clusterer == Clusterer::Kmeans && self.k < 2 {
            return Err(Error::InvalidConfig("k-means needs k >= 2".into()));
        }
        if !(self.uda_lr >= 0.0 && self.optimizer.lr >= 0.0) {
            return Err(Error::InvalidConfig("learning rates must be >= 0".into()));
        }
        if self.data.input_dim != self.encoder.input_dim {
            return Err(Error::InvalidConfig(format!(
                "data input_dim {} differs from encoder input_dim {}",
                self.data.input_dim, self.encoder.input_dim
            )));
        }
        Ok(())
    }

    /// The pinned synthetic benchmark: module defaults with a longer
    /// initialization, a larger DBSCAN `p`, and a higher adaptation learning
    /// rate, measured once and frozen for the comparative tests.
    pub fn pinned_benchmark() -> Self {
        let base = Self::default();
        Self {
            init_epochs: 80,
            uda_lr: 1e-3,
            dbscan: DbscanConfig {
                p: 0.006,
                ..base.dbscan.clone()
            },
            ..base
        }
    }

    pub fn init_schedule(&self) -> LrSchedule {
        LrSchedule {
            initial_lr: self.optimizer.lr,
            decay_epochs: vec![self.init_epochs / 2, self.init_epochs * 7 / 8],
            decay_factor: self.init_decay_factor,
        }
    }

    pub fn fingerprint(&self) -> Result<String> {
        eval::config_fingerprint(self)
    }
}

/// Seeds of the pinned benchmark's multi-seed comparisons.
pub const PINNED_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

/// DBSCAN `p` values of the pinned stability sweep.
pub const PINNED_P_SWEEP: [f64; 5] = [0.004, 0.008, 0.012, 0.016, 0.020];

/// `cfg` with both the run seed and the data seed set to `seed`.
pub fn with_seed(cfg: &PipelineConfig, seed: u64) -> PipelineConfig {
    let mut c = cfg.clone();
    c.seed = seed;
    c.data.seed = seed;
    c
}

// RNG streams of a run, all derived from `PipelineConfig::seed`.
const STREAM_INIT: u64 = 1;
const STREAM_INIT_SAMPLER: u64 = 2;
const STREAM_SOURCE_SAMPLER: u64 = 3;
const STREAM_TARGET_SAMPLER: u64 = 1_000;
const STREAM_HEAD: u64 = 2_000;
const STREAM_KMEANS: u64 = 3_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Init,
    Uda,
}

/// Loss values of one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub phase: Phase,
    /// Pseudo-labeling iteration (0 during initialization).
    pub iteration: usize,
    pub epoch: usize,
    pub step: usize,
    pub total: f64,
    pub source: Option<f64>,
    pub target: Option<f64>,
}

pub fn loss_curve_csv(records: &[LossRecord]) -> String {
    let mut out = String::from("phase,iteration,epoch,step,total,source,target\n");
    let opt = |v: Option<f64>| v.map_or(String::new(), fmt_f64);
    for r in records {
        let phase = match r.phase {
            Phase::Init => "init",
            Phase::Uda => "uda",
        };
        out.push_str(&format!(
            "{phase},{},{},{},{},{},{}\n",
            r.iteration,
            r.epoch,
            r.step,
            fmt_f64(r.total),
            opt(r.source),
            opt(r.target)
        ));
    }
    out
}

/// Trained initial encoder `E⁽⁰⁾` with its source classifier.
#[derive(Clone, Debug)]
pub struct InitModel {
    pub encoder: SingleBranchEncoder,
    pub loss_curve: Vec<LossRecord>,
}

/// Supervised source training of a single-path encoder.
pub fn train_init(source: &DomainDataset, cfg: &PipelineConfig) -> Result<InitModel> {
    cfg.encoder.validate()?;
    let (labels, classes) = source.class_labels()?;
    let mut enc = SingleBranchEncoder::new(cfg.encoder.clone(), classes, &mut Rng::stream(cfg.seed, STREAM_INIT))?;
    let mut sampler = pk_batches(&labels, &cfg.pk, Rng::stream(cfg.seed, STREAM_INIT_SAMPLER))?;
    let mut adam = Adam::new(cfg.optimizer.clone());
    let schedule = cfg.init_schedule();
    let mut curve = Vec::with_capacity(cfg.init_epochs * cfg.pk.batches_per_epoch);
    for epoch in 0..cfg.init_epochs {
        let lr = schedule.lr_at(epoch);
        for step in 0..cfg.pk.batches_per_epoch {
            let batch = sampler.next_batch();
            let x = source.features().select_rows(&batch);
            let y: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            enc.zero_grad();
            let loss = losses::source_loss_step(&mut enc, &x, &y, &cfg.loss)
                .map_err(|e| diagnose(e, "initialization", epoch, step))?;
            curve.push(LossRecord {
                phase: Phase::Init,
                iteration: 0,
                epoch,
                step,
                total: loss.total,
                source: Some(loss.total),
                target: None,
            });
            adam.step(&mut enc.params_mut(), lr)?;
        }
    }
    Ok(InitModel {
        encoder: enc,
        loss_curve: curve,
    })
}

fn diagnose(e: Error, phase: &str, epoch: usize, step: usize) -> Error {
    match e {
        Error::NonFinite(what) => Error::NonFinite(format!("{what} during {phase}, epoch {epoch}, step {step}")),
        other => other,
    }
}

/// Per-iteration clustering summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub raw_clusters: usize,
    pub outliers: usize,
    /// Clusters kept for training (= target classifier width).
    pub clusters: usize,
    pub training_samples: usize,
    pub eps: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct RunArtifacts {
    pub config: PipelineConfig,
    pub fingerprint: String,
    /// One report per completed iteration; a single report for source-only.
    pub reports: Vec<EvalReport>,
    pub pseudo_labels: Vec<PseudoLabelSet>,
    pub iterations: Vec<IterationRecord>,
    pub loss_curve: Vec<LossRecord>,
    pub encoder: TwoBranchEncoder,
}

impl RunArtifacts {
    pub fn final_report(&self) -> &EvalReport {
        self.reports.last().expect("a run produces at least one report")
    }

    pub fn final_map(&self) -> f64 {
        self.final_report().map
    }

    /// Writes `report_iter{t}.json`, `pseudo_iter{t}.csv`, `iterations.json`,
    /// `loss_curve.csv`, and `encoder.ckpt`.
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        for (i, r) in self.reports.iter().enumerate() {
            let t = if self.config.mode == RunMode::SourceOnly {
                0
            } else {
                i + 1
            };
            write_file(&dir.join(format!("report_iter{t}.json")), r.to_json()?.as_bytes())?;
        }
        for (i, p) in self.pseudo_labels.iter().enumerate() {
            p.save_csv(&dir.join(format!("pseudo_iter{}.csv", i + 1)))?;
        }
        write_file(
            &dir.join("iterations.json"),
            serde_json::to_string_pretty(&self.iterations)?.as_bytes(),
        )?;
        write_file(&dir.join("loss_curve.csv"), loss_curve_csv(&self.loss_curve).as_bytes())?;
        checkpoint::save_two_branch(&self.encoder, &dir.join(CHECKPOINT_FILE))
    }
}

pub const CHECKPOINT_FILE: &str = "encoder.ckpt";

/// Replaces the clusterer: receives the target-path embeddings of the
/// target training set and returns a label per row.
pub type PseudoLabeler<'a> = dyn FnMut(&Matrix, &DomainDataset) -> Result<PseudoLabelSet> + 'a;
pub type BatchObserver<'a> = dyn FnMut(&LossRecord, &JointLoss) + 'a;

/// Extension points of a run. `on_batch` sees every adaptation step's
/// losses; a mean-teacher style method would hook its extra terms there.
#[derive(Default)]
pub struct Hooks<'a> {
    pub pseudo_labeler: Option<Box<PseudoLabeler<'a>>>,
    pub on_batch: Option<Box<BatchObserver<'a>>>,
}

/// Runs the configured mode, training `E⁽⁰⁾` first.
pub fn run(cfg: &PipelineConfig, data: &SyntheticData) -> Result<RunArtifacts> {
    let init = train_init(&data.source, cfg)?;
    run_with_init(cfg, data, &init, &mut Hooks::default())
}

/// Runs the configured mode from an already trained `E⁽⁰⁾`.
pub fn run_with_init(
    cfg: &PipelineConfig,
    data: &SyntheticData,
    init: &InitModel,
    hooks: &mut Hooks<'_>,
) -> Result<RunArtifacts> {
    cfg.validate()?;
    let fingerprint = cfg.fingerprint()?;
    let mut enc = TwoBranchEncoder::from_init(&init.encoder, cfg.encoder.clone())?;
    let mut loss_curve = init.loss_curve.clone();
    let report = |enc: &TwoBranchEncoder, clusters| -> Result<EvalReport> {
        let mut r = eval::evaluate(&data.query, &data.gallery, enc, &cfg.protocol)?;
        r.clusters = clusters;
        r.fingerprint = fingerprint.clone();
        r.seed = cfg.seed;
        Ok(r)
    };

    if cfg.mode == RunMode::SourceOnly {
        let r = report(&enc, None)?;
        return Ok(RunArtifacts {
            config: cfg.clone(),
            fingerprint: fingerprint.clone(),
            reports: vec![r],
            pseudo_labels: Vec::new(),
            iterations: Vec::new(),
            loss_curve,
            encoder: enc,
        });
    }

    let target = &data.target_train;
    let (src_labels, _) = data.source.class_labels()?;
    let mut src_sampler = pk_batches(&src_labels, &cfg.pk, Rng::stream(cfg.seed, STREAM_SOURCE_SAMPLER))?;
    let mut adam = Adam::new(cfg.optimizer.clone());
    let domains: &[Domain] = match cfg.mode {
        RunMode::SourceGuided => &Domain::ALL,
        _ => &[Domain::Target],
    };
    let mut reports = Vec::new();
    let mut pseudo_sets = Vec::new();
    let mut iterations = Vec::new();

    for t in 1..=cfg.n_iter {
        let emb = enc.embed(target.features(), Domain::Target)?;
        let (pseudo, eps) = match hooks.pseudo_labeler.as_mut() {
            Some(f) => (f(&emb, target)?, None),
            None => cluster_embeddings(cfg, &emb, t)?,
        };
        let assigned = assign_pseudo_labels(&pseudo, target)?;
        let diagnostics = eval::cluster_diagnostics(&pseudo, target)?;
        enc.reinit_target_head(
            assigned.num_clusters,
            &mut Rng::stream(cfg.seed, STREAM_HEAD + t as u64),
        )?;
        adam.reset("head.target");
        iterations.push(IterationRecord {
            iteration: t,
            raw_clusters: pseudo.num_clusters(),
            outliers: pseudo.num_outliers(),
            clusters: assigned.num_clusters,
            training_samples: assigned.rows.len(),
            eps,
        });

        let xt_all = target.features().select_rows(&assigned.rows);
        let pk_t = PkConfig {
            p: cfg.pk.p.min(assigned.num_clusters),
            ..cfg.pk.clone()
        };
        let mut tgt_sampler = pk_batches(
            &assigned.labels,
            &pk_t,
            Rng::stream(cfg.seed, STREAM_TARGET_SAMPLER + t as u64),
        )?;
        for epoch in 0..cfg.n_epoch {
            for step in 0..cfg.pk.batches_per_epoch {
                let tb = tgt_sampler.next_batch();
                let xt = xt_all.select_rows(&tb);
                let yt: Vec<usize> = tb.iter().map(|&i| assigned.labels[i]).collect();
                enc.zero_grad();
                let joint = if cfg.mode == RunMode::SourceGuided {
                    let sb = src_sampler.next_batch();
                    let xs = data.source.features().select_rows(&sb);
                    let ys: Vec<usize> = sb.iter().map(|&i| src_labels[i]).collect();
                    losses::joint_loss(&mut enc, (&xs, &ys), (&xt, &yt), &cfg.loss)
                } else {
                    losses::joint_loss_terms(&mut enc, None, (&xt, &yt), &cfg.loss)
                }
                .map_err(|e| diagnose(e, &format!("iteration {t}"), epoch, step))?;
                let record = LossRecord {
                    phase: Phase::Uda,
                    iteration: t,
                    epoch,
                    step,
                    total: joint.total,
                    source: joint.source.map(|s| s.total),
                    target: Some(joint.target.total),
                };
                if let Some(f) = hooks.on_batch.as_mut() {
                    f(&record, &joint);
                }
                loss_curve.push(record);
                adam.step(&mut enc.params_mut(domains), cfg.uda_lr)?;
            }
        }
        reports.push(report(&enc, Some(diagnostics))?);
        pseudo_sets.push(pseudo);
    }

    Ok(RunArtifacts {
        config: cfg.clone(),
        fingerprint,
        reports,
        pseudo_labels: pseudo_sets,
        iterations,
        loss_curve,
        encoder: enc,
    })
}

/// Clusters target embeddings with the configured algorithm. DBSCAN runs on
/// re-ranked distances; k-means on the embeddings themselves.
pub fn cluster_embeddings(
    cfg: &PipelineConfig,
    emb: &Matrix,
    iteration: usize,
) -> Result<(PseudoLabelSet, Option<f64>)> {
    match cfg.clusterer {
        Clusterer::Dbscan => {
            let d = k_reciprocal_distances(emb, &cfg.rerank)?;
            let eps = eps_from_p(&d, cfg.dbscan.p)?;
            Ok((dbscan(&d, eps, cfg.dbscan.min_samples)?, Some(eps)))
        }
        Clusterer::Kmeans => {
            let mut rng = Rng::stream(cfg.seed, STREAM_KMEANS + iteration as u64);
            Ok((kmeans(emb, cfg.k, &mut rng, cfg.kmeans_max_iters)?.labels, None))
        }
    }
}

/// Key of everything `E⁽⁰⁾` depends on: source data, encoder shape (not the
/// sharing depth or batch-norm mode), loss, optimizer, schedule, sampler,
/// and seed.
pub fn init_key(cfg: &PipelineConfig, source: &DomainDataset) -> Result<String> {
    #[derive(Serialize)]
    struct Key<'a> {
        seed: u64,
        input_dim: usize,
        block_dims: &'a [usize],
        embed_dim: usize,
        loss: &'a LossConfig,
        optimizer: &'a AdamConfig,
        init_epochs: usize,
        init_decay_factor: f64,
        pk: &'a PkConfig,
        source: String,
    }
    let mut h = Sha256::new();
    for v in source.features().data() {
        h.update(v.to_le_bytes());
    }
    for id in source.identities()? {
        h.update((*id as u64).to_le_bytes());
    }
    let source_digest: String = h.finalize().iter().map(|b| format!("{b:02x}")).collect();
    eval::config_fingerprint(&Key {
        seed: cfg.seed,
        input_dim: cfg.encoder.input_dim,
        block_dims: &cfg.encoder.block_dims,
        embed_dim: cfg.encoder.embed_dim,
        loss: &cfg.loss,
        optimizer: &cfg.optimizer,
        init_epochs: cfg.init_epochs,
        init_decay_factor: cfg.init_decay_factor,
        pk: &cfg.pk,
        source: source_digest,
    })
}

/// Memoizes `E⁽⁰⁾` across runs that share its inputs.
#[derive(Default)]
pub struct InitCache {
    models: Mutex<BTreeMap<String, Arc<InitModel>>>,
}

impl InitCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get_or_train(&self, cfg: &PipelineConfig, source: &DomainDataset) -> Result<Arc<InitModel>> {
        let key = init_key(cfg, source)?;
        if let Some(m) = self.models.lock().expect("cache lock").get(&key) {
            return Ok(Arc::clone(m));
        }
        let model = Arc::new(train_init(source, cfg)?);
        self.models
            .lock()
            .expect("cache lock")
            .entry(key)
            .or_insert_with(|| Arc::clone(&model));
        Ok(model)
    }

    pub fn len(&self) -> usize {
        self.models.lock().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// `run`, reusing a cached `E⁽⁰⁾`.
pub fn run_cached(cfg: &PipelineConfig, data: &SyntheticData, cache: &InitCache) -> Result<RunArtifacts> {
    let init = cache.get_or_train(cfg, &data.source)?;
    run_with_init(cfg, data, &init, &mut Hooks::default())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    P,
    K,
    SharedDepth,
}

impl SweepAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepAxis::P => "p",
            SweepAxis::K => "k",
            SweepAxis::SharedDepth => "shared_depth",
        }
    }

    /// `cfg` with this axis set to `value`.
    pub fn apply(self, cfg: &PipelineConfig, value: f64) -> Result<PipelineConfig> {
        let mut c = cfg.clone();
        let as_count = |v: f64| -> Result<usize> {
            if v >= 0.0 && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                Err(Error::InvalidConfig(format!(
                    "{} takes whole numbers, got {v}",
                    self.as_str()
                )))
            }
        };
        match self {
            SweepAxis::P => {
                if c.clusterer != Clusterer::Dbscan {
                    return Err(Error::InvalidConfig("sweeping p requires the dbscan clusterer".into()));
                }
                c.dbscan.p = value;
            }
            SweepAxis::K => {
                if c.clusterer != Clusterer::Kmeans {
                    return Err(Error::InvalidConfig("sweeping k requires the kmeans clusterer".into()));
                }
                c.k = as_count(value)?;
            }
            SweepAxis::SharedDepth => c.encoder.shared_depth = as_count(value)?,
        }
        c.validate()?;
        Ok(c)
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SweepAxis {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "p" => Ok(SweepAxis::P),
            "k" => Ok(SweepAxis::K),
            "shared_depth" => Ok(SweepAxis::SharedDepth),
            other => Err(format!("unknown sweep axis `{other}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub map: Option<f64>,
    pub cmc: BTreeMap<usize, f64>,
    pub clusters: Option<usize>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub axis: SweepAxis,
    pub mode: RunMode,
    pub seed: u64,
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    /// Population standard deviation of mAP over the cells that succeeded.
    pub fn map_std(&self) -> Option<f64> {
        let maps: Vec<f64> = self.rows.iter().filter_map(|r| r.map).collect();
        if maps.is_empty() {
            return None;
        }
        let n = maps.len() as f64;
        let mean = maps.iter().sum::<f64>() / n;
        Some((maps.iter().map(|m| (m - mean) * (m - mean)).sum::<f64>() / n).sqrt())
    }

    pub fn map_mean(&self) -> Option<f64> {
        let maps: Vec<f64> = self.rows.iter().filter_map(|r| r.map).collect();
        (!maps.is_empty()).then(|| maps.iter().sum::<f64>() / maps.len() as f64)
    }

    /// `axis,value,map,cmc{r}...,clusters,error,map_std`; `map_std` is the
    /// same on every row.
    pub fn to_csv(&self, ranks: &[usize]) -> String {
        let mut out = format!(
            "axis,value,map,{},clusters,error,map_std\n",
            ranks.iter().map(|r| format!("cmc{r}")).collect::<Vec<_>>().join(",")
        );
        let std = self.map_std().map_or(String::new(), fmt_f64);
        for r in &self.rows {
            let cmc: Vec<String> = ranks
                .iter()
                .map(|k| r.cmc.get(k).map_or(String::new(), |v| fmt_f64(*v)))
                .collect();
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                self.axis,
                r.value,
                r.map.map_or(String::new(), fmt_f64),
                cmc.join(","),
                r.clusters.map_or(String::new(), |c| c.to_string()),
                r.error.as_deref().unwrap_or("").replace([',', '\n'], ";"),
                std
            ));
        }
        out
    }
}

/// Number of worker threads for sweeps: `SGUDA_THREADS` if set, else rayon's default.
pub fn sweep_threads() -> usize {
    std::env::var("SGUDA_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(rayon::current_num_threads)
}

/// One run per axis value with the shared seed. Cell failures are recorded
/// in the table and the sweep continues. Rows come out in value order.
pub fn sweep(
    cfg: &PipelineConfig,
    axis: SweepAxis,
    values: &[f64],
    data: &SyntheticData,
    cache: &InitCache,
) -> Result<(SweepTable, Vec<Result<RunArtifacts>>)> {
    if values.is_empty() {
        return Err(Error::InvalidConfig("sweep needs at least one value".into()));
    }
    let cells: Vec<Result<PipelineConfig>> = values.iter().map(|&v| axis.apply(cfg, v)).collect();
    // E⁽⁰⁾ does not depend on any sweepable axis: train it once up front.
    if let Some(Ok(first)) = cells.iter().find(|c| c.is_ok()) {
        cache.get_or_train(first, &data.source)?;
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(sweep_threads())
        .build()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
    let runs: Vec<Result<RunArtifacts>> = pool.install(|| {
        cells
            .into_par_iter()
            .map(|c| c.and_then(|c| run_cached(&c, data, cache)))
            .collect()
    });
    let rows = values
        .iter()
        .zip(&runs)
        .map(|(&value, r)| match r {
            Ok(a) => SweepRow {
                value,
                map: Some(a.final_map()),
                cmc: a.final_report().cmc.clone(),
                clusters: a.iterations.last().map(|i| i.clusters),
                error: None,
            },
            Err(e) => SweepRow {
                value,
                map: None,
                cmc: BTreeMap::new(),
                clusters: None,
                error: Some(e.to_string()),
            },
        })
        .collect();
    Ok((
        SweepTable {
            axis,
            mode: cfg.mode,
            seed: cfg.seed,
            rows,
        },
        runs,
    ))
}

/// Generates the benchmark described by `cfg.data`.
pub fn generate_data(cfg: &PipelineConfig) -> Result<SyntheticData> {
    crate::data::generate(&cfg.data)
}

/// Leave-one-out retrieval mAP of `E⁽⁰⁾` on its own training set.
pub fn source_train_map(init: &InitModel, source: &DomainDataset) -> Result<f64> {
    let emb = init.encoder.embed(source.features())?;
    eval::self_retrieval_map(&emb, source)
}

/// Source loss of `enc` on a fixed batch, in train mode (batch statistics).
pub fn source_batch_loss(enc: &SingleBranchEncoder, x: &Matrix, labels: &[usize], loss: &LossConfig) -> Result<f64> {
    let mut e = enc.clone();
    let emb = e.forward(x, Mode::Train)?;
    Ok(losses::domain_loss(&emb, labels, &e.head, loss)?.total)
}
