//! Synthetic two-domain re-ID data, CSV feature files, and the PK sampler.
//!
//! Each identity has a latent Gaussian centroid. A sample is a shared
//! affine embedding of that centroid plus a per-domain camera offset plus
//! Gaussian noise; target samples then pass through the domain-shift map
//! `x ↦ (I + shift·R/√d)·x + shift·u` with `R` Gaussian and `u` a unit
//! vector.
//!
//! Target-train identities are hidden. [`DomainDataset::identities`] fails
//! on them; the only way to read them is [`DomainDataset::hidden_identities`],
//! which takes a token that only the `eval` module can construct.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::EvalAccess;
use crate::nn::Domain;
use crate::tensor::{Matrix, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Query,
    Gallery,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Query => "query",
            Split::Gallery => "gallery",
        }
    }

    fn code(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Query => 1,
            Split::Gallery => 2,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "query" => Ok(Split::Query),
            "gallery" => Ok(Split::Gallery),
            other => Err(format!("unknown split `{other}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Identities {
    Visible(Vec<usize>),
    /// Target-train labels; `None` when the truth is unknown (e.g. loaded
    /// from a file written with `-1`).
    Hidden(Option<Vec<usize>>),
}

/// One split of one domain.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainDataset {
    domain: Domain,
    split: Split,
    features: Matrix,
    identities: Identities,
    cameras: Vec<usize>,
}

impl DomainDataset {
    /// Dataset with visible identities. Target-train data is always hidden,
    /// whatever constructor is used.
    pub fn new(
        domain: Domain,
        split: Split,
        features: Matrix,
        identities: Vec<usize>,
        cameras: Vec<usize>,
    ) -> Result<Self> {
        Self::build(domain, split, features, Some(identities), cameras)
    }

    /// Dataset whose identities are unknown.
    pub fn unlabeled(domain: Domain, split: Split, features: Matrix, cameras: Vec<usize>) -> Result<Self> {
        if !(domain == Domain::Target && split == Split::Train) {
            return Err(Error::InvalidConfig(format!(
                "only target/train data may be unlabeled, got {domain}/{split}"
            )));
        }
        Self::build(domain, split, features, None, cameras)
    }

    fn build(
        domain: Domain,
        split: Split,
        features: Matrix,
        identities: Option<Vec<usize>>,
        cameras: Vec<usize>,
    ) -> Result<Self> {
        let n = features.rows();
        if cameras.len() != n || identities.as_ref().is_some_and(|ids| ids.len() != n) {
            return Err(Error::InvalidConfig(format!(
                "{domain}/{split}: {n} feature rows but {} cameras and {} identities",
                cameras.len(),
                identities.as_ref().map_or(n, Vec::len)
            )));
        }
        let identities = if domain == Domain::Target && split == Split::Train {
            Identities::Hidden(identities)
        } else {
            Identities::Visible(identities.ok_or(Error::LabelsHidden)?)
        };
        Ok(Self {
            domain,
            split,
            features,
            identities,
            cameras,
        })
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn cameras(&self) -> &[usize] {
        &self.cameras
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn input_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn is_hidden(&self) -> bool {
        matches!(self.identities, Identities::Hidden(_))
    }

    /// Identity labels; [`Error::LabelsHidden`] for target-train data.
    pub fn identities(&self) -> Result<&[usize]> {
        match &self.identities {
            Identities::Visible(ids) => Ok(ids),
            Identities::Hidden(_) => Err(Error::LabelsHidden),
        }
    }

    /// Identity labels including hidden ones. The token can only be made
    /// inside `eval`:
    ///
    /// ```compile_fail
    /// let token = sguda_core::eval::EvalAccess { _sealed: () };
    /// ```
    pub fn hidden_identities(&self, _access: &EvalAccess) -> Result<&[usize]> {
        match &self.identities {
            Identities::Visible(ids) | Identities::Hidden(Some(ids)) => Ok(ids),
            Identities::Hidden(None) => Err(Error::LabelsHidden),
        }
    }

    /// Attach ground truth to a hidden dataset (e.g. read from a truth file).
    pub fn attach_hidden_truth(&mut self, truth: Vec<usize>) -> Result<()> {
        if truth.len() != self.len() {
            return Err(Error::InvalidConfig(format!(
                "truth has {} labels for {} rows",
                truth.len(),
                self.len()
            )));
        }
        match &mut self.identities {
            Identities::Hidden(slot) => {
                *slot = Some(truth);
                Ok(())
            }
            Identities::Visible(_) => Err(Error::Usage("dataset labels are not hidden".into())),
        }
    }

    /// Identities re-indexed to `0..M` in order of first appearance of the
    /// sorted identity values, plus `M`.
    pub fn class_labels(&self) -> Result<(Vec<usize>, usize)> {
        Ok(compact_labels(self.identities()?))
    }

    /// Rows `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> DomainDataset {
        let identities = match &self.identities {
            Identities::Visible(ids) => Identities::Visible(indices.iter().map(|&i| ids[i]).collect()),
            Identities::Hidden(t) => {
                Identities::Hidden(t.as_ref().map(|ids| indices.iter().map(|&i| ids[i]).collect()))
            }
        };
        DomainDataset {
            domain: self.domain,
            split: self.split,
            features: self.features.select_rows(indices),
            identities,
            cameras: indices.iter().map(|&i| self.cameras[i]).collect(),
        }
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        out.push_str("domain,split,identity,camera");
        for c in 0..self.input_dim() {
            out.push_str(&format!(",f{c}"));
        }
        out.push('\n');
        for i in 0..self.len() {
            let id = match &self.identities {
                Identities::Visible(ids) => ids[i].to_string(),
                Identities::Hidden(_) => "-1".to_string(),
            };
            out.push_str(&format!("{},{},{},{}", self.domain, self.split, id, self.cameras[i]));
            for v in self.features.row(i) {
                out.push_str(&format!(",{}", fmt_f64(*v)));
            }
            out.push('\n');
        }
        write_file(path, out.as_bytes())
    }

    pub fn load_csv(path: &Path) -> Result<DomainDataset> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let schema = |message: String| Error::Schema {
            path: path.to_path_buf(),
            message,
        };
        let mut lines = text.lines().enumerate();
        let (_, header) = lines
            .next()
            .ok_or_else(|| schema("empty file, header missing".into()))?;
        let cols: Vec<&str> = header.split(',').collect();
        let fixed = ["domain", "split", "identity", "camera"];
        if cols.len() < fixed.len() || cols[..fixed.len()] != fixed {
            return Err(schema(format!("header must start with `{}`", fixed.join(","))));
        }
        let dim = cols.len() - fixed.len();
        if dim == 0 {
            return Err(schema("no feature columns".into()));
        }
        for (c, name) in cols[fixed.len()..].iter().enumerate() {
            if *name != format!("f{c}") {
                return Err(schema(format!("expected column `f{c}`, found `{name}`")));
            }
        }

        let mut meta: Option<(Domain, Split)> = None;
        let mut ids: Vec<i64> = Vec::new();
        let mut cameras = Vec::new();
        let mut data = Vec::new();
        for (idx, line) in lines {
            let lineno = idx + 1;
            if line.is_empty() {
                continue;
            }
            let parse_err = |message: String| Error::Parse {
                path: path.to_path_buf(),
                line: lineno,
                message,
            };
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != cols.len() {
                return Err(parse_err(format!(
                    "expected {} columns, found {}",
                    cols.len(),
                    fields.len()
                )));
            }
            let domain: Domain = fields[0].parse().map_err(|e: Error| parse_err(e.to_string()))?;
            let split: Split = fields[1].parse().map_err(parse_err)?;
            match meta {
                None => meta = Some((domain, split)),
                Some(m) if m != (domain, split) => {
                    return Err(parse_err(format!("row is {domain}/{split}, file is {}/{}", m.0, m.1)));
                }
                Some(_) => {}
            }
            let id: i64 = fields[2]
                .parse()
                .map_err(|_| parse_err(format!("bad identity `{}`", fields[2])))?;
            if id < -1 {
                return Err(parse_err(format!("bad identity `{id}`")));
            }
            ids.push(id);
            cameras.push(
                fields[3]
                    .parse::<usize>()
                    .map_err(|_| parse_err(format!("bad camera `{}`", fields[3])))?,
            );
            for f in &fields[4..] {
                let v: f64 = f.parse().map_err(|_| parse_err(format!("bad number `{f}`")))?;
                data.push(v);
            }
        }
        let (domain, split) = meta.ok_or_else(|| schema("no data rows".into()))?;
        let features = Matrix::new(ids.len(), dim, data)?;
        let hidden_count = ids.iter().filter(|&&i| i == -1).count();
        if hidden_count == ids.len() {
            DomainDataset::unlabeled(domain, split, features, cameras).map_err(|e| schema(e.to_string()))
        } else if hidden_count == 0 {
            let ids = ids.into_iter().map(|i| i as usize).collect();
            DomainDataset::new(domain, split, features, ids, cameras)
        } else {
            Err(schema("identity column mixes hidden (-1) and visible values".into()))
        }
    }
}

/// Compact arbitrary labels to `0..M`, ordered by label value.
pub fn compact_labels(labels: &[usize]) -> (Vec<usize>, usize) {
    let distinct: BTreeSet<usize> = labels.iter().copied().collect();
    let index: BTreeMap<usize, usize> = distinct.iter().enumerate().map(|(i, &l)| (l, i)).collect();
    (labels.iter().map(|l| index[l]).collect(), distinct.len())
}

/// 17 significant digits, which round-trips every `f64`.
pub(crate) fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub num_source_identities: usize,
    pub num_target_identities: usize,
    /// Held-out target identities used for query/gallery.
    pub num_test_identities: usize,
    pub samples_per_identity: usize,
    pub query_per_identity: usize,
    pub gallery_per_identity: usize,
    pub num_cameras: usize,
    pub latent_dim: usize,
    pub input_dim: usize,
    /// Std of the latent identity centroids.
    pub identity_std: f64,
    /// Magnitude of the target domain-shift map.
    pub domain_shift: f64,
    pub camera_noise_std: f64,
    pub sample_noise_std: f64,
    /// Global index of the first target identity. `None` places target
    /// identities right after the source ones, so the domains share no
    /// identity.
    pub target_identity_offset: Option<usize>,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_source_identities: 100,
            num_target_identities: 80,
            num_test_identities: 80,
            samples_per_identity: 20,
            query_per_identity: 2,
            gallery_per_identity: 8,
            num_cameras: 4,
            latent_dim: 16,
            input_dim: 32,
            identity_std: 1.0,
            domain_shift: 1.0,
            camera_noise_std: 0.5,
            sample_noise_std: 0.5,
            target_identity_offset: None,
            seed: 42,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        let counts = [
            self.num_source_identities,
            self.num_target_identities,
            self.num_test_identities,
            self.samples_per_identity,
            self.latent_dim,
            self.input_dim,
        ];
        if counts.contains(&0) {
            return bad("identity, sample and dimension counts must be >= 1");
        }
        if self.num_cameras < 2 {
            return bad("num_cameras must be >= 2");
        }
        let stds = [
            self.identity_std,
            self.domain_shift,
            self.camera_noise_std,
            self.sample_noise_std,
        ];
        if stds.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return bad("std and shift parameters must be finite and >= 0");
        }
        if self.query_per_identity == 0 || self.gallery_per_identity == 0 {
            return bad("infeasible split: query and gallery need >= 1 sample per identity");
        }
        if self.gallery_per_identity < 2 && self.query_per_identity > 1 {
            // a single gallery camera cannot differ from several query cameras
            return bad("infeasible split: one gallery sample per identity allows only one query");
        }
        Ok(())
    }

    fn target_offset(&self) -> usize {
        self.target_identity_offset.unwrap_or(self.num_source_identities)
    }
}

/// Generated benchmark: labeled source train plus target train/query/gallery.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticData {
    pub source: DomainDataset,
    pub target_train: DomainDataset,
    pub query: DomainDataset,
    pub gallery: DomainDataset,
}

pub const SOURCE_FILE: &str = "source_train.csv";
pub const TARGET_TRAIN_FILE: &str = "target_train.csv";
pub const QUERY_FILE: &str = "target_query.csv";
pub const GALLERY_FILE: &str = "target_gallery.csv";
pub const TRUTH_FILE: &str = "target_train_truth.csv";

impl SyntheticData {
    /// Writes the four splits plus `target_train_truth.csv` (`index,identity`)
    /// when the hidden truth is known.
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        self.source.save_csv(&dir.join(SOURCE_FILE))?;
        self.target_train.save_csv(&dir.join(TARGET_TRAIN_FILE))?;
        self.query.save_csv(&dir.join(QUERY_FILE))?;
        self.gallery.save_csv(&dir.join(GALLERY_FILE))?;
        if let Identities::Hidden(Some(truth)) = &self.target_train.identities {
            let mut out = String::from("index,identity\n");
            for (i, id) in truth.iter().enumerate() {
                out.push_str(&format!("{i},{id}\n"));
            }
            write_file(&dir.join(TRUTH_FILE), out.as_bytes())?;
        }
        Ok(())
    }

    pub fn load_dir(dir: &Path) -> Result<Self> {
        let load = |name: &str, domain: Domain, split: Split| -> Result<DomainDataset> {
            let path = dir.join(name);
            let d = DomainDataset::load_csv(&path)?;
            if (d.domain, d.split) != (domain, split) {
                return Err(Error::Schema {
                    path,
                    message: format!("expected {domain}/{split}, found {}/{}", d.domain, d.split),
                });
            }
            Ok(d)
        };
        let mut target_train = load(TARGET_TRAIN_FILE, Domain::Target, Split::Train)?;
        let truth_path = dir.join(TRUTH_FILE);
        if truth_path.exists() {
            target_train.attach_hidden_truth(load_truth(&truth_path, target_train.len())?)?;
        }
        Ok(Self {
            source: load(SOURCE_FILE, Domain::Source, Split::Train)?,
            target_train,
            query: load(QUERY_FILE, Domain::Target, Split::Query)?,
            gallery: load(GALLERY_FILE, Domain::Target, Split::Gallery)?,
        })
    }
}

fn load_truth(path: &PathBuf, n: usize) -> Result<Vec<usize>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, "index,identity")) => {}
        _ => {
            return Err(Error::Schema {
                path: path.clone(),
                message: "header must be `index,identity`".into(),
            })
        }
    }
    let mut truth = vec![None; n];
    for (idx, line) in lines {
        if line.is_empty() {
            continue;
        }
        let err = |message: String| Error::Parse {
            path: path.clone(),
            line: idx + 1,
            message,
        };
        let (i, id) = line.split_once(',').ok_or_else(|| err("expected 2 columns".into()))?;
        let i: usize = i.parse().map_err(|_| err(format!("bad index `{i}`")))?;
        let id: usize = id.parse().map_err(|_| err(format!("bad identity `{id}`")))?;
        *truth.get_mut(i).ok_or_else(|| err(format!("index {i} out of range")))? = Some(id);
    }
    truth
        .into_iter()
        .enumerate()
        .map(|(i, t)| {
            t.ok_or_else(|| Error::Schema {
                path: path.clone(),
                message: format!("no identity for row {i}"),
            })
        })
        .collect()
}

// RNG stream layout for generation.
const STREAM_MODEL: u64 = 0;
const STREAM_CENTROID: u64 = 1 << 40;
const STREAM_SAMPLES: u64 = 2 << 40;

struct Generator<'a> {
    cfg: &'a SynthConfig,
    embed: Matrix,
    embed_bias: Vec<f64>,
    camera_offsets: BTreeMap<Domain, Matrix>,
    shift_map: Matrix,
    shift_offset: Vec<f64>,
}

impl<'a> Generator<'a> {
    fn new(cfg: &'a SynthConfig) -> Self {
        let mut rng = Rng::stream(cfg.seed, STREAM_MODEL);
        let (d, l) = (cfg.input_dim, cfg.latent_dim);
        let embed = rng.gaussian_matrix(l, d, 1.0 / (l as f64).sqrt());
        let embed_bias = rng.gaussian_vec(d, 1.0);
        let mut camera_offsets = BTreeMap::new();
        for domain in Domain::ALL {
            camera_offsets.insert(domain, rng.gaussian_matrix(cfg.num_cameras, d, cfg.camera_noise_std));
        }
        let r = rng.gaussian_matrix(d, d, 1.0);
        let s = cfg.domain_shift;
        let shift_map = Matrix::from_fn(d, d, |i, j| {
            let id = if i == j { 1.0 } else { 0.0 };
            id + s * r.get(i, j) / (d as f64).sqrt()
        });
        let u = rng.gaussian_vec(d, 1.0);
        let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
        let shift_offset = u.iter().map(|v| s * v / norm).collect();
        Self {
            cfg,
            embed,
            embed_bias,
            camera_offsets,
            shift_map,
            shift_offset,
        }
    }

    fn centroid(&self, identity: usize) -> Matrix {
        let mut rng = Rng::stream(self.cfg.seed, STREAM_CENTROID + identity as u64);
        rng.gaussian_matrix(1, self.cfg.latent_dim, self.cfg.identity_std)
    }

    /// Samples of one identity; `cameras[j]` is the camera of sample `j`.
    fn samples(&self, domain: Domain, split: Split, identity: usize, cameras: &[usize]) -> Result<Matrix> {
        let domain_code = match domain {
            Domain::Source => 0,
            Domain::Target => 1,
        };
        let tag = STREAM_SAMPLES + (domain_code << 36) + (split.code() << 32) + identity as u64;
        let mut rng = Rng::stream(self.cfg.seed, tag);
        let base = self.centroid(identity).matmul(&self.embed)?;
        let offsets = &self.camera_offsets[&domain];
        let d = self.cfg.input_dim;
        let mut x = Matrix::from_fn(cameras.len(), d, |j, c| {
            base.get(0, c) + self.embed_bias[c] + offsets.get(cameras[j], c)
        });
        for v in x.data_mut() {
            *v += self.cfg.sample_noise_std * rng.normal();
        }
        if domain == Domain::Target {
            x = x.matmul_t(&self.shift_map)?;
            x.add_row_broadcast(&self.shift_offset)?;
        }
        Ok(x)
    }
}

struct Builder {
    rows: Vec<Matrix>,
    ids: Vec<usize>,
    cameras: Vec<usize>,
}

impl Builder {
    fn new() -> Self {
        Self {
            rows: Vec::new(),
            ids: Vec::new(),
            cameras: Vec::new(),
        }
    }

    fn push(&mut self, x: Matrix, id: usize, cameras: Vec<usize>) {
        self.ids.extend(std::iter::repeat_n(id, x.rows()));
        self.cameras.extend(cameras);
        self.rows.push(x);
    }

    fn finish(self, domain: Domain, split: Split, dim: usize) -> Result<DomainDataset> {
        let n: usize = self.rows.iter().map(Matrix::rows).sum();
        let mut data = Vec::with_capacity(n * dim);
        for m in self.rows {
            data.extend(m.into_data());
        }
        DomainDataset::new(domain, split, Matrix::new(n, dim, data)?, self.ids, self.cameras)
    }
}

/// Generate the benchmark described by `cfg`. Seed-deterministic.
pub fn generate(cfg: &SynthConfig) -> Result<SyntheticData> {
    cfg.validate()?;
    let g = Generator::new(cfg);
    let d = cfg.input_dim;
    let mut cam_rng = Rng::stream(cfg.seed, STREAM_MODEL + 1);

    let mut source = Builder::new();
    for id in 0..cfg.num_source_identities {
        let cams: Vec<usize> = (0..cfg.samples_per_identity)
            .map(|_| cam_rng.below(cfg.num_cameras))
            .collect();
        source.push(g.samples(Domain::Source, Split::Train, id, &cams)?, id, cams);
    }

    let offset = cfg.target_offset();
    let mut target = Builder::new();
    for id in offset..offset + cfg.num_target_identities {
        let cams: Vec<usize> = (0..cfg.samples_per_identity)
            .map(|_| cam_rng.below(cfg.num_cameras))
            .collect();
        target.push(g.samples(Domain::Target, Split::Train, id, &cams)?, id, cams);
    }

    let mut query = Builder::new();
    let mut gallery = Builder::new();
    let first_test = offset + cfg.num_target_identities;
    for id in first_test..first_test + cfg.num_test_identities {
        // Query cameras cycle from a random start; gallery cameras continue
        // the cycle so each query has a gallery match on another camera.
        let start = cam_rng.below(cfg.num_cameras);
        let q_cams: Vec<usize> = (0..cfg.query_per_identity)
            .map(|k| (start + k) % cfg.num_cameras)
            .collect();
        let mut g_cams: Vec<usize> = (0..cfg.gallery_per_identity)
            .map(|k| (start + cfg.query_per_identity + k) % cfg.num_cameras)
            .collect();
        if q_cams.iter().any(|q| g_cams.iter().all(|c| c == q)) {
            g_cams[0] = (q_cams[0] + 1) % cfg.num_cameras;
        }
        cam_rng.shuffle(&mut g_cams);
        query.push(g.samples(Domain::Target, Split::Query, id, &q_cams)?, id, q_cams);
        gallery.push(g.samples(Domain::Target, Split::Gallery, id, &g_cams)?, id, g_cams);
    }

    let data = SyntheticData {
        source: source.finish(Domain::Source, Split::Train, d)?,
        target_train: target.finish(Domain::Target, Split::Train, d)?,
        query: query.finish(Domain::Target, Split::Query, d)?,
        gallery: gallery.finish(Domain::Target, Split::Gallery, d)?,
    };
    check_protocol(&data.query, &data.gallery)?;
    Ok(data)
}

/// Every query row must have a same-identity gallery row on another camera.
pub fn check_protocol(query: &DomainDataset, gallery: &DomainDataset) -> Result<()> {
    let (qi, gi) = (query.identities()?, gallery.identities()?);
    for (q, (&id, &cam)) in qi.iter().zip(query.cameras()).enumerate() {
        let ok = gi
            .iter()
            .zip(gallery.cameras())
            .any(|(&g_id, &g_cam)| g_id == id && g_cam != cam);
        if !ok {
            return Err(Error::NoValidMatch { query: q });
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PkConfig {
    /// Identities per batch.
    pub p: usize,
    /// Samples per identity.
    pub k: usize,
    /// Batches per epoch.
    pub batches_per_epoch: usize,
}

impl Default for PkConfig {
    fn default() -> Self {
        Self {
            p: 16,
            k: 4,
            batches_per_epoch: 50,
        }
    }
}

impl PkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.p < 2 || self.k < 2 {
            return Err(Error::InvalidConfig(format!(
                "PK sampler needs P >= 2 and K >= 2, got {}x{}",
                self.p, self.k
            )));
        }
        if self.batches_per_epoch == 0 {
            return Err(Error::InvalidConfig("batches_per_epoch must be >= 1".into()));
        }
        Ok(())
    }

    pub fn batch_size(&self) -> usize {
        self.p * self.k
    }
}

/// Identity-balanced batch sampler.
///
/// Labels are drawn from a queue of shuffled label permutations. When a
/// drawn label is already in the batch it is deferred to the front of the
/// queue, so visit counts of any two labels never differ by more than one
/// between batches.
#[derive(Clone, Debug)]
pub struct PkSampler {
    cfg: PkConfig,
    groups: Vec<Vec<usize>>,
    queue: VecDeque<usize>,
    rng: Rng,
}

/// Sampler over rows whose class is `labels[row]`; labels need not be
/// contiguous.
pub fn pk_batches(labels: &[usize], cfg: &PkConfig, rng: Rng) -> Result<PkSampler> {
    cfg.validate()?;
    let mut by_label: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (row, &l) in labels.iter().enumerate() {
        by_label.entry(l).or_default().push(row);
    }
    if by_label.len() < cfg.p {
        return Err(Error::NotEnoughLabels {
            available: by_label.len(),
            required: cfg.p,
        });
    }
    Ok(PkSampler {
        cfg: cfg.clone(),
        groups: by_label.into_values().collect(),
        queue: VecDeque::new(),
        rng,
    })
}

impl PkSampler {
    pub fn config(&self) -> &PkConfig {
        &self.cfg
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        let mut chosen: Vec<usize> = Vec::with_capacity(self.cfg.p);
        let mut deferred: Vec<usize> = Vec::new();
        while chosen.len() < self.cfg.p {
            if self.queue.is_empty() {
                let mut perm: Vec<usize> = (0..self.groups.len()).collect();
                self.rng.shuffle(&mut perm);
                self.queue.extend(perm);
            }
            let g = self.queue.pop_front().expect("queue refilled above");
            if chosen.contains(&g) {
                deferred.push(g);
            } else {
                chosen.push(g);
            }
        }
        for g in deferred.into_iter().rev() {
            self.queue.push_front(g);
        }

        let k = self.cfg.k;
        let mut batch = Vec::with_capacity(self.cfg.batch_size());
        for g in chosen {
            let mut members = self.groups[g].clone();
            self.rng.shuffle(&mut members);
            if members.len() >= k {
                batch.extend_from_slice(&members[..k]);
            } else {
                let n = members.len();
                batch.extend_from_slice(&members);
                for _ in n..k {
                    batch.push(members[self.rng.below(n)]);
                }
            }
        }
        batch
    }

    /// One epoch of `batches_per_epoch` batches.
    pub fn epoch(&mut self) -> Vec<Vec<usize>> {
        (0..self.cfg.batches_per_epoch).map(|_| self.next_batch()).collect()
    }
}

impl Iterator for PkSampler {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        Some(self.next_batch())
    }
}
