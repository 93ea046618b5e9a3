//! `sguda`: generate synthetic re-ID data, train, adapt, sweep, evaluate.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde_json::Value;

use sguda_core::checkpoint::{self, Model};
use sguda_core::data::SyntheticData;
use sguda_core::encoder::{BnMode, TwoBranchEncoder};
use sguda_core::losses::Reduction;
use sguda_core::pipeline::{self, Clusterer, InitCache, PipelineConfig, RunMode, SweepAxis};
use sguda_core::{eval, gradcheck, Error};

const RESOLVED: &str = "config_resolved.json";

#[derive(Parser)]
#[command(
    name = "sguda",
    version,
    about = "Source-guided pseudo-labeling domain adaptation on synthetic re-ID data"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic benchmark as CSV files under <out>/data.
    Generate(Common),
    /// Train the initial encoder on the labeled source domain.
    InitTrain(Common),
    /// Run the full adaptation loop (or a baseline mode).
    UdaRun(Common),
    /// Run once per value of one parameter and write sweep.csv.
    Sweep(SweepArgs),
    /// Evaluate a checkpoint on the query/gallery split.
    Evaluate(EvaluateArgs),
    /// Check analytic gradients against finite differences on three seeds.
    Gradcheck(GradcheckArgs),
    /// Turn a run or sweep directory into map_vs_axis.csv.
    PlotData(PlotArgs),
}

/// Flags shared by every training command. Each one overrides the value
/// loaded from `--config`; unset flags keep the file (or default) value.
#[derive(Args, Clone)]
struct Common {
    /// TOML or JSON configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Start from the pinned benchmark settings instead of the defaults.
    #[arg(long)]
    pinned: bool,
    /// Seed for data generation and training [default: 42].
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Load data from a directory written by `generate` instead of generating it.
    #[arg(long)]
    data: Option<PathBuf>,
    /// source_guided | target_only | source_only [default: source_guided]
    #[arg(long)]
    mode: Option<RunMode>,
    /// dbscan | kmeans [default: dbscan]
    #[arg(long)]
    clusterer: Option<Clusterer>,
    /// DBSCAN: fraction of smallest pairwise distances averaged into eps [default: 0.0016]
    #[arg(long)]
    p: Option<f64>,
    /// DBSCAN core-point neighbor count [default: 4]
    #[arg(long)]
    min_samples: Option<usize>,
    /// Number of k-means clusters [default: 80]
    #[arg(long)]
    k: Option<usize>,
    /// Re-ranking neighborhood size [default: 20]
    #[arg(long)]
    k1: Option<usize>,
    /// Re-ranking query-expansion size [default: 6]
    #[arg(long)]
    k2: Option<usize>,
    /// Weight of the original distance in re-ranking [default: 0.3]
    #[arg(long)]
    lambda: Option<f64>,
    /// Number of blocks shared by both domains [default: 3]
    #[arg(long)]
    shared_depth: Option<usize>,
    /// domain_specific | shared [default: domain_specific]
    #[arg(long, value_parser = parse_bn_mode)]
    bn_mode: Option<BnMode>,
    /// Pseudo-labeling iterations [default: 5]
    #[arg(long)]
    n_iter: Option<usize>,
    /// Training epochs per iteration [default: 5]
    #[arg(long)]
    n_epoch: Option<usize>,
    /// Source initialization epochs [default: 40]
    #[arg(long)]
    init_epochs: Option<usize>,
    /// Initial learning rate of source initialization [default: 3.5e-4]
    #[arg(long)]
    lr: Option<f64>,
    /// Learning rate of the adaptation phase [default: 3.5e-4]
    #[arg(long)]
    uda_lr: Option<f64>,
    /// Identities per batch [default: 16]
    #[arg(long)]
    batch_p: Option<usize>,
    /// Samples per identity in a batch [default: 4]
    #[arg(long)]
    batch_k: Option<usize>,
    /// Batches per epoch [default: 50]
    #[arg(long)]
    batches_per_epoch: Option<usize>,
    /// Triplet margin [default: 0.3]
    #[arg(long)]
    margin: Option<f64>,
    /// Loss reduction over the batch: sum | mean [default: sum]
    #[arg(long, value_parser = parse_reduction)]
    reduction: Option<Reduction>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: Common,
    /// p | k | shared_depth
    #[arg(long)]
    axis: SweepAxis,
    /// Comma-separated axis values.
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<f64>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    common: Common,
    /// Checkpoint written by init-train or uda-run.
    #[arg(long)]
    checkpoint: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    /// First of three consecutive seeds [default: 42]
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct PlotArgs {
    /// Directory written by uda-run or sweep.
    #[arg(long)]
    run_dir: PathBuf,
}

fn parse_bn_mode(s: &str) -> Result<BnMode, String> {
    match s {
        "domain_specific" => Ok(BnMode::DomainSpecific),
        "shared" => Ok(BnMode::Shared),
        other => Err(format!("unknown batch-norm mode `{other}`")),
    }
}

fn parse_reduction(s: &str) -> Result<Reduction, String> {
    match s {
        "sum" => Ok(Reduction::Sum),
        "mean" => Ok(Reduction::Mean),
        other => Err(format!("unknown reduction `{other}`")),
    }
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                merge(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (b, p) => *b = p,
    }
}

fn read_config_file(path: &Path) -> anyhow::Result<Value> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let is_toml = path.extension().is_some_and(|e| e == "toml");
    let value = if is_toml {
        let t: toml::Value = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        serde_json::to_value(t)?
    } else {
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
    };
    Ok(value)
}

impl Common {
    /// Defaults, then the config file, then flags.
    fn resolve(&self) -> anyhow::Result<PipelineConfig> {
        let base = if self.pinned {
            PipelineConfig::pinned_benchmark()
        } else {
            PipelineConfig::default()
        };
        let mut value = serde_json::to_value(base)?;
        if let Some(path) = &self.config {
            merge(&mut value, read_config_file(path)?);
        }
        let mut c: PipelineConfig =
            serde_json::from_value(value).map_err(|e| Error::InvalidConfig(format!("config: {e}")))?;
        if let Some(s) = self.seed {
            c = pipeline::with_seed(&c, s);
        }
        macro_rules! set {
            ($flag:ident => $($field:ident).+) => {
                if let Some(v) = self.$flag.clone() {
                    c.$($field).+ = v;
                }
            };
        }
        set!(mode => mode);
        set!(clusterer => clusterer);
        set!(p => dbscan.p);
        set!(min_samples => dbscan.min_samples);
        set!(k => k);
        set!(k1 => rerank.k1);
        set!(k2 => rerank.k2);
        set!(lambda => rerank.lambda);
        set!(shared_depth => encoder.shared_depth);
        set!(bn_mode => encoder.bn_mode);
        set!(n_iter => n_iter);
        set!(n_epoch => n_epoch);
        set!(init_epochs => init_epochs);
        set!(lr => optimizer.lr);
        set!(uda_lr => uda_lr);
        set!(batch_p => pk.p);
        set!(batch_k => pk.k);
        set!(batches_per_epoch => pk.batches_per_epoch);
        set!(margin => loss.margin);
        set!(reduction => loss.reduction);
        c.validate()?;
        Ok(c)
    }

    fn dataset(&self, cfg: &PipelineConfig) -> anyhow::Result<SyntheticData> {
        Ok(match &self.data {
            Some(dir) => SyntheticData::load_dir(dir)?,
            None => pipeline::generate_data(cfg)?,
        })
    }
}

fn write(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn write_resolved(out: &Path, cfg: &PipelineConfig) -> anyhow::Result<()> {
    write(&out.join(RESOLVED), serde_json::to_string_pretty(cfg)?.as_bytes())
}

fn cmd_generate(a: &Common) -> anyhow::Result<()> {
    let cfg = a.resolve()?;
    write_resolved(&a.out, &cfg)?;
    let data = pipeline::generate_data(&cfg)?;
    data.save_dir(&a.out.join("data"))?;
    println!(
        "wrote {} source, {} target, {} query, {} gallery rows to {}",
        data.source.len(),
        data.target_train.len(),
        data.query.len(),
        data.gallery.len(),
        a.out.join("data").display()
    );
    Ok(())
}

fn cmd_init_train(a: &Common) -> anyhow::Result<()> {
    let cfg = a.resolve()?;
    write_resolved(&a.out, &cfg)?;
    let data = a.dataset(&cfg)?;
    let init = pipeline::train_init(&data.source, &cfg)?;
    let map = pipeline::source_train_map(&init, &data.source)?;
    checkpoint::save_single(&init.encoder, &a.out.join("init.ckpt"))?;
    write(
        &a.out.join("loss_curve.csv"),
        pipeline::loss_curve_csv(&init.loss_curve).as_bytes(),
    )?;
    let report = serde_json::json!({ "source_train_map": map, "seed": cfg.seed, "fingerprint": cfg.fingerprint()? });
    write(
        &a.out.join("init_report.json"),
        serde_json::to_string_pretty(&report)?.as_bytes(),
    )?;
    println!("source training mAP {map:.4}");
    Ok(())
}

fn cmd_uda_run(a: &Common) -> anyhow::Result<()> {
    let cfg = a.resolve()?;
    write_resolved(&a.out, &cfg)?;
    let data = a.dataset(&cfg)?;
    let art = pipeline::run(&cfg, &data)?;
    art.save_dir(&a.out)?;
    for (i, r) in art.reports.iter().enumerate() {
        println!(
            "iteration {}: mAP {:.4} CMC@1 {:.4}",
            i + 1,
            r.map,
            r.cmc.get(&1).copied().unwrap_or(f64::NAN)
        );
    }
    Ok(())
}

fn cmd_sweep(a: &SweepArgs) -> anyhow::Result<()> {
    let cfg = a.common.resolve()?;
    write_resolved(&a.common.out, &cfg)?;
    let data = a.common.dataset(&cfg)?;
    let cache = InitCache::new();
    let (table, _) = pipeline::sweep(&cfg, a.axis, &a.values, &data, &cache)?;
    write(
        &a.common.out.join("sweep.csv"),
        table.to_csv(&cfg.protocol.cmc_ranks).as_bytes(),
    )?;
    write(
        &a.common.out.join("sweep.json"),
        serde_json::to_string_pretty(&table)?.as_bytes(),
    )?;
    for r in &table.rows {
        match (r.map, &r.error) {
            (Some(m), _) => println!("{}={}: mAP {m:.4}", a.axis, r.value),
            (None, Some(e)) => println!("{}={}: failed: {e}", a.axis, r.value),
            _ => {}
        }
    }
    if let Some(s) = table.map_std() {
        println!("mAP std across values {s:.4}");
    }
    Ok(())
}

fn cmd_evaluate(a: &EvaluateArgs) -> anyhow::Result<()> {
    let cfg = a.common.resolve()?;
    write_resolved(&a.common.out, &cfg)?;
    let data = a.common.dataset(&cfg)?;
    let enc = match checkpoint::load(&a.checkpoint)? {
        Model::TwoBranch(e) => e,
        Model::Single(s) => {
            let c = s.config.clone();
            TwoBranchEncoder::from_init(&s, c)?
        }
    };
    let mut report = eval::evaluate(&data.query, &data.gallery, &enc, &cfg.protocol)?;
    report.fingerprint = cfg.fingerprint()?;
    report.seed = cfg.seed;
    write(&a.common.out.join("report.json"), report.to_json()?.as_bytes())?;
    println!(
        "mAP {:.4} CMC@1 {:.4}",
        report.map,
        report.cmc.get(&1).copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn cmd_gradcheck(a: &GradcheckArgs) -> anyhow::Result<()> {
    let seed = a.seed.unwrap_or(42);
    let mut results = Vec::new();
    for s in seed..seed + 3 {
        results.extend(gradcheck::run_suite(s)?);
    }
    let resolved = serde_json::json!({ "command": "gradcheck", "seed": seed });
    write(
        &a.out.join(RESOLVED),
        serde_json::to_string_pretty(&resolved)?.as_bytes(),
    )?;
    let mut failed = 0;
    for r in &results {
        println!(
            "{:<5} {:<28} seed {:<4} rel err {:.3e} (tol {:.0e})",
            if r.passed { "ok" } else { "FAIL" },
            r.name,
            r.seed,
            r.relative_error,
            r.tolerance
        );
        failed += usize::from(!r.passed);
    }
    if failed > 0 {
        bail!("{failed} of {} gradient checks failed", results.len());
    }
    Ok(())
}

/// `map_vs_axis.csv` from `sweep.csv`, or from the per-iteration reports
/// of a single run.
fn cmd_plot_data(a: &PlotArgs) -> anyhow::Result<()> {
    let sweep = a.run_dir.join("sweep.csv");
    let mut out = String::from("axis,value,map,cmc1,map_std\n");
    if sweep.exists() {
        let text = fs::read_to_string(&sweep).with_context(|| format!("reading {}", sweep.display()))?;
        let mut lines = text.lines();
        let header: Vec<&str> = lines.next().context("sweep.csv is empty")?.split(',').collect();
        let col = |name: &str| {
            header
                .iter()
                .position(|h| *h == name)
                .with_context(|| format!("sweep.csv has no `{name}` column"))
        };
        let (axis, value, map, cmc1, std) = (col("axis")?, col("value")?, col("map")?, col("cmc1")?, col("map_std")?);
        for line in lines {
            let f: Vec<&str> = line.split(',').collect();
            out.push_str(&format!("{},{},{},{},{}\n", f[axis], f[value], f[map], f[cmc1], f[std]));
        }
    } else {
        let mut t = 0;
        let mut rows = Vec::new();
        loop {
            let path = a.run_dir.join(format!("report_iter{t}.json"));
            if !path.exists() {
                if t == 0 {
                    t = 1;
                    continue;
                }
                break;
            }
            let report: Value = serde_json::from_str(&fs::read_to_string(&path)?)
                .with_context(|| format!("parsing {}", path.display()))?;
            let num = |v: &Value| v.as_f64().map_or(String::new(), |x| x.to_string());
            rows.push(format!(
                "iteration,{t},{},{},\n",
                num(&report["map"]),
                num(&report["cmc"]["1"])
            ));
            t += 1;
        }
        if rows.is_empty() {
            bail!("{} has neither sweep.csv nor report_iter1.json", a.run_dir.display());
        }
        out.extend(rows);
    }
    write(&a.run_dir.join("map_vs_axis.csv"), out.as_bytes())?;
    println!("wrote {}", a.run_dir.join("map_vs_axis.csv").display());
    Ok(())
}

fn is_usage(e: &anyhow::Error) -> bool {
    matches!(
        e.downcast_ref::<Error>(),
        Some(Error::InvalidConfig(_) | Error::Usage(_))
    )
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match &cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::InitTrain(a) => cmd_init_train(a),
        Command::UdaRun(a) => cmd_uda_run(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::PlotData(a) => cmd_plot_data(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if is_usage(&e) {
                eprintln!("run `sguda help` for usage");
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
