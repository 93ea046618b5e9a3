//! Prints per-iteration mAP for each run mode, starting from the pinned
//! benchmark config with an optional JSON patch merged on top.
//!
//! ```text
//! cargo run --example compare_modes -- '{"dbscan": {"p": 0.01}}' 1,2,3
//! MODES=target_only,source_guided cargo run --example compare_modes
//! ```

use std::time::Instant;

use sguda_core::pipeline::{self, InitCache, PipelineConfig, RunMode};

fn merge(base: &mut serde_json::Value, patch: &serde_json::Value) {
    match (base, patch) {
        (serde_json::Value::Object(b), serde_json::Value::Object(p)) => {
            for (k, v) in p {
                merge(b.entry(k.clone()).or_insert(serde_json::Value::Null), v);
            }
        }
        (b, p) => *b = p.clone(),
    }
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let mut v = serde_json::to_value(PipelineConfig::pinned_benchmark()).unwrap();
    if let Some(p) = args.get(1) {
        merge(&mut v, &serde_json::from_str(p).unwrap());
    }
    let seeds: Vec<u64> = args
        .get(2)
        .map(|s| s.split(',').map(|x| x.parse().unwrap()).collect())
        .unwrap_or(vec![42]);
    let modes: Vec<String> = std::env::var("MODES")
        .unwrap_or("source_only,target_only,source_guided".into())
        .split(',')
        .map(String::from)
        .collect();
    for seed in seeds {
        let cfg: PipelineConfig = serde_json::from_value(v.clone()).unwrap();
        let cfg = pipeline::with_seed(&cfg, seed);
        let data = pipeline::generate_data(&cfg).unwrap();
        let cache = InitCache::new();
        let t = Instant::now();
        let init = cache.get_or_train(&cfg, &data.source).unwrap();
        let src = pipeline::source_train_map(&init, &data.source).unwrap();
        print!("seed {seed} init {:.1}s src_map {src:.3}", t.elapsed().as_secs_f64());
        for m in &modes {
            let mut c = cfg.clone();
            c.mode = m.parse::<RunMode>().unwrap();
            let t = Instant::now();
            match pipeline::run_cached(&c, &data, &cache) {
                Ok(a) => {
                    let maps: Vec<String> = a.reports.iter().map(|r| format!("{:.3}", r.map)).collect();
                    let cl: Vec<String> = a
                        .reports
                        .iter()
                        .zip(&a.iterations)
                        .map(|(r, i)| {
                            format!(
                                "{}/{:.2}",
                                i.clusters,
                                r.clusters.as_ref().and_then(|c| c.nmi).unwrap_or(f64::NAN)
                            )
                        })
                        .collect();
                    print!(
                        " | {m} [{}] cl[{}] {:.1}s",
                        maps.join(" "),
                        cl.join(" "),
                        t.elapsed().as_secs_f64()
                    );
                }
                Err(e) => print!(" | {m} ERR {e}"),
            }
        }
        println!();
    }
}
