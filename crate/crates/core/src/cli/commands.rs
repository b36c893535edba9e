use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Map, Value};

use super::config::RunConfig;
use crate::data::{split_dataset, write_synthetic, Dataset, SyntheticSpec};
use crate::eval::{evaluate, sparsity, MetricsReport};
use crate::models::{build_model, Arch, Mode, ModelConfig};
use crate::training::{train_pipeline, PipelineResult};
use crate::{Error, Result};

/// Environment variable bounding the worker threads used across seeds.
pub const THREADS_ENV: &str = "MOELORA_THREADS";

/// Creates `out`, refusing to reuse an existing path unless `force`, in which
/// case the old directory is removed first.
pub fn prepare_out(out: &Path, force: bool) -> Result<()> {
    if out.exists() {
        if !force {
            return Err(Error::Config(format!("{} already exists; pass --force to replace it", out.display())));
        }
        if out.is_dir() {
            fs::remove_dir_all(out)?;
        } else {
            fs::remove_file(out)?;
        }
    }
    fs::create_dir_all(out)?;
    Ok(())
}

fn write_jsonl(path: &Path, records: &[Value]) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for r in records {
        writeln!(f, "{r}")?;
    }
    f.flush()?;
    Ok(())
}

fn tagged(mut record: Value, tags: &Map<String, Value>) -> Value {
    if let Value::Object(obj) = &mut record {
        for (k, v) in tags {
            obj.insert(k.clone(), v.clone());
        }
    }
    record
}

/// Maps `f` over `items` on a pool sized by [`THREADS_ENV`], keeping order.
fn par_map<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> Result<R> + Sync + Send) -> Result<Vec<R>> {
    let threads = std::env::var(THREADS_ENV).ok().and_then(|v| v.parse::<usize>().ok()).unwrap_or(0);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| items.par_iter().map(&f).collect())
}

#[derive(Debug, Clone, Serialize)]
pub struct GenerateSummary {
    pub csv: PathBuf,
    pub sidecar: PathBuf,
    pub rows: usize,
    pub domains: usize,
    pub sparsity: f64,
    pub positive_rate: f64,
}

/// Generates `spec` into `out/data.csv` with its sidecar.
pub fn cmd_generate(spec: &SyntheticSpec, out: &Path) -> Result<GenerateSummary> {
    let ds = crate::data::generate_synthetic(spec)?;
    let csv = out.join("data.csv");
    let sidecar = write_synthetic(spec, &ds, &csv)?;
    let present = ds.domain_counts().iter().filter(|&&c| c > 0).count();
    let summary = GenerateSummary {
        csv,
        sidecar,
        rows: ds.len(),
        domains: present,
        sparsity: sparsity(&ds)?.overall,
        positive_rate: ds.positive_rate(),
    };
    // paths relative to `out` keep the record identical across output directories
    let relative = |p: &Path| p.strip_prefix(out).unwrap_or(p).to_path_buf();
    let record = GenerateSummary { csv: relative(&summary.csv), sidecar: relative(&summary.sidecar), ..summary.clone() };
    fs::write(out.join("summary.json"), serde_json::to_string(&record).expect("serializes") + "\n")?;
    Ok(summary)
}

/// One pipeline run on one seed's split.
pub fn run_seed(cfg: &RunConfig, ds: &Dataset, model_cfg: &ModelConfig, seed: u64, dir: Option<&Path>) -> Result<PipelineResult> {
    let (train, val, test) = split_dataset(ds, cfg.data.split, seed)?;
    let model = build_model(ds.schema(), model_cfg, seed)?;
    let train_cfg = crate::training::TrainConfig { seed, ..cfg.train.clone() };
    let mut result = train_pipeline(&train_cfg, model, &train, &val, &test, dir)?;
    if cfg.data.train_weights {
        let scores = result.test_predictions.clone();
        result.metrics = evaluate(&move |_: &Dataset| Ok(scores.clone()), &test, Some(train.domain_counts()))?;
    }
    Ok(result)
}

fn run_tags(hash: &str, seed: u64, model_cfg: &ModelConfig) -> Map<String, Value> {
    let mut m = Map::new();
    m.insert("config_hash".into(), json!(hash));
    m.insert("seed".into(), json!(seed));
    m.insert("arch".into(), json!(model_cfg.arch));
    m.insert("mode".into(), json!(model_cfg.mode));
    if model_cfg.mode == Mode::Moe {
        m.insert("experts_per_domain".into(), json!(model_cfg.adapter.experts_per_domain));
    }
    m
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainSummary {
    pub config_hash: String,
    pub per_seed: Vec<(u64, f64)>,
    pub mean_wauc: f64,
    pub metrics: Vec<MetricsReport>,
}

fn mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.into_iter().collect();
    v.iter().sum::<f64>() / v.len() as f64
}

/// Trains once per seed into `out/seed-<s>/` and writes per-seed and averaged
/// metrics records to `out/metrics.jsonl`.
pub fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<TrainSummary> {
    cfg.validate()?;
    let hash = cfg.hash();
    fs::write(out.join("config.toml"), cfg.to_toml()?)?;
    let ds = cfg.dataset()?;
    let runs = par_map(&cfg.seeds, |&seed| {
        let dir = out.join(format!("seed-{seed}"));
        fs::create_dir_all(&dir)?;
        let result = run_seed(cfg, &ds, &cfg.model, seed, Some(&dir))?;
        let tags = run_tags(&hash, seed, &cfg.model);
        let phases: Vec<Value> = result
            .phases
            .iter()
            .map(|p| tagged(serde_json::to_value(p).expect("serializes"), &tags))
            .collect();
        write_jsonl(&dir.join("phases.jsonl"), &phases)?;
        let records: Vec<Value> = result.metrics.records().into_iter().map(|r| tagged(r, &tags)).collect();
        write_jsonl(&dir.join("metrics.jsonl"), &records)?;
        Ok((seed, result.metrics, records))
    })?;
    let mut all = Vec::new();
    for (_, _, records) in &runs {
        all.extend(records.iter().cloned());
    }
    let per_seed: Vec<(u64, f64)> = runs.iter().map(|(s, m, _)| (*s, m.wauc)).collect();
    let mean_wauc = mean(per_seed.iter().map(|p| p.1));
    all.push(json!({
        "record": "average",
        "config_hash": hash,
        "arch": cfg.model.arch,
        "mode": cfg.model.mode,
        "seeds": cfg.seeds,
        "wauc": mean_wauc,
    }));
    write_jsonl(&out.join("metrics.jsonl"), &all)?;
    Ok(TrainSummary { config_hash: hash, per_seed, mean_wauc, metrics: runs.into_iter().map(|r| r.1).collect() })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareRow {
    pub arch: Arch,
    pub mode: Mode,
    pub wauc: f64,
    /// WAUC minus the baseline row of the same arch (mlora when listed,
    /// otherwise the first listed mode).
    pub delta: f64,
    pub domain_aucs: Vec<Option<f64>>,
    pub per_seed: Vec<f64>,
}

/// Seed-averaged WAUC per (arch, mode) and the difference to the baseline.
pub fn cmd_compare(cfg: &RunConfig, out: &Path) -> Result<Vec<CompareRow>> {
    cfg.validate()?;
    if cfg.compare.modes.len() < 2 {
        return Err(Error::Config("compare needs at least two modes".into()));
    }
    if cfg.compare.archs.is_empty() {
        return Err(Error::Config("compare needs at least one arch".into()));
    }
    let hash = cfg.hash();
    fs::write(out.join("config.toml"), cfg.to_toml()?)?;
    let ds = cfg.dataset()?;
    let mut unique: Vec<(Arch, Mode)> = Vec::new();
    for &arch in &cfg.compare.archs {
        for &mode in &cfg.compare.modes {
            if !unique.contains(&(arch, mode)) {
                unique.push((arch, mode));
            }
        }
    }
    let jobs: Vec<(Arch, Mode, u64)> =
        unique.iter().flat_map(|&(a, m)| cfg.seeds.iter().map(move |&s| (a, m, s))).collect();
    let results = par_map(&jobs, |&(arch, mode, seed)| {
        let model_cfg = ModelConfig { arch, mode, ..cfg.model.clone() };
        let r = run_seed(cfg, &ds, &model_cfg, seed, None)?;
        let tags = run_tags(&hash, seed, &model_cfg);
        let records: Vec<Value> = r.metrics.records().into_iter().map(|rec| tagged(rec, &tags)).collect();
        Ok((r.metrics, records))
    })?;
    let mut records = Vec::new();
    let mut averaged = Vec::new();
    for (a, m) in &unique {
        let runs: Vec<&MetricsReport> =
            jobs.iter().zip(&results).filter(|((ja, jm, _), _)| ja == a && jm == m).map(|(_, r)| &r.0).collect();
        let per_seed: Vec<f64> = runs.iter().map(|r| r.wauc).collect();
        let domain_aucs: Vec<Option<f64>> = (0..ds.n_domains())
            .map(|d| {
                let v: Vec<f64> = runs.iter().filter_map(|r| r.per_domain[d].auc).collect();
                (!v.is_empty()).then(|| mean(v))
            })
            .collect();
        averaged.push((*a, *m, mean(per_seed.iter().copied()), domain_aucs, per_seed));
    }
    for (_, (_, recs)) in jobs.iter().zip(&results) {
        records.extend(recs.iter().cloned());
    }
    let baseline_mode = if cfg.compare.modes.contains(&Mode::Mlora) { Mode::Mlora } else { cfg.compare.modes[0] };
    let mut rows = Vec::new();
    for &arch in &cfg.compare.archs {
        let base = averaged.iter().find(|r| r.0 == arch && r.1 == baseline_mode).expect("baseline computed").2;
        for &mode in &cfg.compare.modes {
            let r = averaged.iter().find(|r| r.0 == arch && r.1 == mode).expect("computed");
            rows.push(CompareRow { arch, mode, wauc: r.2, delta: r.2 - base, domain_aucs: r.3.clone(), per_seed: r.4.clone() });
        }
    }
    for r in &rows {
        records.push(json!({
            "record": "compare",
            "config_hash": hash,
            "arch": r.arch,
            "mode": r.mode,
            "baseline": baseline_mode,
            "seeds": cfg.seeds,
            "wauc": r.wauc,
            "delta": r.delta,
            "domain_aucs": r.domain_aucs,
        }));
    }
    write_jsonl(&out.join("metrics.jsonl"), &records)?;
    fs::write(out.join("compare.csv"), compare_csv(&rows, &hash, ds.n_domains()))?;
    Ok(rows)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x}"))
}

pub fn compare_csv(rows: &[CompareRow], hash: &str, n_domains: usize) -> String {
    let mut s = String::from("arch,mode,wauc,delta");
    for d in 0..n_domains {
        let _ = write!(s, ",auc_d{d}");
    }
    s.push_str(",config_hash\n");
    for r in rows {
        let _ = write!(s, "{},{},{},{}", r.arch, r.mode, r.wauc, r.delta);
        for a in &r.domain_aucs {
            let _ = write!(s, ",{}", fmt_opt(*a));
        }
        let _ = writeln!(s, ",{hash}");
    }
    s
}

/// Human-readable comparison table.
pub fn compare_table(rows: &[CompareRow]) -> String {
    let mut s = format!("{:<8} {:<6} {:>8} {:>8}", "arch", "mode", "wauc", "delta");
    if let Some(r) = rows.first() {
        for d in 0..r.domain_aucs.len() {
            let _ = write!(s, " {:>8}", format!("auc_d{d}"));
        }
    }
    s.push('\n');
    for r in rows {
        let _ = write!(s, "{:<8} {:<6} {:>8.4} {:>+8.4}", r.arch.as_str(), r.mode.as_str(), r.wauc, r.delta);
        for a in &r.domain_aucs {
            let _ = write!(s, " {:>8}", a.map_or_else(|| "-".to_string(), |x| format!("{x:.4}")));
        }
        s.push('\n');
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub arch: Arch,
    pub total_experts: usize,
    pub experts_per_domain: usize,
    pub seed: u64,
    pub wauc: f64,
}

/// Full moe pipeline for each total expert count, arch and seed.
pub fn cmd_sweep_experts(cfg: &RunConfig, counts: &[usize], out: &Path) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    if counts.is_empty() {
        return Err(Error::Config("expert count list is empty".into()));
    }
    let hash = cfg.hash();
    let ds = cfg.dataset()?;
    let n = ds.n_domains();
    if let Some(bad) = counts.iter().find(|&&c| c == 0 || c % n != 0) {
        return Err(Error::Config(format!("expert count {bad} is not a positive multiple of {n} domains")));
    }
    fs::write(out.join("config.toml"), cfg.to_toml()?)?;
    let jobs: Vec<(Arch, usize, u64)> = cfg
        .sweep
        .archs
        .iter()
        .flat_map(|&a| counts.iter().flat_map(move |&c| cfg.seeds.iter().map(move |&s| (a, c, s))))
        .collect();
    let rows = par_map(&jobs, |&(arch, total, seed)| {
        let mut model_cfg = ModelConfig { arch, mode: Mode::Moe, ..cfg.model.clone() };
        model_cfg.adapter.experts_per_domain = total / n;
        model_cfg.adapter.clamp_one_hot = false;
        let r = run_seed(cfg, &ds, &model_cfg, seed, None)?;
        Ok(SweepRow { arch, total_experts: total, experts_per_domain: total / n, seed, wauc: r.metrics.wauc })
    })?;
    let mut csv = String::from("arch,total_experts,experts_per_domain,seed,wauc,config_hash\n");
    for r in &rows {
        let _ = writeln!(csv, "{},{},{},{},{},{hash}", r.arch, r.total_experts, r.experts_per_domain, r.seed, r.wauc);
    }
    fs::write(out.join("sweep.csv"), csv)?;
    Ok(rows)
}
