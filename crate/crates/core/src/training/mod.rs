//! The three-phase pipeline: backbone pre-training, per-domain expert
//! fine-tuning in gate-bypass mode, and gate optimization. Every phase checks
//! that the groups it must not touch are byte-identical afterwards.

mod optim;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::RngCore;
use serde::{Deserialize, Serialize};

pub use optim::{adam_step, bce_loss, AdamHyper, AdamState};

use crate::autodiff::AutodiffError;
use crate::data::{batch_iter, Dataset};
use crate::eval::{auc, evaluate, wauc, MetricsReport};
use crate::layers::Routing;
use crate::models::{save_checkpoint, Batch, CtrModel, Mode, ModelGraph};
use crate::params::{GroupTag, ParamStore};
use crate::{rng, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Phase 1 learning rate.
    pub lr: f64,
    /// Phase 2 learning rate; falls back to `lr`.
    pub expert_lr: Option<f64>,
    /// Phase 3 learning rate.
    pub gate_lr: f64,
    pub batch_size: usize,
    /// Epoch budget for phases 1, 2 and 3.
    pub epochs: [usize; 3],
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Epochs without validation improvement before a phase stops; 0 disables.
    pub patience: usize,
    /// Phase 3 draws the same number of rows from every domain per epoch.
    pub balanced_phase3: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            expert_lr: None,
            gate_lr: 1e-2,
            batch_size: 256,
            epochs: [5, 5, 5],
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            patience: 2,
            balanced_phase3: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let lrs = [Some(self.lr), self.expert_lr, Some(self.gate_lr)];
        if lrs.iter().flatten().any(|lr| !(*lr > 0.0 && lr.is_finite())) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.batch_size == 0 || self.epochs.contains(&0) {
            return Err(Error::Config("batch_size and epochs must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps.is_nan() || self.eps <= 0.0 {
            return Err(Error::Config("adam betas must lie in [0, 1) and eps must be positive".into()));
        }
        Ok(())
    }

    fn hyper(&self, lr: f64) -> AdamHyper {
        AdamHyper { lr, beta1: self.beta1, beta2: self.beta2, eps: self.eps }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// Validation WAUC (phases 1 and 3) or the domain's AUC (phase 2).
    pub val_metric: Option<f64>,
}

/// One optimization run inside a phase: the whole phase for 1 and 3, one
/// expert for phase 2.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobReport {
    pub job: String,
    pub rows: usize,
    /// Validation metric before the first update.
    pub initial_val_metric: Option<f64>,
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were kept; 0 means the starting point.
    pub best_epoch: usize,
    pub skipped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseReport {
    pub phase: u8,
    pub jobs: Vec<JobReport>,
    pub checksums_before: BTreeMap<String, String>,
    pub checksums_after: BTreeMap<String, String>,
    /// Groups that had to stay fixed for the whole phase.
    pub frozen_groups: Vec<String>,
    pub warnings: Vec<String>,
}

impl PhaseReport {
    /// Mean training loss per epoch across jobs, in job order.
    pub fn loss_curve(&self) -> Vec<f64> {
        self.jobs.iter().flat_map(|j| j.epochs.iter().map(|e| e.train_loss)).collect()
    }

    pub fn final_val_metric(&self) -> Option<f64> {
        let job = self.jobs.last()?;
        if job.best_epoch == 0 {
            job.initial_val_metric
        } else {
            job.epochs.get(job.best_epoch - 1).and_then(|e| e.val_metric)
        }
    }
}

fn numeric(phase: u8) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::Autodiff(AutodiffError::NonFinite { what }) | Error::NonFinite { what } => {
            Error::Numeric { phase, message: format!("non-finite value in {what}") }
        }
        other => other,
    }
}

fn probs(graph: &mut ModelGraph, params: &ParamStore, ds: &Dataset, rows: &[usize]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(rows.len());
    for chunk in rows.chunks(4096) {
        let batch = Batch::from_indices(ds, chunk);
        let inputs = batch.inputs(ds.schema())?;
        out.extend_from_slice(graph.tape.forward_to(params, &inputs, graph.prob)?.data());
    }
    Ok(out)
}

/// How a job scores the validation split.
#[derive(Debug, Clone, Copy)]
enum ValMetric {
    Wauc,
    DomainAuc(usize),
}

fn val_metric(graph: &mut ModelGraph, params: &ParamStore, val: &Dataset, metric: ValMetric) -> Result<Option<f64>> {
    match metric {
        ValMetric::Wauc => {
            if val.is_empty() {
                return Ok(None);
            }
            let all: Vec<usize> = (0..val.len()).collect();
            let p = probs(graph, params, val, &all)?;
            let n = val.n_domains();
            let mut labels = vec![Vec::new(); n];
            let mut scores = vec![Vec::new(); n];
            for (r, s) in val.rows().iter().zip(&p) {
                labels[r.domain].push(r.label);
                scores[r.domain].push(*s);
            }
            let entries = (0..n).map(|d| Ok((auc(&labels[d], &scores[d])?, labels[d].len()))).collect::<Result<Vec<_>>>()?;
            match wauc(&entries) {
                Ok(w) => Ok(Some(w.value)),
                Err(Error::AllDegenerate) => Ok(None),
                Err(e) => Err(e),
            }
        }
        ValMetric::DomainAuc(d) => {
            let rows: Vec<usize> = (0..val.len()).filter(|&i| val.rows()[i].domain == d).collect();
            if rows.is_empty() {
                return Ok(None);
            }
            let p = probs(graph, params, val, &rows)?;
            let labels: Vec<u8> = rows.iter().map(|&i| val.rows()[i].label).collect();
            auc(&labels, &p)
        }
    }
}

struct Job<'a> {
    phase: u8,
    name: String,
    routing: Routing,
    select: &'a dyn Fn(&GroupTag) -> bool,
    train: &'a Dataset,
    val: &'a Dataset,
    metric: ValMetric,
    epochs: usize,
    lr: f64,
    balanced: bool,
}

/// Row order for one epoch: a shuffled pass over `train`, or with `balanced`
/// an equal number of rows per present domain (smaller domains cycle).
fn epoch_batches(train: &Dataset, batch_size: usize, seed: u64, epoch: usize, balanced: bool) -> Result<Vec<Vec<usize>>> {
    if !balanced {
        return batch_iter(train.len(), batch_size, seed, epoch, true);
    }
    let mut per: Vec<Vec<usize>> = vec![Vec::new(); train.n_domains()];
    for (i, r) in train.rows().iter().enumerate() {
        per[r.domain].push(i);
    }
    per.retain(|v| !v.is_empty());
    let target = per.iter().map(Vec::len).max().unwrap_or(0);
    let mut rng = rng::stream(seed, &format!("balanced/{epoch}"));
    let mut order = Vec::with_capacity(target * per.len());
    for rows in &mut per {
        rows.shuffle(&mut rng);
        order.extend((0..target).map(|j| rows[j % rows.len()]));
    }
    order.shuffle(&mut rng);
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

fn run_job(model: &mut CtrModel, cfg: &TrainConfig, job: &Job<'_>) -> Result<JobReport> {
    let wrap = numeric(job.phase);
    model.params.set_trainable(job.select);
    let mut graph = model.graph(job.routing)?;
    let hyper = cfg.hyper(job.lr);
    let mut state = AdamState::new();
    let seed = rng::stream(cfg.seed, &format!("job/{}", job.name)).next_u64();

    let initial = val_metric(&mut graph, &model.params, job.val, job.metric).map_err(&wrap)?;
    let mut best = initial;
    let mut best_epoch = 0;
    let mut best_state = model.params.snapshot(|p| p.trainable);
    let mut stale = 0;
    let mut epochs = Vec::new();

    for epoch in 1..=job.epochs {
        let mut loss_sum = 0.0;
        let mut rows = 0usize;
        for idx in epoch_batches(job.train, cfg.batch_size, seed, epoch, job.balanced)? {
            let batch = Batch::from_indices(job.train, &idx);
            let inputs = batch.inputs(job.train.schema())?;
            let loss = graph.tape.forward(&model.params, &inputs).map_err(Error::from).map_err(&wrap)?.item();
            if !loss.is_finite() {
                return Err(Error::Numeric { phase: job.phase, message: format!("{}: loss is {loss} at epoch {epoch}", job.name) });
            }
            let grads = graph.tape.backward(&model.params, graph.loss)?;
            adam_step(&mut model.params, &grads, &mut state, &hyper).map_err(&wrap)?;
            loss_sum += loss * idx.len() as f64;
            rows += idx.len();
        }
        let val = val_metric(&mut graph, &model.params, job.val, job.metric).map_err(&wrap)?;
        epochs.push(EpochRecord { epoch, train_loss: loss_sum / rows.max(1) as f64, val_metric: val });
        match (val, best) {
            (Some(v), Some(b)) if v <= b => stale += 1,
            (Some(v), _) => {
                best = Some(v);
                best_epoch = epoch;
                best_state = model.params.snapshot(|p| p.trainable);
                stale = 0;
            }
            // no usable validation signal: keep the latest parameters
            (None, _) => {
                best_epoch = epoch;
                best_state = model.params.snapshot(|p| p.trainable);
            }
        }
        if cfg.patience > 0 && stale >= cfg.patience {
            break;
        }
    }
    model.params.restore(&best_state);
    Ok(JobReport {
        job: job.name.clone(),
        rows: job.train.len(),
        initial_val_metric: initial,
        epochs,
        best_epoch,
        skipped: false,
    })
}

/// Verifies that every group not selected by `may_change` kept its checksum.
fn check_frozen(
    phase: u8,
    params: &ParamStore,
    before: &BTreeMap<String, String>,
    may_change: impl Fn(&GroupTag) -> bool,
) -> Result<Vec<String>> {
    let after = params.group_checksums();
    let mut frozen = Vec::new();
    for tag in params.tags() {
        if may_change(&tag) {
            continue;
        }
        let label = tag.to_string();
        if before.get(&label) != after.get(&label) {
            return Err(Error::FreezeViolation { phase, group: label });
        }
        frozen.push(label);
    }
    Ok(frozen)
}

fn require_rows(ds: &Dataset, what: &str) -> Result<()> {
    if ds.is_empty() {
        return Err(Error::Empty(format!("{what} has no rows")));
    }
    Ok(())
}

/// Phase 1: only backbone parameters train, on every domain's rows, with
/// adapters and gates left out of the forward pass.
pub fn run_phase1(model: &mut CtrModel, train: &Dataset, val: &Dataset, cfg: &TrainConfig) -> Result<PhaseReport> {
    cfg.validate()?;
    require_rows(train, "phase 1 training set")?;
    let before = model.params.group_checksums();
    let select = |t: &GroupTag| t.is_backbone();
    let job = Job {
        phase: 1,
        name: "backbone".into(),
        routing: Routing::Backbone,
        select: &select,
        train,
        val,
        metric: ValMetric::Wauc,
        epochs: cfg.epochs[0],
        lr: cfg.lr,
        balanced: false,
    };
    let report = run_job(model, cfg, &job)?;
    let frozen_groups = check_frozen(1, &model.params, &before, select)?;
    Ok(PhaseReport {
        phase: 1,
        jobs: vec![report],
        checksums_before: before,
        checksums_after: model.params.group_checksums(),
        frozen_groups,
        warnings: Vec::new(),
    })
}

/// Phase 2: each expert `(d, k)` in domain-index order trains alone on domain
/// `d`'s rows, with the forward pass computing backbone plus that expert only.
pub fn run_phase2(model: &mut CtrModel, train: &Dataset, val: &Dataset, cfg: &TrainConfig) -> Result<PhaseReport> {
    let order: Vec<usize> = (0..model.n_domains()).collect();
    run_phase2_ordered(model, train, val, cfg, &order)
}

/// [`run_phase2`] visiting domains in `order`.
pub fn run_phase2_ordered(
    model: &mut CtrModel,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
    order: &[usize],
) -> Result<PhaseReport> {
    cfg.validate()?;
    if model.mode() == Mode::Plain {
        return Err(Error::Invalid("phase 2 needs adapters; the plain backbone has none".into()));
    }
    let replicas = match model.mode() {
        Mode::Moe => model.config.adapter.experts_per_domain,
        _ => 1,
    };
    let before = model.params.group_checksums();
    let mut jobs = Vec::new();
    let mut warnings = Vec::new();
    for &d in order {
        let rows = train.domain_subset(d);
        for k in 0..replicas {
            let name = format!("expert(d={d},k={k})");
            if rows.is_empty() {
                warnings.push(format!("domain {d} has no training rows; {name} stays at its initial value"));
                jobs.push(JobReport { job: name, rows: 0, initial_val_metric: None, epochs: vec![], best_epoch: 0, skipped: true });
                continue;
            }
            let job_before = model.params.group_checksums();
            let select = move |t: &GroupTag| t.is_expert_of(d, k);
            let job = Job {
                phase: 2,
                name,
                routing: Routing::Expert { domain: d, replica: k },
                select: &select,
                train: &rows,
                val,
                metric: ValMetric::DomainAuc(d),
                epochs: cfg.epochs[1],
                lr: cfg.expert_lr.unwrap_or(cfg.lr),
                balanced: false,
            };
            jobs.push(run_job(model, cfg, &job)?);
            check_frozen(2, &model.params, &job_before, select)?;
        }
    }
    let frozen_groups = check_frozen(2, &model.params, &before, GroupTag::is_expert)?;
    Ok(PhaseReport {
        phase: 2,
        jobs,
        checksums_before: before,
        checksums_after: model.params.group_checksums(),
        frozen_groups,
        warnings,
    })
}

/// Phase 3: only gate parameters train, with every expert active.
pub fn run_phase3(model: &mut CtrModel, train: &Dataset, val: &Dataset, cfg: &TrainConfig) -> Result<PhaseReport> {
    cfg.validate()?;
    if model.mode() != Mode::Moe {
        return Err(Error::Invalid(format!("phase 3 trains gates, which {} models do not have", model.mode())));
    }
    if model.config.adapter.clamp_one_hot {
        return Err(Error::Invalid("gates are clamped one-hot; there is nothing to train in phase 3".into()));
    }
    require_rows(train, "phase 3 training set")?;
    let before = model.params.group_checksums();
    let select = |t: &GroupTag| t.is_gate();
    let job = Job {
        phase: 3,
        name: "gates".into(),
        routing: Routing::Mixture,
        select: &select,
        train,
        val,
        metric: ValMetric::Wauc,
        epochs: cfg.epochs[2],
        lr: cfg.gate_lr,
        balanced: cfg.balanced_phase3,
    };
    let report = run_job(model, cfg, &job)?;
    let frozen_groups = check_frozen(3, &model.params, &before, select)?;
    Ok(PhaseReport {
        phase: 3,
        jobs: vec![report],
        checksums_before: before,
        checksums_after: model.params.group_checksums(),
        frozen_groups,
        warnings: Vec::new(),
    })
}

#[derive(Debug, Clone)]
pub struct PipelineResult {
    pub model: CtrModel,
    pub phases: Vec<PhaseReport>,
    pub metrics: MetricsReport,
    pub test_predictions: Vec<f64>,
    pub checkpoints: Vec<PathBuf>,
}

/// Runs the phases the model's mode calls for (plain: 1; mlora: 1, 2;
/// moe: 1, 2, 3) and evaluates on `test`.
///
/// With `checkpoint_dir`, `phase<N>.ckpt` is written after each phase. A moe
/// model with one-hot clamped gates has nothing to learn in phase 3, so the
/// phase is skipped.
pub fn train_pipeline(
    cfg: &TrainConfig,
    mut model: CtrModel,
    train: &Dataset,
    val: &Dataset,
    test: &Dataset,
    checkpoint_dir: Option<&Path>,
) -> Result<PipelineResult> {
    cfg.validate()?;
    let mut phases = Vec::new();
    let mut checkpoints = Vec::new();
    let mut save = |model: &CtrModel, phase: u8| -> Result<()> {
        if let Some(dir) = checkpoint_dir {
            let path = dir.join(format!("phase{phase}.ckpt"));
            save_checkpoint(model, &path)?;
            checkpoints.push(path);
        }
        Ok(())
    };
    phases.push(run_phase1(&mut model, train, val, cfg)?);
    save(&model, 1)?;
    if model.mode() != Mode::Plain {
        phases.push(run_phase2(&mut model, train, val, cfg)?);
        save(&model, 2)?;
    }
    if model.mode() == Mode::Moe && !model.config.adapter.clamp_one_hot {
        phases.push(run_phase3(&mut model, train, val, cfg)?);
        save(&model, 3)?;
    }
    model.params.set_trainable(|_| false);
    let test_predictions = model.predict(test.rows()).map_err(numeric(phases.len() as u8))?;
    let scores = test_predictions.clone();
    let metrics = evaluate(&move |_: &Dataset| Ok(scores.clone()), test, None)?;
    Ok(PipelineResult { model, phases, metrics, test_predictions, checkpoints })
}
