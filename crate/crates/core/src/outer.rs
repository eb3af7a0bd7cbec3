//! Meta-training: averaged query losses of a meta-batch, differentiated
//! through the unrolled inner loops, drive an Adam update of every
//! trainable meta-parameter.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::Arc;

use log::{info, warn};
use npbml_ad::{Precision, Tensor};
use rayon::prelude::*;
use rayon::{ThreadPool, ThreadPoolBuilder};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{decode_map, encode_map, AdamSnapshot, BestSnapshot, Checkpoint};
use crate::error::{Error, Result};
use crate::inner::{run_episode, EpisodeResult, InnerConfig};
use crate::model::MetaModel;
use crate::params::MetaParams;
use crate::tasks::{Episode, RelationScorer, Split, TaskFamily, TaskKind, TaskSpec};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetaConfig {
    pub eta: f64,
    pub meta_batch: usize,
    pub steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global-norm clipping threshold for the averaged meta-gradient.
    pub clip_norm: f64,
    /// Validate every this many steps; 0 validates only at the start and
    /// the end.
    pub val_interval: usize,
    pub val_episodes: usize,
    pub seed: u64,
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self {
            eta: 1e-3,
            meta_batch: 2,
            steps: 1000,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 10.0,
            val_interval: 100,
            val_episodes: 100,
            seed: 0,
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(Error::config("meta.eta", "must be non-negative and finite"));
        }
        if self.meta_batch == 0 {
            return Err(Error::config("meta.meta_batch", "must be at least 1"));
        }
        for (field, b) in [("meta.beta1", self.beta1), ("meta.beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(field, "must lie in [0, 1)"));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::config("meta.eps", "must be positive"));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::config("meta.clip_norm", "must be positive"));
        }
        Ok(())
    }
}

/// How episodes are evaluated: worker count and arithmetic precision.
#[derive(Debug, Clone)]
pub struct Execution {
    pub precision: Precision,
    pool: Option<Arc<ThreadPool>>,
}

impl Default for Execution {
    fn default() -> Self {
        Self {
            precision: Precision::Double,
            pool: None,
        }
    }
}

impl Execution {
    pub fn new(workers: usize, precision: Precision) -> Result<Self> {
        let pool = if workers > 1 {
            let p = ThreadPoolBuilder::new()
                .num_threads(workers)
                .build()
                .map_err(|e| Error::config("workers", e.to_string()))?;
            Some(Arc::new(p))
        } else {
            None
        };
        Ok(Self { precision, pool })
    }

    /// Serial, double precision.
    pub fn double() -> Self {
        Self {
            precision: Precision::Double,
            pool: None,
        }
    }

    pub fn workers(&self) -> usize {
        self.pool.as_ref().map_or(1, |p| p.current_num_threads())
    }

    /// Maps `f` over `items`, concurrently when more than one worker is
    /// configured. Results keep the input order.
    pub fn map<T: Sync, R: Send>(&self, items: &[T], f: impl Fn(&T) -> R + Sync + Send) -> Vec<R> {
        match &self.pool {
            Some(pool) => pool.install(|| items.par_iter().map(&f).collect()),
            None => items.iter().map(f).collect(),
        }
    }
}

/// First and second moment estimates per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub t: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl AdamState {
    /// Zero moments for every trainable parameter of `params`.
    pub fn new(model: &MetaModel, params: &MetaParams) -> Self {
        let zeros: BTreeMap<String, Tensor> = params
            .iter()
            .filter(|(n, _)| model.is_trainable(n))
            .map(|(n, t)| (n.clone(), Tensor::zeros(t.shape(), Precision::Double)))
            .collect();
        Self {
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn from_parts(t: u64, m: BTreeMap<String, Tensor>, v: BTreeMap<String, Tensor>) -> Self {
        Self { t, m, v }
    }

    pub fn snapshot(&self) -> AdamSnapshot {
        AdamSnapshot {
            t: self.t,
            m: encode_map(&self.m),
            v: encode_map(&self.v),
        }
    }

    /// Accumulators mirror the trainable parameters exactly.
    pub fn matches(&self, model: &MetaModel, params: &MetaParams) -> bool {
        let trainable: Vec<(&String, &Tensor)> = params.iter().filter(|(n, _)| model.is_trainable(n)).collect();
        trainable.len() == self.m.len()
            && trainable.len() == self.v.len()
            && trainable.iter().all(|(n, t)| {
                self.m.get(*n).is_some_and(|m| m.shape() == t.shape())
                    && self.v.get(*n).is_some_and(|v| v.shape() == t.shape())
            })
    }

    /// One bias-corrected Adam update.
    pub fn update(&mut self, params: &mut MetaParams, grads: &BTreeMap<String, Tensor>, cfg: &MetaConfig) -> Result<()> {
        self.t += 1;
        let t = self.t as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        for (name, g) in grads {
            let (Some(m), Some(v)) = (self.m.get_mut(name), self.v.get_mut(name)) else {
                return Err(Error::MissingParam(format!("adam state for {name}")));
            };
            let p = params.get_mut(name)?;
            let (md, vd, pd) = (m.data_mut(), v.data_mut(), p.data_mut());
            for (i, &gi) in g.data().iter().enumerate() {
                md[i] = cfg.beta1 * md[i] + (1.0 - cfg.beta1) * gi;
                vd[i] = cfg.beta2 * vd[i] + (1.0 - cfg.beta2) * gi * gi;
                let step = cfg.eta * (md[i] / c1) / ((vd[i] / c2).sqrt() + cfg.eps);
                pd[i] -= step;
            }
        }
        Ok(())
    }
}

/// Shared, immutable inputs for evaluating episodes.
#[derive(Clone, Copy)]
pub struct EpisodeContext<'a> {
    pub model: &'a MetaModel,
    pub scorer: Option<&'a dyn RelationScorer>,
    pub inner: &'a InnerConfig,
    pub exec: &'a Execution,
}

impl EpisodeContext<'_> {
    fn run(&self, params: &MetaParams, episodes: &[Episode], with_grad: bool) -> Vec<Result<EpisodeResult>> {
        self.exec.map(episodes, |e| {
            run_episode(self.model, params, e, self.scorer, self.inner, self.exec.precision, with_grad)
        })
    }
}

/// Keeps the episodes that did not diverge, logging the others.
fn survivors(results: Vec<Result<EpisodeResult>>) -> Result<Vec<EpisodeResult>> {
    if results.is_empty() {
        return Err(Error::NoEpisodes);
    }
    let mut kept = Vec::with_capacity(results.len());
    for r in results {
        match r {
            Ok(r) => kept.push(r),
            Err(e @ Error::Diverged { .. }) => warn!("dropping episode: {e}"),
            Err(e) => return Err(e),
        }
    }
    if kept.is_empty() {
        return Err(Error::AllDiverged);
    }
    Ok(kept)
}

/// Mean post-adaptation query loss over the episodes that did not diverge.
pub fn meta_objective(ctx: &EpisodeContext<'_>, params: &MetaParams, episodes: &[Episode]) -> Result<f64> {
    let kept = survivors(ctx.run(params, episodes, false))?;
    Ok(kept.iter().map(|r| r.query_loss).sum::<f64>() / kept.len() as f64)
}

/// Mean query loss and its gradient for every trainable parameter.
pub fn meta_gradient(ctx: &EpisodeContext<'_>, params: &MetaParams, episodes: &[Episode]) -> Result<(f64, BTreeMap<String, Tensor>)> {
    let kept = survivors(ctx.run(params, episodes, true))?;
    let n = kept.len() as f64;
    let mut total: BTreeMap<String, Tensor> = BTreeMap::new();
    let mut loss = 0.0;
    for r in kept {
        loss += r.query_loss;
        for (name, g) in r.grads.expect("requested gradients") {
            match total.get_mut(&name) {
                Some(acc) => *acc = acc.add(&g)?,
                None => {
                    total.insert(name, g);
                }
            }
        }
    }
    for g in total.values_mut() {
        *g = g.scale(1.0 / n);
    }
    Ok((loss / n, total))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub meta_loss: f64,
    /// Norm of the averaged meta-gradient before clipping.
    pub grad_norm: f64,
    pub clipped: bool,
    /// The gradient was non-finite and no update was applied.
    pub skipped: bool,
}

pub fn global_norm(grads: &BTreeMap<String, Tensor>) -> f64 {
    grads.values().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt()
}

/// One outer update: meta-gradient, global-norm clipping, Adam.
pub fn meta_step(
    ctx: &EpisodeContext<'_>,
    params: &mut MetaParams,
    state: &mut AdamState,
    episodes: &[Episode],
    cfg: &MetaConfig,
) -> Result<StepStats> {
    if !state.matches(ctx.model, params) {
        return Err(Error::Checkpoint("optimizer state does not mirror the parameters".into()));
    }
    let (meta_loss, mut grads) = meta_gradient(ctx, params, episodes)?;
    let grad_norm = global_norm(&grads);
    if !grad_norm.is_finite() {
        warn!("non-finite meta-gradient, update skipped");
        return Ok(StepStats {
            meta_loss,
            grad_norm,
            clipped: false,
            skipped: true,
        });
    }
    let clipped = grad_norm > cfg.clip_norm;
    if clipped {
        let s = cfg.clip_norm / grad_norm;
        for g in grads.values_mut() {
            *g = g.scale(s);
        }
    }
    state.update(params, &grads, cfg)?;
    Ok(StepStats {
        meta_loss,
        grad_norm,
        clipped,
        skipped: false,
    })
}

/// Post-adaptation query statistics on a fixed set of episodes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValStats {
    pub loss: f64,
    pub accuracy: Option<f64>,
}

impl ValStats {
    /// Larger is better: accuracy for classification, negative loss for
    /// regression.
    pub fn score(&self, kind: TaskKind) -> f64 {
        match (kind, self.accuracy) {
            (TaskKind::Classification, Some(a)) => a,
            _ => -self.loss,
        }
    }
}

pub fn validate(ctx: &EpisodeContext<'_>, params: &MetaParams, episodes: &[Episode]) -> Result<ValStats> {
    let kept = survivors(ctx.run(params, episodes, false))?;
    let n = kept.len() as f64;
    let loss = kept.iter().map(|r| r.query_loss).sum::<f64>() / n;
    let accuracy = kept
        .iter()
        .map(|r| r.accuracy)
        .sum::<Option<f64>>()
        .map(|a| a / n);
    Ok(ValStats { loss, accuracy })
}

/// One line of the metrics log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: usize,
    pub meta_loss: f64,
    pub val_loss: Option<f64>,
    pub val_accuracy: Option<f64>,
    pub grad_norm: f64,
    pub clipped: bool,
}

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const BEST_FILE: &str = "checkpoint.json";
pub const LATEST_FILE: &str = "latest.json";

/// Everything meta-training needs besides the initial parameters.
pub struct Trainer<'a> {
    pub model: &'a MetaModel,
    pub family: &'a TaskFamily,
    pub spec: &'a TaskSpec,
    pub inner: InnerConfig,
    pub meta: MetaConfig,
    pub exec: Execution,
    pub scorer: Option<&'a dyn RelationScorer>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best: MetaParams,
    pub best_step: usize,
    pub last: MetaParams,
    pub initial_val: ValStats,
    pub log: Vec<MetricRecord>,
}

impl Trainer<'_> {
    fn ctx(&self) -> EpisodeContext<'_> {
        EpisodeContext {
            model: self.model,
            scorer: self.scorer,
            inner: &self.inner,
            exec: &self.exec,
        }
    }

    /// Meta-batch of step `step` (1-based).
    pub fn train_batch(&self, step: usize) -> Result<Vec<Episode>> {
        let b = self.meta.meta_batch as u64;
        (0..b)
            .map(|i| self.family.episode(self.spec, Split::Train, self.meta.seed, (step as u64 - 1) * b + i))
            .collect()
    }

    pub fn val_batch(&self) -> Result<Vec<Episode>> {
        (0..self.meta.val_episodes.max(1) as u64)
            .map(|i| self.family.episode(self.spec, Split::Val, self.meta.seed, i))
            .collect()
    }

    /// Runs `meta.steps` updates from `init`, or resumes from the latest
    /// checkpoint in `out` when one exists. With an output directory the
    /// best-validation checkpoint, a resumable latest checkpoint and the
    /// metrics log are written there.
    pub fn train(&self, init: MetaParams, out: Option<&Path>) -> Result<TrainOutcome> {
        self.meta.validate()?;
        self.inner.validate()?;
        self.family.validate(self.spec)?;
        self.model.check_params(&init)?;
        let ctx = self.ctx();
        let kind = self.model.task.kind;
        let val = self.val_batch()?;
        let initial_val = validate(&ctx, &init, &val)?;

        let mut params = init.clone();
        let mut state = AdamState::new(self.model, &params);
        let mut best = (0usize, initial_val.score(kind), init);
        let mut log = Vec::new();
        let mut start = 0;

        if let Some(dir) = out {
            fs::create_dir_all(dir)?;
            let latest = dir.join(LATEST_FILE);
            if latest.exists() {
                let ck = Checkpoint::load(&latest)?;
                if ck.model != *self.model || ck.seed != self.meta.seed {
                    return Err(Error::Checkpoint("latest checkpoint belongs to a different run".into()));
                }
                params = ck.params()?;
                state = ck.adam()?.ok_or_else(|| Error::Checkpoint("latest checkpoint lacks optimizer state".into()))?;
                if let Some(b) = &ck.best {
                    best = (b.step, b.score, MetaParams::from_map(decode_map(&b.params)?)?);
                }
                start = ck.step;
                log = read_metrics(&dir.join(METRICS_FILE), start)?;
                info!("resuming at step {start}");
            }
            write_metrics(&dir.join(METRICS_FILE), &log)?;
        }

        for step in start + 1..=self.meta.steps {
            let batch = self.train_batch(step)?;
            let stats = meta_step(&ctx, &mut params, &mut state, &batch, &self.meta)?;
            let due = if self.meta.val_interval == 0 {
                step == self.meta.steps
            } else {
                step % self.meta.val_interval == 0 || step == self.meta.steps
            };
            let v = if due { Some(validate(&ctx, &params, &val)?) } else { None };
            if let Some(v) = v {
                let score = v.score(kind);
                if score > best.1 {
                    best = (step, score, params.clone());
                }
                info!("step {step}: meta loss {:.5}, val loss {:.5}", stats.meta_loss, v.loss);
            }
            let record = MetricRecord {
                step,
                meta_loss: stats.meta_loss,
                val_loss: v.map(|v| v.loss),
                val_accuracy: v.and_then(|v| v.accuracy),
                grad_norm: stats.grad_norm,
                clipped: stats.clipped,
            };
            log.push(record);
            if let Some(dir) = out {
                append_metric(&dir.join(METRICS_FILE), &record)?;
                if due {
                    self.save(dir, step, &params, &state, &best)?;
                }
            }
        }
        if let Some(dir) = out {
            self.save(dir, self.meta.steps.max(start), &params, &state, &best)?;
        }
        Ok(TrainOutcome {
            best: best.2,
            best_step: best.0,
            last: params,
            initial_val,
            log,
        })
    }

    fn save(&self, dir: &Path, step: usize, params: &MetaParams, state: &AdamState, best: &(usize, f64, MetaParams)) -> Result<()> {
        let mut best_ck = Checkpoint::new(self.model, &best.2, self.meta.seed, best.0);
        best_ck.save(&dir.join(BEST_FILE))?;
        best_ck.params = encode_map(&params.clone().into_map());
        best_ck.step = step;
        best_ck.adam = Some(state.snapshot());
        best_ck.best = Some(BestSnapshot {
            step: best.0,
            score: best.1,
            params: encode_map(&best.2.clone().into_map()),
        });
        best_ck.save(&dir.join(LATEST_FILE))
    }
}

fn write_metrics(path: &Path, records: &[MetricRecord]) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    fs::write(path, out)?;
    Ok(())
}

fn append_metric(path: &Path, record: &MetricRecord) -> Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    let mut line = serde_json::to_vec(record)?;
    line.push(b'\n');
    f.write_all(&line)?;
    Ok(())
}

/// Records up to and including `until`.
pub fn read_metrics(path: &Path, until: usize) -> Result<Vec<MetricRecord>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for line in BufReader::new(fs::File::open(path)?).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r: MetricRecord = serde_json::from_str(&line)?;
        if r.step <= until {
            out.push(r);
        }
    }
    Ok(out)
}
