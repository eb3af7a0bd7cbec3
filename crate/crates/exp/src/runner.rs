//! Pretrain, meta-train and evaluate one configuration over its seeds.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use npbml_core::checkpoint::Checkpoint;
use npbml_core::eval::{evaluate, EvalReport};
use npbml_core::inner::InnerConfig;
use npbml_core::model::MetaModel;
use npbml_core::outer::{EpisodeContext, Execution, MetricRecord, Trainer, BEST_FILE};
use npbml_core::params::MetaParams;
use npbml_core::tasks::{pretrain_encoder, KernelSmoother, PretrainConfig, PrototypeScorer, RelationScorer, Split, TaskFamily, TaskKind};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{ExpError, Result};
use crate::records::{write_plot_data, write_tasks, PLOT_FILE, TASKS_FILE};

pub const REPORT_FILE: &str = "report.json";

/// Model, pretrained encoder and relation scorer for one seed.
pub struct Setup {
    pub model: MetaModel,
    pub pretrained: Option<MetaParams>,
    scorer: Box<dyn RelationScorer>,
}

impl Setup {
    pub fn new(cfg: &ExperimentConfig, seed: u64) -> Result<Self> {
        let model = cfg.build_model()?;
        let pretrained = match &cfg.task.family {
            TaskFamily::Clusters(family) if cfg.pretrain.steps > 0 => {
                let pc = PretrainConfig {
                    seed: cfg.pretrain.seed.wrapping_add(seed),
                    ..cfg.pretrain
                };
                let p = pretrain_encoder(family, &model.encoder, &pc)?;
                info!("seed {seed}: pretrained encoder, training accuracy {:.3}", p.accuracy);
                Some(p.encoder)
            }
            _ => None,
        };
        let scorer: Box<dyn RelationScorer> = match (cfg.task.spec.kind, &pretrained) {
            (TaskKind::Regression, _) => Box::new(KernelSmoother::default()),
            (TaskKind::Classification, Some(enc)) => Box::new(PrototypeScorer::with_encoder(model.encoder.clone(), enc)?),
            (TaskKind::Classification, None) => Box::new(PrototypeScorer::new()),
        };
        Ok(Self {
            model,
            pretrained,
            scorer,
        })
    }

    pub fn scorer(&self) -> &dyn RelationScorer {
        self.scorer.as_ref()
    }

    pub fn init(&self, seed: u64) -> Result<MetaParams> {
        Ok(self.model.init_meta_params(self.pretrained.as_ref(), seed)?)
    }

    pub fn evaluate(&self, cfg: &ExperimentConfig, exec: &Execution, params: &MetaParams, seed: u64, tasks: usize) -> Result<EvalReport> {
        let inner: InnerConfig = cfg.inner;
        let ctx = EpisodeContext {
            model: &self.model,
            scorer: Some(self.scorer()),
            inner: &inner,
            exec,
        };
        Ok(evaluate(&ctx, params, &cfg.task.family, &cfg.task.spec, Split::Test, tasks, seed)?)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub best_step: usize,
    pub train_seconds: f64,
    pub report: EvalReport,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline: Option<EvalReport>,
    #[serde(skip)]
    pub log: Vec<MetricRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub name: String,
    pub runs: Vec<SeedRun>,
    /// Pooled over every seed.
    pub report: EvalReport,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline: Option<EvalReport>,
}

impl RunSummary {
    /// Mean of the per-seed mean accuracies, or of the mean losses for
    /// regression, with the mean per-seed half-width.
    pub fn seed_average(&self, baseline: bool) -> Option<(f64, f64)> {
        let reports: Vec<&EvalReport> = if baseline {
            self.runs.iter().map(|r| r.baseline.as_ref()).collect::<Option<_>>()?
        } else {
            self.runs.iter().map(|r| &r.report).collect()
        };
        let pick = |r: &EvalReport| match (r.pooled.mean_accuracy, r.pooled.accuracy_ci) {
            (Some(m), Some(c)) => (m, c),
            _ => (r.pooled.mean_loss, r.pooled.loss_ci),
        };
        let n = reports.len() as f64;
        let (m, c) = reports.iter().map(|r| pick(r)).fold((0.0, 0.0), |a, b| (a.0 + b.0, a.1 + b.1));
        Some((m / n, c / n))
    }
}

pub fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed-{seed}"))
}

/// Meta-trains from the seed's initialization, then evaluates the best
/// checkpoint on meta-test episodes drawn from the same seed.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64, dir: Option<&Path>) -> Result<SeedRun> {
    let setup = Setup::new(cfg, seed)?;
    let init = setup.init(seed)?;
    let exec = Execution::new(cfg.execution.workers, cfg.precision())?;
    let trainer = Trainer {
        model: &setup.model,
        family: &cfg.task.family,
        spec: &cfg.task.spec,
        inner: cfg.inner,
        meta: npbml_core::outer::MetaConfig { seed, ..cfg.meta },
        exec: exec.clone(),
        scorer: Some(setup.scorer()),
    };
    let start = Instant::now();
    let outcome = trainer.train(init.clone(), dir)?;
    let train_seconds = start.elapsed().as_secs_f64();
    info!("seed {seed}: trained in {train_seconds:.1}s, best step {}", outcome.best_step);

    let report = setup.evaluate(cfg, &exec, &outcome.best, seed, cfg.eval.tasks)?;
    let baseline = if cfg.eval.baseline {
        Some(setup.evaluate(cfg, &exec, &init, seed, cfg.eval.tasks)?)
    } else {
        None
    };
    if let Some(dir) = dir {
        write_tasks(&dir.join(TASKS_FILE), &report.records)?;
        write_plot_data(&dir.join(PLOT_FILE), &outcome.log)?;
    }
    Ok(SeedRun {
        seed,
        best_step: outcome.best_step,
        train_seconds,
        report,
        baseline,
        log: outcome.log,
    })
}

/// Every seed of `cfg`; with an output directory the resolved config, one
/// sub-directory per seed, the pooled per-task records and the report are
/// written there.
pub fn run(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<RunSummary> {
    cfg.validate()?;
    if let Some(out) = out {
        cfg.write_resolved(out)?;
    }
    let mut runs = Vec::new();
    for &seed in &cfg.seeds {
        let dir = out.map(|o| seed_dir(o, seed));
        runs.push(run_seed(cfg, seed, dir.as_deref())?);
    }
    let report = EvalReport::merge(runs.iter().map(|r| r.report.clone()));
    let baseline = cfg
        .eval
        .baseline
        .then(|| EvalReport::merge(runs.iter().filter_map(|r| r.baseline.clone())));
    let summary = RunSummary {
        name: cfg.name.clone(),
        runs,
        report,
        baseline,
    };
    if let Some(out) = out {
        write_tasks(&out.join(TASKS_FILE), &summary.report.records)?;
        let path = out.join(REPORT_FILE);
        fs::write(&path, serde_json::to_vec_pretty(&summary)?).map_err(|e| ExpError::io(&path, e))?;
    }
    Ok(summary)
}

/// Evaluates a saved checkpoint on `tasks` meta-test episodes of `seed`.
pub fn evaluate_checkpoint(cfg: &ExperimentConfig, checkpoint: &Path, seed: u64, tasks: usize) -> Result<EvalReport> {
    let ck = Checkpoint::load(checkpoint)?;
    let setup = Setup::new(cfg, seed)?;
    if ck.model != setup.model {
        return Err(ExpError::config("model", format!("{} was trained with a different model", checkpoint.display())));
    }
    let params = ck.params()?;
    let exec = Execution::new(cfg.execution.workers, cfg.precision())?;
    setup.evaluate(cfg, &exec, &params, seed, tasks)
}

/// Best checkpoint of `seed` under an output directory.
pub fn checkpoint_path(out: &Path, seed: u64) -> PathBuf {
    seed_dir(out, seed).join(BEST_FILE)
}
