//! Meta-test evaluation with 95% confidence intervals.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inner::run_episode;
use crate::outer::EpisodeContext;
use crate::params::MetaParams;
use crate::tasks::{Episode, Split, TaskFamily, TaskSpec};

/// Default number of evaluation tasks.
pub const EVAL_TASKS: usize = 600;

/// `1.96 · s / √n` with the sample standard deviation `s`; zero for fewer
/// than two values.
pub fn ci_half_width(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    1.96 * var.sqrt() / (n as f64).sqrt()
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len().max(1) as f64
}

/// Raw result of one evaluation task.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    /// Evaluation seed the task belongs to.
    pub seed: u64,
    pub task: usize,
    pub accuracy: Option<f64>,
    pub loss: f64,
    /// Stream index the episode was drawn from.
    pub support_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub tasks: usize,
    pub mean_accuracy: Option<f64>,
    pub accuracy_ci: Option<f64>,
    pub mean_loss: f64,
    pub loss_ci: f64,
}

impl Summary {
    pub fn of(records: &[TaskRecord]) -> Self {
        let losses: Vec<f64> = records.iter().map(|r| r.loss).collect();
        let accs: Option<Vec<f64>> = records.iter().map(|r| r.accuracy).collect();
        let accs = accs.filter(|a| !a.is_empty());
        Self {
            tasks: records.len(),
            mean_accuracy: accs.as_deref().map(mean),
            accuracy_ci: accs.as_deref().map(ci_half_width),
            mean_loss: mean(&losses),
            loss_ci: ci_half_width(&losses),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    #[serde(flatten)]
    pub summary: Summary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_seed: Vec<SeedSummary>,
    /// Pooled over every task of every seed.
    pub pooled: Summary,
    #[serde(skip)]
    pub records: Vec<TaskRecord>,
}

impl EvalReport {
    pub fn from_records(records: Vec<TaskRecord>) -> Self {
        let mut seeds: Vec<u64> = records.iter().map(|r| r.seed).collect();
        seeds.sort_unstable();
        seeds.dedup();
        let per_seed = seeds
            .into_iter()
            .map(|seed| {
                let own: Vec<TaskRecord> = records.iter().filter(|r| r.seed == seed).copied().collect();
                SeedSummary {
                    seed,
                    summary: Summary::of(&own),
                }
            })
            .collect();
        Self {
            per_seed,
            pooled: Summary::of(&records),
            records,
        }
    }

    pub fn merge(reports: impl IntoIterator<Item = EvalReport>) -> Self {
        Self::from_records(reports.into_iter().flat_map(|r| r.records).collect())
    }

    pub fn tasks(&self) -> usize {
        self.pooled.tasks
    }
}

/// Scores `n_tasks` episodes of `split` drawn from the stream `seed` with
/// an arbitrary learner returning `(query loss, accuracy)`. Diverged
/// episodes are logged and left out.
pub fn evaluate_with<F>(family: &TaskFamily, spec: &TaskSpec, split: Split, n_tasks: usize, seed: u64, learner: F) -> Result<EvalReport>
where
    F: Fn(&Episode) -> Result<(f64, Option<f64>)>,
{
    if split == Split::Train {
        return Err(Error::SplitMismatch(split));
    }
    let mut records = Vec::with_capacity(n_tasks);
    for task in 0..n_tasks {
        let e = family.episode(spec, split, seed, task as u64)?;
        match learner(&e) {
            Ok((loss, accuracy)) => records.push(TaskRecord {
                seed,
                task,
                accuracy,
                loss,
                support_seed: e.seed,
            }),
            Err(err @ Error::Diverged { .. }) => warn!("evaluation task {task} dropped: {err}"),
            Err(err) => return Err(err),
        }
    }
    Ok(EvalReport::from_records(records))
}

/// Adapts to each of `n_tasks` episodes of `split` and reports query
/// accuracy and loss.
pub fn evaluate(
    ctx: &EpisodeContext<'_>,
    params: &MetaParams,
    family: &TaskFamily,
    spec: &TaskSpec,
    split: Split,
    n_tasks: usize,
    seed: u64,
) -> Result<EvalReport> {
    if split == Split::Train {
        return Err(Error::SplitMismatch(split));
    }
    let episodes: Vec<Episode> = (0..n_tasks as u64)
        .map(|i| family.episode(spec, split, seed, i))
        .collect::<Result<_>>()?;
    let results = ctx.exec.map(&episodes, |e| {
        run_episode(ctx.model, params, e, ctx.scorer, ctx.inner, ctx.exec.precision, false)
    });
    let mut records = Vec::with_capacity(n_tasks);
    for (task, (e, r)) in episodes.iter().zip(results).enumerate() {
        match r {
            Ok(r) => records.push(TaskRecord {
                seed,
                task,
                accuracy: r.accuracy,
                loss: r.query_loss,
                support_seed: e.seed,
            }),
            Err(err @ Error::Diverged { .. }) => warn!("evaluation task {task} dropped: {err}"),
            Err(err) => return Err(err),
        }
    }
    Ok(EvalReport::from_records(records))
}
