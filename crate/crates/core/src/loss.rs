//! The meta-learned loss `M = L_base + L_S + L_Q + R`.
//!
//! Each learned term is a small feed-forward network: two rectified hidden
//! layers, each followed by FiLM conditioned on that layer's pre-activation,
//! and a scalar identity output. Instance-level networks are mean-reduced
//! over the batch.

use npbml_ad::{concat, Precision, Tensor, Var};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{film, gaussian, FastWeights, FilmGenerator, MetaModel};
use crate::params::{names, BoundParams, MetaParams};
use crate::tasks::{Episode, RelationScorer, Targets, TaskKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseLoss {
    /// Softmax cross-entropy on logits.
    CrossEntropy,
    Squared,
}

impl BaseLoss {
    pub fn for_task(kind: TaskKind) -> Self {
        match kind {
            TaskKind::Classification => BaseLoss::CrossEntropy,
            TaskKind::Regression => BaseLoss::Squared,
        }
    }
}

/// Per-instance base loss `[n, 1]`. Targets are one-hot rows for cross
/// entropy and values for squared loss.
pub fn instance_losses(predictions: &Var, targets: &Var, kind: BaseLoss) -> Result<Var> {
    if predictions.shape() != targets.shape() {
        return Err(Error::ParamShape {
            name: "targets".into(),
            expected: predictions.shape().to_vec(),
            got: targets.shape().to_vec(),
        });
    }
    Ok(match kind {
        BaseLoss::CrossEntropy => predictions.log_softmax(1)?.mul(targets)?.sum(1)?.neg()?,
        BaseLoss::Squared => predictions.sub(targets)?.square()?.sum(1)?,
    })
}

/// Mean-reduced base loss.
pub fn base_loss(predictions: &Var, targets: &Var, kind: BaseLoss) -> Result<Var> {
    Ok(instance_losses(predictions, targets, kind)?.mean_all()?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossNet {
    /// Inductive loss on the support set.
    Support,
    /// Transductive loss on the query set.
    Query,
    /// Regularizer on statistics of the adapted weights.
    Regularizer,
}

/// Linear layers per loss network.
pub const LOSS_NET_LAYERS: usize = 3;

impl LossNet {
    pub fn prefix(self) -> &'static str {
        match self {
            LossNet::Support => "support",
            LossNet::Query => "query",
            LossNet::Regularizer => "reg",
        }
    }

    pub fn input_dim(self, model: &MetaModel) -> usize {
        match (self, model.task.kind) {
            (LossNet::Regularizer, _) => 4 * (model.encoder.adapt_layers.len() + 1),
            (_, TaskKind::Classification) => 2 * model.task.n_way + 1,
            (_, TaskKind::Regression) => 3,
        }
    }

    /// `(in, out)` of each linear layer.
    pub fn layer_dims(self, model: &MetaModel) -> [(usize, usize); LOSS_NET_LAYERS] {
        let h = model.loss_hidden;
        [(self.input_dim(model), h), (h, h), (h, 1)]
    }
}

pub(crate) fn init_loss_net(model: &MetaModel, net: LossNet, rng: &mut ChaCha8Rng, params: &mut MetaParams) {
    let std = model.init_std;
    let p = net.prefix();
    for (k, (din, dout)) in net.layer_dims(model).into_iter().enumerate() {
        params.insert(names::loss_w(p, k), gaussian(rng, &[din, dout], std));
        params.insert(names::loss_b(p, k), gaussian(rng, &[1, dout], std));
        if model.variant.film && k + 1 < LOSS_NET_LAYERS {
            params.insert(names::loss_film_w(p, k), gaussian(rng, &[dout, 2 * dout], std));
            params.insert(names::loss_film_b(p, k), gaussian(rng, &[1, 2 * dout], std));
        }
    }
}

/// Applies a loss network row-wise: `[n, in] → [n, 1]`.
pub fn apply_loss_net(model: &MetaModel, params: &BoundParams, net: LossNet, input: &Var) -> Result<Var> {
    let expected = net.input_dim(model);
    let got = input.shape().get(1).copied().unwrap_or(0);
    if input.shape().len() != 2 || got != expected {
        return Err(Error::ParamShape {
            name: format!("{} loss input", net.prefix()),
            expected: vec![input.shape().first().copied().unwrap_or(0), expected],
            got: input.shape().to_vec(),
        });
    }
    let p = net.prefix();
    let mut h = input.clone();
    for k in 0..LOSS_NET_LAYERS {
        h = h.matmul(params.get(&names::loss_w(p, k))?)?.add_row(params.get(&names::loss_b(p, k))?)?;
        if k + 1 < LOSS_NET_LAYERS {
            if model.variant.film {
                let g = FilmGenerator::from_params(params, &names::loss_film_w(p, k), &names::loss_film_b(p, k))?;
                h = film(&h, &g)?;
            }
            h = h.relu()?;
        }
    }
    Ok(h)
}

/// Inductive input rows: `[one-hot target, softmax prediction, loss]`, or
/// `[target, prediction, loss]` for regression.
pub fn support_input(predictions: &Var, targets: &Var, kind: BaseLoss) -> Result<Var> {
    let losses = instance_losses(predictions, targets, kind)?;
    let pred = match kind {
        BaseLoss::CrossEntropy => predictions.softmax(1)?,
        BaseLoss::Squared => predictions.clone(),
    };
    Ok(concat(&[targets.clone(), pred, losses], 1)?)
}

/// Transductive input rows: `[softmax prediction, relation scores,
/// squared distance]`, or `[prediction, estimate, squared error]` for
/// regression. Relation scores are constants.
pub fn query_input(predictions: &Var, relation: &Tensor, kind: BaseLoss) -> Result<Var> {
    let pred = match kind {
        BaseLoss::CrossEntropy => predictions.softmax(1)?,
        BaseLoss::Squared => predictions.clone(),
    };
    let rel = Var::constant(relation.to_precision(pred.precision()));
    let dist = pred.sub(&rel)?.square()?.sum(1)?;
    Ok(concat(&[pred, rel, dist], 1)?)
}

pub fn support_loss(model: &MetaModel, params: &BoundParams, input: &Var) -> Result<Var> {
    Ok(apply_loss_net(model, params, LossNet::Support, input)?.mean_all()?)
}

pub fn query_loss(model: &MetaModel, params: &BoundParams, input: &Var) -> Result<Var> {
    Ok(apply_loss_net(model, params, LossNet::Query, input)?.mean_all()?)
}

/// Guards the square roots of the statistics against a zero argument.
const STAT_EPS: f64 = 1e-12;

/// `[mean, std, L1, L2]` of all entries of `w` as a `[1, 4]` row. The
/// standard deviation is the population one.
pub fn layer_stats(w: &Var) -> Result<Var> {
    let n = w.value().numel();
    let flat = w.reshape(&[1, n])?;
    let mean = flat.mean_all()?;
    let centered = flat.sub(&mean.reshape(&[1, 1])?.expand(1, n)?)?;
    let eps = Var::scalar(STAT_EPS, w.precision());
    let std = centered.square()?.mean_all()?.add(&eps)?.sqrt()?;
    let l1 = flat.abs()?.sum_all()?;
    let l2 = flat.square()?.sum_all()?.add(&eps)?.sqrt()?;
    Ok(concat(&[mean, std, l1, l2], 0)?.reshape(&[1, 4])?)
}

/// Statistics of every adapted weight matrix (encoder layers in order, then
/// the head) as one `[1, 4 (L + 1)]` row. The norms are divided by `n` and
/// `√n` for a matrix of `n` entries, so every coordinate stays O(1)
/// whatever the layer width.
pub fn regularizer_input(model: &MetaModel, fast: &FastWeights) -> Result<Var> {
    let mut parts = Vec::new();
    let mut weights: Vec<String> = model.encoder.adapt_layers.iter().map(|&l| names::layer_w(l)).collect();
    weights.push(names::HEAD_W.into());
    for name in weights {
        let w = fast.get(&name).ok_or_else(|| Error::MissingParam(name.clone()))?;
        let n = w.value().numel() as f64;
        let scale = Tensor::from_vec(&[1, 4], vec![1.0, 1.0, 1.0 / n, 1.0 / n.sqrt()])?.to_precision(w.precision());
        parts.push(layer_stats(w)?.mul(&Var::constant(scale))?);
    }
    Ok(concat(&parts, 1)?)
}

pub fn weight_regularizer(model: &MetaModel, params: &BoundParams, fast: &FastWeights) -> Result<Var> {
    let input = regularizer_input(model, fast)?;
    Ok(apply_loss_net(model, params, LossNet::Regularizer, &input)?.mean_all()?)
}

/// Inputs and targets of one set as constants.
#[derive(Debug, Clone)]
pub struct Batch {
    pub x: Var,
    /// One-hot rows for classification, `[n, 1]` values for regression.
    pub y: Var,
    pub labels: Option<Vec<usize>>,
}

impl Batch {
    pub fn new(x: &Tensor, targets: &Targets, n_way: usize, precision: Precision) -> Result<Self> {
        let (y, labels) = match targets {
            Targets::Labels(l) => (Var::one_hot(l, n_way, precision)?, Some(l.clone())),
            Targets::Values(v) => (Var::constant(v.to_precision(precision)), None),
        };
        Ok(Self {
            x: Var::constant(x.to_precision(precision)),
            y,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.x.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// An episode prepared for differentiation.
#[derive(Debug, Clone)]
pub struct EpisodeData {
    pub support: Batch,
    pub query: Batch,
    /// Relation scores of the query set, present when the transductive
    /// loss is active.
    pub relation: Option<Tensor>,
}

impl EpisodeData {
    pub fn new(model: &MetaModel, episode: &Episode, scorer: Option<&dyn RelationScorer>, precision: Precision) -> Result<Self> {
        let n = model.outputs();
        if episode.kind() != model.task.kind
            || (model.task.kind == TaskKind::Classification && episode.n_way() != n)
        {
            return Err(Error::Task(format!(
                "episode with {} classes does not fit a model with {n} outputs",
                episode.n_way()
            )));
        }
        let relation = match (model.variant.query_loss, scorer) {
            (false, _) => None,
            (true, Some(s)) => Some(s.scores(episode)?),
            (true, None) => return Err(Error::Task("transductive loss needs a relation scorer".into())),
        };
        Ok(Self {
            support: Batch::new(&episode.support_x, &episode.support_y, n, precision)?,
            query: Batch::new(&episode.query_x, &episode.query_y, n, precision)?,
            relation,
        })
    }
}

/// The four terms of `M`; disabled terms are `None`.
#[derive(Debug, Clone)]
pub struct MetaLoss {
    pub base: Var,
    pub support: Option<Var>,
    pub query: Option<Var>,
    pub regularizer: Option<Var>,
    pub total: Var,
}

pub fn meta_loss(model: &MetaModel, params: &BoundParams, fast: &FastWeights, data: &EpisodeData) -> Result<MetaLoss> {
    let kind = BaseLoss::for_task(model.task.kind);
    let logits = model.forward(params, fast, &data.support.x)?;
    let base = base_loss(&logits, &data.support.y, kind)?;
    let mut total = base.clone();

    let support = if model.variant.support_loss {
        let input = support_input(&logits, &data.support.y, kind)?;
        Some(support_loss(model, params, &input)?)
    } else {
        None
    };
    let query = if model.variant.query_loss {
        let relation = data
            .relation
            .as_ref()
            .ok_or_else(|| Error::Task("transductive loss needs relation scores".into()))?;
        let q_logits = model.forward(params, fast, &data.query.x)?;
        let input = query_input(&q_logits, relation, kind)?;
        Some(query_loss(model, params, &input)?)
    } else {
        None
    };
    let regularizer = if model.variant.regularizer {
        Some(weight_regularizer(model, params, fast)?)
    } else {
        None
    };
    for term in [&support, &query, &regularizer].into_iter().flatten() {
        total = total.add(term)?;
    }
    Ok(MetaLoss {
        base,
        support,
        query,
        regularizer,
        total,
    })
}
