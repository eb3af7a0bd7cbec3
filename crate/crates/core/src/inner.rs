//! The unrolled inner loop.
//!
//! Only the fast weights (adapted encoder layers and the expanded head) are
//! updated; ω, φ and ψ stay fixed, so gradient flow through the warped
//! forward pass preconditions every step by `ω ωᵀ`.

use std::collections::BTreeMap;

use npbml_ad::{grad, Precision, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::{base_loss, meta_loss, BaseLoss, EpisodeData};
use crate::model::{FastWeights, MetaModel};
use crate::params::{names, BoundParams, MetaParams};
use crate::tasks::{Episode, RelationScorer};

/// Losses above this are treated as divergence.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InnerConfig {
    pub alpha: f64,
    pub steps: usize,
    /// Nesterov momentum; 0 disables.
    pub momentum: f64,
    /// Decoupled weight decay, added to the gradient rather than to `M`.
    pub weight_decay: f64,
    /// Treat inner gradients as constants with respect to Φ.
    pub first_order: bool,
}

impl Default for InnerConfig {
    fn default() -> Self {
        Self {
            alpha: 0.01,
            steps: 5,
            momentum: 0.9,
            weight_decay: 5e-4,
            first_order: false,
        }
    }
}

impl InnerConfig {
    /// SGD without momentum or weight decay.
    pub fn plain(alpha: f64, steps: usize) -> Self {
        Self {
            alpha,
            steps,
            momentum: 0.0,
            weight_decay: 0.0,
            first_order: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::config("inner.alpha", "must be positive and finite"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("inner.momentum", "must lie in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("inner.weight_decay", "must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    /// Fast weights before each step and after the last: `steps + 1` entries.
    pub thetas: Vec<BTreeMap<String, Tensor>>,
    /// Support base loss at each step.
    pub base_losses: Vec<f64>,
    /// Meta-learned loss at each step.
    pub meta_losses: Vec<f64>,
    /// Final fast weights, still attached to the tape.
    pub fast: FastWeights,
}

impl Trajectory {
    pub fn final_theta(&self) -> &BTreeMap<String, Tensor> {
        self.thetas.last().expect("trajectory holds the initialization")
    }
}

/// `ω ωᵀ`
pub fn materialize_preconditioner(omega: &Tensor) -> Result<Tensor> {
    Ok(omega.matmul(&omega.transpose()?)?)
}

/// `θ - lr ⊙ g`
pub fn diagonal_precondition_step(theta: &Tensor, grad: &Tensor, lr: &Tensor) -> Result<Tensor> {
    Ok(theta.sub(&lr.mul(grad)?)?)
}

fn diagonal_step_var(theta: &Var, grad: &Var, lr: &Var) -> Result<Var> {
    Ok(theta.sub(&lr.mul(grad)?)?)
}

/// Per-coordinate multipliers for `name`, expanded like the head.
fn lr_multipliers(model: &MetaModel, params: &BoundParams, name: &str) -> Result<Var> {
    let m = params.get(&names::lr(name))?;
    if name == names::HEAD_W || name == names::HEAD_B {
        Ok(m.expand(1, model.outputs())?)
    } else {
        Ok(m.clone())
    }
}

fn check_loss(step: usize, loss: f64) -> Result<()> {
    if !loss.is_finite() || loss.abs() > DIVERGENCE_LIMIT {
        return Err(Error::Diverged { step, loss });
    }
    Ok(())
}

/// Runs `config.steps` inner updates from the head-expanded initialization.
/// Fast weights that are not yet recorded become leaves on `tape`, so the
/// loop also works with constant meta-parameters.
pub fn adapt(model: &MetaModel, params: &BoundParams, data: &EpisodeData, config: &InnerConfig, tape: &Tape) -> Result<Trajectory> {
    let mut fast = model.initial_fast(params)?;
    let names: Vec<String> = fast.names().map(str::to_string).collect();
    for n in &names {
        let v = fast.get(n).expect("listed name");
        if !v.is_recorded() {
            let leaf = tape.leaf(v.value().clone());
            fast.insert(n.clone(), leaf);
        }
    }
    let mut thetas = vec![fast.snapshot()];
    let mut base_losses = Vec::with_capacity(config.steps);
    let mut meta_losses = Vec::with_capacity(config.steps);
    let mut velocity: Vec<Option<Var>> = vec![None; names.len()];

    for step in 0..config.steps {
        let m = meta_loss(model, params, &fast, data)?;
        let total = m.total.item();
        check_loss(step, total)?;
        base_losses.push(m.base.item());
        meta_losses.push(total);

        let inputs: Vec<&Var> = names.iter().map(|n| fast.get(n).expect("listed name")).collect();
        let grads = grad(&m.total, &inputs, !config.first_order)?;
        let mut next = FastWeights::default();
        for (i, (name, g)) in names.iter().zip(grads).enumerate() {
            let theta = fast.get(name).expect("listed name");
            let mut g = g;
            if config.weight_decay > 0.0 {
                g = g.add(&theta.scale(config.weight_decay)?)?;
            }
            if config.momentum > 0.0 {
                let v = match velocity[i].take() {
                    Some(v) => v.scale(config.momentum)?.add(&g)?,
                    None => g.clone(),
                };
                g = g.add(&v.scale(config.momentum)?)?;
                velocity[i] = Some(v);
            }
            let updated = if model.variant.metasgd {
                let lr = lr_multipliers(model, params, name)?.scale(config.alpha)?;
                diagonal_step_var(theta, &g, &lr)?
            } else {
                theta.sub(&g.scale(config.alpha)?)?
            };
            next.insert(name.clone(), updated);
        }
        fast = next;
        thetas.push(fast.snapshot());
    }
    Ok(Trajectory {
        thetas,
        base_losses,
        meta_losses,
        fast,
    })
}

/// Query-set result of adapting to one episode.
#[derive(Debug, Clone)]
pub struct EpisodeResult {
    pub query_loss: f64,
    pub accuracy: Option<f64>,
    pub predictions: Tensor,
    /// Meta-gradient of the query loss for every trainable parameter, when
    /// requested.
    pub grads: Option<BTreeMap<String, Tensor>>,
}

/// Adapts to `episode` and scores the query set with the plain base loss.
/// With `with_grad` the meta-gradient w.r.t. every trainable parameter is
/// returned as well.
pub fn run_episode(
    model: &MetaModel,
    params: &MetaParams,
    episode: &Episode,
    scorer: Option<&dyn RelationScorer>,
    config: &InnerConfig,
    precision: Precision,
    with_grad: bool,
) -> Result<EpisodeResult> {
    let tape = Tape::new();
    let cast = params.to_precision(precision);
    let bound = if with_grad {
        cast.bind(&tape, |n| model.is_trainable(n))
    } else {
        cast.constants()
    };
    let data = EpisodeData::new(model, episode, scorer, precision)?;
    let config = if with_grad {
        *config
    } else {
        InnerConfig {
            first_order: true,
            ..*config
        }
    };
    let traj = adapt(model, &bound, &data, &config, &tape)?;
    let logits = model.forward(&bound, &traj.fast, &data.query.x)?;
    let loss = base_loss(&logits, &data.query.y, BaseLoss::for_task(model.task.kind))?;
    check_loss(config.steps, loss.item())?;

    let accuracy = data.query.labels.as_ref().map(|labels| {
        let hits = logits.value().argmax_rows().iter().zip(labels).filter(|(a, b)| a == b).count();
        hits as f64 / labels.len() as f64
    });
    let grads = if with_grad {
        let leaves = bound.leaves();
        let inputs: Vec<&Var> = leaves.iter().map(|(_, v)| *v).collect();
        let gs = grad(&loss, &inputs, false)?;
        Some(
            leaves
                .iter()
                .zip(gs)
                .map(|((n, _), g)| (n.to_string(), g.value().to_precision(Precision::Double)))
                .collect(),
        )
    } else {
        None
    };
    Ok(EpisodeResult {
        query_loss: loss.item(),
        accuracy,
        predictions: logits.value().to_precision(Precision::Double),
        grads,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Activation, EncoderSpec, TaskShape};
    use crate::params::Variant;
    use crate::tasks::{ClusterConfig, PrototypeScorer, Split, TaskFamily, TaskKind, TaskSpec};

    fn setup(variant: Variant) -> (MetaModel, MetaParams, Episode) {
        let model = MetaModel::new(
            EncoderSpec::mlp(&[4, 8, 4], Activation::Relu),
            TaskShape {
                kind: TaskKind::Classification,
                n_way: 2,
            },
            variant,
        )
        .unwrap();
        let params = model.init_meta_params(None, 3).unwrap();
        let family = TaskFamily::Clusters(
            ClusterConfig {
                dim: 4,
                train_classes: 4,
                val_classes: 2,
                test_classes: 2,
                ..ClusterConfig::default()
            }
            .into(),
        );
        let spec = TaskSpec {
            query_per_class: 3,
            ..TaskSpec::classification(2, 1, 4)
        };
        (model, params, family.episode(&spec, Split::Train, 0, 0).unwrap())
    }

    fn trajectory(model: &MetaModel, params: &MetaParams, e: &Episode, cfg: &InnerConfig) -> Trajectory {
        let data = EpisodeData::new(model, e, Some(&PrototypeScorer::new()), Precision::Double).unwrap();
        adapt(model, &params.constants(), &data, cfg, &Tape::new()).unwrap()
    }

    #[test]
    fn zero_steps_keep_the_initialization() {
        let (m, p, e) = setup(Variant::maml());
        let t = trajectory(&m, &p, &e, &InnerConfig::plain(0.1, 0));
        assert_eq!(t.thetas.len(), 1);
        let b = p.constants();
        assert_eq!(t.final_theta(), &m.initial_fast(&b).unwrap().snapshot());
    }

    #[test]
    fn trajectory_has_one_entry_per_step_plus_init() {
        let (m, p, e) = setup(Variant::full());
        let t = trajectory(&m, &p, &e, &InnerConfig::default());
        assert_eq!(t.thetas.len(), 6);
        assert_eq!(t.base_losses.len(), 5);
    }

    #[test]
    fn head_columns_separate_after_one_step() {
        let (m, p, e) = setup(Variant::maml());
        let t = trajectory(&m, &p, &e, &InnerConfig::plain(0.5, 1));
        let head = &t.final_theta()[names::HEAD_W];
        let cols: Vec<Vec<f64>> = (0..2).map(|c| (0..head.rows()).map(|r| head.at(r, c)).collect()).collect();
        assert_ne!(cols[0], cols[1]);
    }

    #[test]
    fn preconditioner_of_diagonal() {
        let w = Tensor::diag(&[2.0, 3.0], Precision::Double);
        assert_eq!(materialize_preconditioner(&w).unwrap(), Tensor::diag(&[4.0, 9.0], Precision::Double));
        let i = Tensor::eye(3, Precision::Double);
        assert_eq!(materialize_preconditioner(&i).unwrap(), i);
    }

    #[test]
    fn diagonal_step_cases() {
        let theta = Tensor::from_vec(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let g = Tensor::from_vec(&[3], vec![0.3, 0.1, -4.0]).unwrap();
        let zero = Tensor::zeros(&[3], Precision::Double);
        assert_eq!(diagonal_precondition_step(&theta, &g, &zero).unwrap(), theta);
        let a = Tensor::full(&[3], 0.01, Precision::Double);
        assert_eq!(diagonal_precondition_step(&theta, &g, &a).unwrap(), theta.sub(&g.scale(0.01)).unwrap());
        let lr = Tensor::from_vec(&[3], vec![0.5, 2.0, 0.25]).unwrap();
        let got = diagonal_precondition_step(&theta, &g, &lr).unwrap();
        assert_eq!(got.data(), &[1.0 - 0.15, -2.0 - 0.2, 0.5 + 1.0]);
    }

    #[test]
    fn divergence_is_reported_with_the_step() {
        let (m, p, e) = setup(Variant::maml());
        let err = {
            let data = EpisodeData::new(&m, &e, None, Precision::Double).unwrap();
            adapt(&m, &p.constants(), &data, &InnerConfig::plain(1e9, 4), &Tape::new()).unwrap_err()
        };
        assert!(matches!(err, Error::Diverged { step, .. } if step > 0), "{err}");
    }

    #[test]
    fn first_order_and_second_order_share_the_forward_path() {
        let (m, p, e) = setup(Variant::full());
        let a = trajectory(&m, &p, &e, &InnerConfig::default());
        let b = trajectory(&m, &p, &e, &InnerConfig { first_order: true, ..InnerConfig::default() });
        assert_eq!(a.thetas, b.thetas);
    }

    #[test]
    fn frozen_layers_get_no_meta_gradient() {
        let (m, p, e) = setup(Variant::full());
        let r = run_episode(&m, &p, &e, None, &InnerConfig::plain(0.1, 2), Precision::Double, true);
        // transductive loss needs a scorer
        assert!(r.is_err());
        let m = m.with_variant(Variant { query_loss: false, ..Variant::full() });
        let p = m.init_meta_params(None, 3).unwrap();
        let r = run_episode(&m, &p, &e, None, &InnerConfig::plain(0.1, 2), Precision::Double, true).unwrap();
        let grads = r.grads.unwrap();
        assert!(!grads.contains_key(&names::layer_w(0)));
        assert!(grads.contains_key(&names::layer_w(1)));
        assert!(grads.contains_key(&names::warp(1)));
    }

    #[test]
    fn single_precision_runs() {
        let (m, p, e) = setup(Variant::maml());
        let r = run_episode(&m, &p, &e, None, &InnerConfig::default(), Precision::Single, true).unwrap();
        assert_eq!(r.query_loss, r.query_loss as f32 as f64);
    }
}
