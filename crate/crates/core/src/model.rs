//! Base learner: a fully connected encoder with interleaved warp layers and
//! FiLM modulation, followed by a permutation-invariant head.
//!
//! Row convention: a batch is `[n, d]` and a layer computes `x W + b` with
//! `W: [in, out]`. A warp matrix ω multiplies the column activation, i.e. the
//! layer output becomes `(x W + b) ωᵀ`, so holding ω fixed while adapting W
//! preconditions the effective weights by `ω ωᵀ`.

use std::collections::BTreeMap;

use npbml_ad::{Precision, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::{self, LossNet};
use crate::params::{names, BoundParams, MetaParams, Variant};
use crate::tasks::TaskKind;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    LeakyRelu(f64),
    Identity,
}

impl Activation {
    pub fn apply(&self, x: &Var) -> Result<Var> {
        Ok(match self {
            Activation::Relu => x.relu()?,
            Activation::LeakyRelu(s) => x.leaky_relu(*s)?,
            Activation::Identity => x.clone(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSpec {
    /// `(in, out)` per layer; consecutive layers must chain.
    pub layer_dims: Vec<(usize, usize)>,
    pub activations: Vec<Activation>,
    /// Zero-based layers followed by a warp matrix and a FiLM generator.
    pub warped_layers: Vec<usize>,
    /// Zero-based layers updated in the inner loop. All other encoder
    /// layers are frozen in both loops.
    pub adapt_layers: Vec<usize>,
}

impl EncoderSpec {
    /// Fully connected stack through `dims` with one activation throughout.
    pub fn mlp(dims: &[usize], activation: Activation) -> Self {
        let layer_dims: Vec<_> = dims.windows(2).map(|w| (w[0], w[1])).collect();
        let last = layer_dims.len().saturating_sub(1);
        Self {
            activations: vec![activation; layer_dims.len()],
            layer_dims,
            warped_layers: vec![last],
            adapt_layers: vec![last],
        }
    }

    /// `input → 64 → 64 → feat`, warp and FiLM on the last layer, which is
    /// also the only adapted encoder layer.
    pub fn toy(input_dim: usize, feature_dim: usize) -> Self {
        Self::mlp(&[input_dim, 64, 64, feature_dim], Activation::Relu)
    }

    pub fn depth(&self) -> usize {
        self.layer_dims.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims.first().map_or(0, |d| d.0)
    }

    pub fn feature_dim(&self) -> usize {
        self.layer_dims.last().map_or(0, |d| d.1)
    }

    pub fn is_warped(&self, layer: usize) -> bool {
        self.warped_layers.contains(&layer)
    }

    pub fn is_adapted(&self, layer: usize) -> bool {
        self.adapt_layers.contains(&layer)
    }

    pub fn validate(&self) -> Result<()> {
        let depth = self.depth();
        if depth == 0 {
            return Err(Error::Spec("encoder needs at least one layer".into()));
        }
        if let Some((i, d)) = self.layer_dims.iter().enumerate().find(|(_, d)| d.0 == 0 || d.1 == 0) {
            return Err(Error::Spec(format!("layer {i} has an empty extent {d:?}")));
        }
        for (i, w) in self.layer_dims.windows(2).enumerate() {
            if w[0].1 != w[1].0 {
                return Err(Error::Spec(format!(
                    "layer {i} outputs {} but layer {} expects {}",
                    w[0].1,
                    i + 1,
                    w[1].0
                )));
            }
        }
        if self.activations.len() != depth {
            return Err(Error::Spec(format!(
                "{} activations for {depth} layers",
                self.activations.len()
            )));
        }
        for (what, set) in [("warped", &self.warped_layers), ("adapted", &self.adapt_layers)] {
            if let Some(l) = set.iter().find(|l| **l >= depth) {
                return Err(Error::Spec(format!("{what} layer {l} out of range for {depth} layers")));
            }
            let mut sorted = set.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() != set.len() {
                return Err(Error::Spec(format!("{what} layers contain duplicates")));
            }
        }
        Ok(())
    }
}

/// Output side of the task the model is built for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskShape {
    pub kind: TaskKind,
    /// Classes per episode; ignored for regression.
    pub n_way: usize,
}

impl TaskShape {
    pub fn outputs(&self) -> usize {
        match self.kind {
            TaskKind::Classification => self.n_way,
            TaskKind::Regression => 1,
        }
    }
}

/// Maps an activation vector `x` of extent d to `(γ, β)` and returns
/// `(γ + 1) ⊙ x + β`.
#[derive(Debug, Clone)]
pub struct FilmGenerator {
    /// `[d, 2d]`
    pub weight: Var,
    /// `[1, 2d]`
    pub bias: Var,
}

impl FilmGenerator {
    pub fn from_params(params: &BoundParams, weight: &str, bias: &str) -> Result<Self> {
        Ok(Self {
            weight: params.get(weight)?.clone(),
            bias: params.get(bias)?.clone(),
        })
    }

    pub fn extent(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn apply(&self, x: &Var) -> Result<Var> {
        film(x, self)
    }
}

/// Added to the squared norm before the root in [`film_condition`].
pub const CONDITION_EPS: f64 = 1e-6;

/// Each row scaled to unit Euclidean norm: the scale-free summary the
/// generator reads. With generator entries of variance `s²`, γ and β then
/// have variance `s²` whatever the width.
pub fn film_condition(x: &Var) -> Result<Var> {
    let d = x.shape().get(1).copied().unwrap_or(0);
    let eps = Var::constant(Tensor::full(&[x.shape()[0], 1], CONDITION_EPS, x.precision()));
    let norm = x.square()?.sum(1)?.add(&eps)?.sqrt()?;
    Ok(x.div(&norm.expand(1, d)?)?)
}

/// Feature-wise linear modulation of every row of `x`. The coefficients are
/// generated from the normalised row, so the modulation grows linearly with
/// the activation rather than quadratically.
pub fn film(x: &Var, generator: &FilmGenerator) -> Result<Var> {
    let d = generator.extent();
    let got = x.shape().get(1).copied().unwrap_or(0);
    if x.shape().len() != 2 || got != d || generator.weight.shape() != [d, 2 * d] || generator.bias.shape() != [1, 2 * d] {
        return Err(Error::FilmExtent { expected: d, got });
    }
    let coeffs = film_condition(x)?.matmul(&generator.weight)?.add_row(&generator.bias)?;
    let gamma = coeffs.slice(1, 0, d)?;
    let beta = coeffs.slice(1, d, d)?;
    Ok(gamma.mul(x)?.add(x)?.add(&beta)?)
}

/// Duplicates a single head vector into `n` class columns.
pub fn expand_head(theta_head: &Var, n: usize) -> Result<Var> {
    let column = match theta_head.shape() {
        [_, 1] => theta_head.clone(),
        [d] => theta_head.reshape(&[*d, 1])?,
        other => {
            return Err(Error::ParamShape {
                name: names::HEAD_W.into(),
                expected: vec![other.first().copied().unwrap_or(0), 1],
                got: other.to_vec(),
            })
        }
    };
    if n == 0 {
        return Err(Error::Spec("head needs at least one output".into()));
    }
    Ok(column.expand(1, n)?)
}

/// Inner-loop weights: the adapted encoder layers and the expanded head.
#[derive(Debug, Clone, Default)]
pub struct FastWeights {
    vars: BTreeMap<String, Var>,
}

impl FastWeights {
    pub fn new(vars: BTreeMap<String, Var>) -> Self {
        Self { vars }
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Var) {
        self.vars.insert(name.into(), value);
    }

    /// The fast weight when adapted, otherwise the meta-parameter.
    pub fn resolve<'a>(&'a self, params: &'a BoundParams, name: &str) -> Result<&'a Var> {
        match self.vars.get(name) {
            Some(v) => Ok(v),
            None => params.get(name),
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn snapshot(&self) -> BTreeMap<String, Tensor> {
        self.vars.iter().map(|(k, v)| (k.clone(), v.value().clone())).collect()
    }

    pub fn detached(&self) -> Self {
        Self {
            vars: self.vars.iter().map(|(k, v)| (k.clone(), v.detach())).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaModel {
    pub encoder: EncoderSpec,
    pub task: TaskShape,
    pub variant: Variant,
    /// Hidden width of each loss network.
    pub loss_hidden: usize,
    /// Standard deviation of the N(0, σ²) draws for φ and ψ.
    pub init_std: f64,
}

impl MetaModel {
    pub fn new(encoder: EncoderSpec, task: TaskShape, variant: Variant) -> Result<Self> {
        encoder.validate()?;
        if task.kind == TaskKind::Classification && task.n_way < 2 {
            return Err(Error::Spec(format!("classification needs n_way >= 2, got {}", task.n_way)));
        }
        Ok(Self {
            encoder,
            task,
            variant,
            loss_hidden: 40,
            init_std: 0.1,
        })
    }

    pub fn with_variant(&self, variant: Variant) -> Self {
        Self {
            variant,
            ..self.clone()
        }
    }

    pub fn outputs(&self) -> usize {
        self.task.outputs()
    }

    pub fn has_warp(&self, layer: usize) -> bool {
        self.variant.warp && self.encoder.is_warped(layer)
    }

    pub fn has_film(&self, layer: usize) -> bool {
        self.variant.film && self.encoder.is_warped(layer)
    }

    pub fn active_loss_nets(&self) -> Vec<LossNet> {
        let v = &self.variant;
        [
            (v.support_loss, LossNet::Support),
            (v.query_loss, LossNet::Query),
            (v.regularizer, LossNet::Regularizer),
        ]
        .into_iter()
        .filter_map(|(on, net)| on.then_some(net))
        .collect()
    }

    /// Names of the meta-parameters that seed the fast weights, in order.
    pub fn adapted_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for &l in &self.encoder.adapt_layers {
            out.push(names::layer_w(l));
            out.push(names::layer_b(l));
        }
        out.push(names::HEAD_W.into());
        out.push(names::HEAD_B.into());
        out
    }

    /// Frozen encoder layers receive no meta-gradient.
    pub fn is_trainable(&self, name: &str) -> bool {
        let Some(rest) = name.strip_prefix("theta.enc.") else {
            return true;
        };
        rest.split('.')
            .next()
            .and_then(|l| l.parse::<usize>().ok())
            .is_some_and(|l| self.encoder.is_adapted(l))
    }

    /// Fresh meta-parameters: identity warps, N(0, σ²) loss networks and
    /// FiLM generators, fan-in scaled encoder weights unless `pretrained`
    /// supplies them.
    pub fn init_meta_params(&self, pretrained: Option<&MetaParams>, seed: u64) -> Result<MetaParams> {
        let prec = Precision::Double;
        let mut params = match pretrained {
            Some(p) => {
                let mut out = MetaParams::new();
                for (l, &(din, dout)) in self.encoder.layer_dims.iter().enumerate() {
                    let (wn, bn) = (names::layer_w(l), names::layer_b(l));
                    let (pw, pb) = (p.get(&wn)?, p.get(&bn)?);
                    check_shape(&wn, pw, &[din, dout])?;
                    check_shape(&bn, pb, &[1, dout])?;
                    out.insert(wn, pw.to_precision(prec));
                    out.insert(bn, pb.to_precision(prec));
                }
                out
            }
            None => init_encoder(&self.encoder, seed),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        let feat = self.encoder.feature_dim();
        params.insert(names::HEAD_W, gaussian(&mut rng, &[feat, 1], (1.0 / feat as f64).sqrt()));
        params.insert(names::HEAD_B, Tensor::zeros(&[1, 1], prec));

        for (l, &(_, dout)) in self.encoder.layer_dims.iter().enumerate() {
            if self.has_warp(l) {
                params.insert(names::warp(l), Tensor::eye(dout, prec));
            }
            if self.has_film(l) {
                params.insert(names::film_enc_w(l), gaussian(&mut rng, &[dout, 2 * dout], self.init_std));
                params.insert(names::film_enc_b(l), gaussian(&mut rng, &[1, 2 * dout], self.init_std));
            }
        }

        for net in self.active_loss_nets() {
            loss::init_loss_net(self, net, &mut rng, &mut params);
        }

        if self.variant.metasgd {
            for name in self.adapted_names() {
                let shape = params.get(&name)?.shape().to_vec();
                params.insert(names::lr(&name), Tensor::ones(&shape, prec));
            }
        }
        Ok(params)
    }

    /// Checks that `params` holds exactly the tensors this model allocates.
    pub fn check_params(&self, params: &MetaParams) -> Result<()> {
        let reference = self.init_meta_params(None, 0)?;
        for (name, t) in reference.iter() {
            let have = params.get(name)?;
            check_shape(name, have, t.shape())?;
        }
        if let Some(extra) = params.names().find(|n| !reference.contains(n)) {
            return Err(Error::Checkpoint(format!(
                "parameter `{extra}` is not used by variant {:?}",
                self.variant
            )));
        }
        Ok(())
    }

    /// θ₀ for the inner loop: adapted encoder layers plus the head expanded
    /// into one column per output.
    pub fn initial_fast(&self, params: &BoundParams) -> Result<FastWeights> {
        let mut vars = BTreeMap::new();
        for &l in &self.encoder.adapt_layers {
            for n in [names::layer_w(l), names::layer_b(l)] {
                vars.insert(n.clone(), params.get(&n)?.clone());
            }
        }
        let n = self.outputs();
        vars.insert(names::HEAD_W.into(), expand_head(params.get(names::HEAD_W)?, n)?);
        vars.insert(names::HEAD_B.into(), params.get(names::HEAD_B)?.expand(1, n)?);
        Ok(FastWeights::new(vars))
    }

    /// Features `z(x)` before the head.
    pub fn encode(&self, params: &BoundParams, fast: &FastWeights, x: &Var) -> Result<Var> {
        if x.shape().len() != 2 || x.shape()[1] != self.encoder.input_dim() {
            return Err(Error::ParamShape {
                name: "input".into(),
                expected: vec![x.shape().first().copied().unwrap_or(0), self.encoder.input_dim()],
                got: x.shape().to_vec(),
            });
        }
        let mut h = x.clone();
        for (l, act) in self.encoder.activations.iter().enumerate() {
            let w = fast.resolve(params, &names::layer_w(l))?;
            let b = fast.resolve(params, &names::layer_b(l))?;
            h = h.matmul(w)?.add_row(b)?;
            if self.has_warp(l) {
                h = h.matmul(&params.get(&names::warp(l))?.transpose()?)?;
            }
            if self.has_film(l) {
                let generator = FilmGenerator::from_params(params, &names::film_enc_w(l), &names::film_enc_b(l))?;
                h = film(&h, &generator)?;
            }
            h = act.apply(&h)?;
        }
        Ok(h)
    }

    /// Logits (or regression outputs) `[n, outputs]`.
    pub fn forward(&self, params: &BoundParams, fast: &FastWeights, x: &Var) -> Result<Var> {
        let z = self.encode(params, fast, x)?;
        let hw = fast.get(names::HEAD_W).ok_or_else(|| Error::MissingParam(names::HEAD_W.into()))?;
        let hb = fast.get(names::HEAD_B).ok_or_else(|| Error::MissingParam(names::HEAD_B.into()))?;
        Ok(z.matmul(hw)?.add_row(hb)?)
    }
}

/// Fan-in scaled Gaussian weights and zero biases for every encoder layer.
pub fn init_encoder(spec: &EncoderSpec, seed: u64) -> MetaParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = MetaParams::new();
    for (l, &(din, dout)) in spec.layer_dims.iter().enumerate() {
        let gain = match spec.activations[l] {
            Activation::Identity => 1.0,
            _ => 2.0,
        };
        params.insert(names::layer_w(l), gaussian(&mut rng, &[din, dout], (gain / din as f64).sqrt()));
        params.insert(names::layer_b(l), Tensor::zeros(&[1, dout], Precision::Double));
    }
    params
}

/// The encoder without warps or FiLM, as used for embeddings and
/// pre-training.
pub fn plain_encode(spec: &EncoderSpec, params: &BoundParams, x: &Var) -> Result<Var> {
    let mut h = x.clone();
    for (l, act) in spec.activations.iter().enumerate() {
        h = h.matmul(params.get(&names::layer_w(l))?)?.add_row(params.get(&names::layer_b(l))?)?;
        h = act.apply(&h)?;
    }
    Ok(h)
}

fn check_shape(name: &str, t: &Tensor, expected: &[usize]) -> Result<()> {
    if t.shape() != expected {
        return Err(Error::ParamShape {
            name: name.to_string(),
            expected: expected.to_vec(),
            got: t.shape().to_vec(),
        });
    }
    Ok(())
}

pub(crate) fn gaussian(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let normal = Normal::new(0.0, std).expect("finite standard deviation");
    let n = shape.iter().product();
    let data = (0..n).map(|_| normal.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data, Precision::Double).expect("shape matches draw count")
}
