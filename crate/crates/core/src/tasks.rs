//! Episodic task distributions, the relation-score surrogate and encoder
//! pre-training.

use std::f64::consts::PI;
use std::fmt;

use npbml_ad::{grad, Precision, Tape, Tensor, Var};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{gaussian, init_encoder, plain_encode, EncoderSpec};
use crate::params::{names, MetaParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Classification,
    Regression,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    fn salt(self) -> u64 {
        match self {
            Split::Train => 0x7472_6169_6e00_0000,
            Split::Val => 0x7661_6c00_0000_0000,
            Split::Test => 0x7465_7374_0000_0000,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "meta-train",
            Split::Val => "meta-validation",
            Split::Test => "meta-test",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub kind: TaskKind,
    /// Classes per episode; 1 for regression.
    pub n_way: usize,
    pub k_shot: usize,
    /// Query points per class (per task for regression).
    #[serde(default = "default_query")]
    pub query_per_class: usize,
    pub input_dim: usize,
}

fn default_query() -> usize {
    15
}

impl TaskSpec {
    pub fn classification(n_way: usize, k_shot: usize, input_dim: usize) -> Self {
        Self {
            kind: TaskKind::Classification,
            n_way,
            k_shot,
            query_per_class: 15,
            input_dim,
        }
    }

    pub fn regression(k_shot: usize) -> Self {
        Self {
            kind: TaskKind::Regression,
            n_way: 1,
            k_shot,
            query_per_class: 15,
            input_dim: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind == TaskKind::Classification && self.n_way < 2 {
            return Err(Error::config("task.n_way", "classification needs at least 2 classes"));
        }
        if self.k_shot == 0 {
            return Err(Error::config("task.k_shot", "must be at least 1"));
        }
        if self.query_per_class == 0 {
            return Err(Error::config("task.query_per_class", "must be at least 1"));
        }
        if self.input_dim == 0 {
            return Err(Error::config("task.input_dim", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    /// Episode-local class index per instance.
    Labels(Vec<usize>),
    /// `[n, 1]` regression targets.
    Values(Tensor),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Labels(l) => l.len(),
            Targets::Values(v) => v.rows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn labels(&self) -> Option<&[usize]> {
        match self {
            Targets::Labels(l) => Some(l),
            Targets::Values(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub support_x: Tensor,
    pub support_y: Targets,
    pub query_x: Tensor,
    pub query_y: Targets,
    /// Global class id of each episode-local label.
    pub classes: Vec<usize>,
    /// Index of the random stream the episode was drawn from.
    pub seed: u64,
}

impl Episode {
    pub fn n_way(&self) -> usize {
        self.classes.len().max(1)
    }

    pub fn kind(&self) -> TaskKind {
        match self.support_y {
            Targets::Labels(_) => TaskKind::Classification,
            Targets::Values(_) => TaskKind::Regression,
        }
    }

    /// Renames local class `c` to `perm[c]`.
    pub fn relabel(&self, perm: &[usize]) -> Result<Episode> {
        let n = self.classes.len();
        let mut seen = vec![false; n];
        if perm.len() != n || perm.iter().any(|&p| p >= n || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Task(format!("{perm:?} is not a permutation of {n} classes")));
        }
        let map = |t: &Targets| match t {
            Targets::Labels(l) => Targets::Labels(l.iter().map(|&c| perm[c]).collect()),
            other => other.clone(),
        };
        let mut classes = vec![0; n];
        for (c, &p) in perm.iter().enumerate() {
            classes[p] = self.classes[c];
        }
        Ok(Episode {
            support_y: map(&self.support_y),
            query_y: map(&self.query_y),
            classes,
            ..self.clone()
        })
    }
}

/// Sinusoid regression tasks `y = a sin(x - p) + ε`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SinusoidFamily {
    pub amplitude: (f64, f64),
    pub phase: (f64, f64),
    pub input: (f64, f64),
    pub noise: f64,
}

impl Default for SinusoidFamily {
    fn default() -> Self {
        Self {
            amplitude: (0.1, 5.0),
            phase: (0.0, PI),
            input: (-5.0, 5.0),
            noise: 0.1,
        }
    }
}

impl SinusoidFamily {
    pub fn validate(&self) -> Result<()> {
        for (field, (lo, hi)) in [("amplitude", self.amplitude), ("phase", self.phase), ("input", self.input)] {
            if !(lo < hi) {
                return Err(Error::config(format!("family.{field}"), format!("empty range [{lo}, {hi}]")));
            }
        }
        if !(self.noise >= 0.0) {
            return Err(Error::config("family.noise", "must be non-negative"));
        }
        Ok(())
    }

    fn sample(&self, spec: &TaskSpec, rng: &mut ChaCha8Rng) -> Result<(Tensor, Targets, Tensor, Targets)> {
        let amp = rng.random_range(self.amplitude.0..self.amplitude.1);
        let phase = rng.random_range(self.phase.0..self.phase.1);
        let noise = Normal::new(0.0, self.noise).map_err(|e| Error::Task(e.to_string()))?;
        let mut draw = |n: usize| -> Result<(Tensor, Targets)> {
            let xs: Vec<f64> = (0..n).map(|_| rng.random_range(self.input.0..self.input.1)).collect();
            let ys: Vec<f64> = xs.iter().map(|x| amp * (x - phase).sin() + noise.sample(rng)).collect();
            Ok((Tensor::from_vec(&[n, 1], xs)?, Targets::Values(Tensor::from_vec(&[n, 1], ys)?)))
        };
        let (sx, sy) = draw(spec.k_shot)?;
        let (qx, qy) = draw(spec.query_per_class)?;
        Ok((sx, sy, qx, qy))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterConfig {
    pub train_classes: usize,
    pub val_classes: usize,
    pub test_classes: usize,
    pub dim: usize,
    /// Norm of every class mean.
    pub radius: f64,
    /// Shared isotropic standard deviation.
    pub sigma: f64,
    /// Seed of the class means; independent of the run seed so every run
    /// sees the same pool.
    pub seed: u64,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            train_classes: 60,
            val_classes: 16,
            test_classes: 20,
            dim: 32,
            radius: 3.0,
            sigma: 1.0,
            seed: 2024,
        }
    }
}

/// A pool of Gaussian classes partitioned into disjoint train, validation
/// and test ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "ClusterConfig", into = "ClusterConfig")]
pub struct ClusterFamily {
    config: ClusterConfig,
    means: Vec<Vec<f64>>,
}

impl From<ClusterConfig> for ClusterFamily {
    fn from(config: ClusterConfig) -> Self {
        let total = config.train_classes + config.val_classes + config.test_classes;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let unit = Normal::new(0.0, 1.0).expect("unit normal");
        let means = (0..total)
            .map(|_| {
                let v: Vec<f64> = (0..config.dim).map(|_| unit.sample(&mut rng)).collect();
                let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
                v.into_iter().map(|a| a * config.radius / norm).collect()
            })
            .collect();
        Self { config, means }
    }
}

impl From<ClusterFamily> for ClusterConfig {
    fn from(f: ClusterFamily) -> Self {
        f.config
    }
}

impl Default for ClusterFamily {
    fn default() -> Self {
        ClusterConfig::default().into()
    }
}

impl ClusterFamily {
    pub fn config(&self) -> &ClusterConfig {
        &self.config
    }

    pub fn num_classes(&self) -> usize {
        self.means.len()
    }

    pub fn mean(&self, class: usize) -> &[f64] {
        &self.means[class]
    }

    /// Global class ids of one split.
    pub fn pool(&self, split: Split) -> std::ops::Range<usize> {
        let c = &self.config;
        match split {
            Split::Train => 0..c.train_classes,
            Split::Val => c.train_classes..c.train_classes + c.val_classes,
            Split::Test => c.train_classes + c.val_classes..self.num_classes(),
        }
    }

    pub fn validate(&self, spec: &TaskSpec) -> Result<()> {
        let c = &self.config;
        if c.dim == 0 || !(c.sigma > 0.0) || !(c.radius >= 0.0) {
            return Err(Error::config("family", "dim, sigma and radius must be positive"));
        }
        if spec.input_dim != c.dim {
            return Err(Error::config(
                "task.input_dim",
                format!("family draws {}-dimensional points", c.dim),
            ));
        }
        if self.num_classes() < 3 * spec.n_way {
            return Err(Error::config(
                "family",
                format!("{} classes cannot host three disjoint {}-way splits", self.num_classes(), spec.n_way),
            ));
        }
        for split in [Split::Train, Split::Val, Split::Test] {
            if self.pool(split).len() < spec.n_way {
                return Err(Error::config("family", format!("{split} pool smaller than n_way")));
            }
        }
        Ok(())
    }

    /// `n` points of one class as rows.
    pub fn draw(&self, class: usize, n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let noise = Normal::new(0.0, self.config.sigma).expect("positive sigma");
        let mean = &self.means[class];
        (0..n).flat_map(|_| mean.iter().map(|m| m + noise.sample(rng)).collect::<Vec<_>>()).collect()
    }

    fn sample(&self, spec: &TaskSpec, split: Split, rng: &mut ChaCha8Rng) -> Result<(Tensor, Targets, Tensor, Targets, Vec<usize>)> {
        let pool = self.pool(split);
        if pool.len() < spec.n_way {
            return Err(Error::Task(format!(
                "{split} pool has {} classes, episode needs {}",
                pool.len(),
                spec.n_way
            )));
        }
        let classes: Vec<usize> = index::sample(rng, pool.len(), spec.n_way).into_iter().map(|i| pool.start + i).collect();
        let d = self.config.dim;
        let (mut sx, mut sy, mut qx, mut qy) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for (local, &class) in classes.iter().enumerate() {
            // one draw per class, split into disjoint support and query parts
            let points = self.draw(class, spec.k_shot + spec.query_per_class, rng);
            let (s, q) = points.split_at(spec.k_shot * d);
            sx.extend_from_slice(s);
            qx.extend_from_slice(q);
            sy.extend(std::iter::repeat_n(local, spec.k_shot));
            qy.extend(std::iter::repeat_n(local, spec.query_per_class));
        }
        Ok((
            Tensor::from_vec(&[sy.len(), d], sx)?,
            Targets::Labels(sy),
            Tensor::from_vec(&[qy.len(), d], qx)?,
            Targets::Labels(qy),
            classes,
        ))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum TaskFamily {
    Sinusoid(SinusoidFamily),
    Clusters(ClusterFamily),
}

impl TaskFamily {
    pub fn kind(&self) -> TaskKind {
        match self {
            TaskFamily::Sinusoid(_) => TaskKind::Regression,
            TaskFamily::Clusters(_) => TaskKind::Classification,
        }
    }

    pub fn validate(&self, spec: &TaskSpec) -> Result<()> {
        spec.validate()?;
        if spec.kind != self.kind() {
            return Err(Error::config("task.kind", format!("family produces {:?} tasks", self.kind())));
        }
        match self {
            TaskFamily::Sinusoid(f) => {
                if spec.input_dim != 1 {
                    return Err(Error::config("task.input_dim", "sinusoid inputs are scalar"));
                }
                f.validate()
            }
            TaskFamily::Clusters(f) => f.validate(spec),
        }
    }

    pub fn sample_episode(&self, spec: &TaskSpec, split: Split, rng: &mut ChaCha8Rng) -> Result<Episode> {
        if spec.kind != self.kind() {
            return Err(Error::Task(format!("family produces {:?} tasks", self.kind())));
        }
        let (support_x, support_y, query_x, query_y, classes) = match self {
            TaskFamily::Sinusoid(f) => {
                let (a, b, c, d) = f.sample(spec, rng)?;
                (a, b, c, d, Vec::new())
            }
            TaskFamily::Clusters(f) => f.sample(spec, split, rng)?,
        };
        Ok(Episode {
            support_x,
            support_y,
            query_x,
            query_y,
            classes,
            seed: 0,
        })
    }

    /// Episode `index` of the stream `(root, split)`. Streams are independent,
    /// so episodes can be drawn in any order or concurrently.
    pub fn episode(&self, spec: &TaskSpec, split: Split, root: u64, index: u64) -> Result<Episode> {
        let mut rng = episode_rng(root, split, index);
        let mut e = self.sample_episode(spec, split, &mut rng)?;
        e.seed = index;
        Ok(e)
    }
}

pub fn episode_rng(root: u64, split: Split, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(root ^ split.salt());
    rng.set_stream(index);
    rng
}

/// Per-query side information for the transductive loss. Implementations
/// must be deterministic; their output is never differentiated.
pub trait RelationScorer: Send + Sync {
    /// `[n_query, N]` class scores, or `[n_query, 1]` target estimates for
    /// regression.
    fn scores(&self, episode: &Episode) -> Result<Tensor>;
}

/// Softmax over negative squared distances to class prototypes, in input
/// space or in the space of a (pre-trained) encoder.
#[derive(Debug, Clone, Default)]
pub struct PrototypeScorer {
    encoder: Option<(EncoderSpec, MetaParams)>,
}

impl PrototypeScorer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_encoder(spec: EncoderSpec, params: &MetaParams) -> Result<Self> {
        let mut theta = MetaParams::new();
        for l in 0..spec.depth() {
            for n in [names::layer_w(l), names::layer_b(l)] {
                theta.insert(n.clone(), params.get(&n)?.to_precision(Precision::Double));
            }
        }
        Ok(Self {
            encoder: Some((spec, theta)),
        })
    }

    fn embed(&self, x: &Tensor) -> Result<Tensor> {
        match &self.encoder {
            None => Ok(x.to_precision(Precision::Double)),
            Some((spec, params)) => {
                let x = Var::constant(x.to_precision(Precision::Double));
                Ok(plain_encode(spec, &params.constants(), &x)?.value().clone())
            }
        }
    }
}

impl RelationScorer for PrototypeScorer {
    fn scores(&self, episode: &Episode) -> Result<Tensor> {
        let labels = episode
            .support_y
            .labels()
            .ok_or_else(|| Error::Task("prototype scores need class labels".into()))?;
        let n = episode.n_way();
        let zs = self.embed(&episode.support_x)?;
        let zq = self.embed(&episode.query_x)?;
        let d = zs.cols();
        let mut protos = vec![0.0; n * d];
        let mut counts = vec![0usize; n];
        for (i, &c) in labels.iter().enumerate() {
            counts[c] += 1;
            for (p, v) in protos[c * d..(c + 1) * d].iter_mut().zip(zs.row(i)) {
                *p += v;
            }
        }
        for (c, &k) in counts.iter().enumerate() {
            for p in &mut protos[c * d..(c + 1) * d] {
                *p /= k.max(1) as f64;
            }
        }
        let mut neg_dist = Vec::with_capacity(zq.rows() * n);
        for q in 0..zq.rows() {
            let row = zq.row(q);
            for c in 0..n {
                let proto = &protos[c * d..(c + 1) * d];
                neg_dist.push(-row.iter().zip(proto).map(|(a, b)| (a - b).powi(2)).sum::<f64>());
            }
        }
        Ok(Tensor::from_vec(&[zq.rows(), n], neg_dist)?.softmax(1)?)
    }
}

/// Nadaraya–Watson estimate of each query target from the support set with
/// a Gaussian kernel; the regression counterpart of prototype scores.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelSmoother {
    pub bandwidth: f64,
}

impl Default for KernelSmoother {
    fn default() -> Self {
        Self { bandwidth: 1.0 }
    }
}

impl RelationScorer for KernelSmoother {
    fn scores(&self, episode: &Episode) -> Result<Tensor> {
        let Targets::Values(ys) = &episode.support_y else {
            return Err(Error::Task("kernel smoothing needs regression targets".into()));
        };
        let (xs, xq) = (&episode.support_x, &episode.query_x);
        let h2 = 2.0 * self.bandwidth * self.bandwidth;
        let mut out = Vec::with_capacity(xq.rows());
        for q in 0..xq.rows() {
            let logits: Vec<f64> = (0..xs.rows())
                .map(|s| -xq.row(q).iter().zip(xs.row(s)).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / h2)
                .collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let total: f64 = w.iter().sum();
            out.push(w.iter().zip(ys.data()).map(|(w, y)| w * y).sum::<f64>() / total);
        }
        Ok(Tensor::from_vec(&[xq.rows(), 1], out)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 0,
            batch: 64,
            lr: 0.05,
            momentum: 0.9,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pretrained {
    /// Encoder weights `theta.enc.*`; the temporary head is discarded.
    pub encoder: MetaParams,
    /// Accuracy of encoder + temporary head on a fresh batch of the
    /// meta-train pool, measured after training.
    pub accuracy: f64,
}

/// Trains the encoder with a temporary all-classes head on the meta-train
/// pool. With zero steps the result equals `init_encoder(spec, seed)`.
pub fn pretrain_encoder(family: &ClusterFamily, spec: &EncoderSpec, config: &PretrainConfig) -> Result<Pretrained> {
    spec.validate()?;
    if spec.input_dim() != family.config.dim {
        return Err(Error::config("encoder.layer_dims", "input extent differs from the family dimension"));
    }
    let pool = family.pool(Split::Train);
    let c = pool.len();
    let mut encoder = init_encoder(spec, config.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(2);
    let feat = spec.feature_dim();
    let mut head_w = gaussian(&mut rng, &[feat, c], (1.0 / feat as f64).sqrt());
    let mut head_b = Tensor::zeros(&[1, c], Precision::Double);

    let batch = |rng: &mut ChaCha8Rng| -> Result<(Tensor, Vec<usize>)> {
        let labels: Vec<usize> = (0..config.batch.max(1)).map(|_| rng.random_range(0..c)).collect();
        let data = labels.iter().flat_map(|&l| family.draw(pool.start + l, 1, rng)).collect();
        Ok((Tensor::from_vec(&[labels.len(), family.config.dim], data)?, labels))
    };

    let mut velocity: Vec<Option<Tensor>> = Vec::new();
    for _ in 0..config.steps {
        let (x, labels) = batch(&mut rng)?;
        let tape = Tape::new();
        let bound = encoder.bind(&tape, |_| true);
        let (hw, hb) = (tape.leaf(head_w.clone()), tape.leaf(head_b.clone()));
        let z = plain_encode(spec, &bound, &Var::constant(x))?;
        let logits = z.matmul(&hw)?.add_row(&hb)?;
        let onehot = Var::one_hot(&labels, c, Precision::Double)?;
        let loss = logits.log_softmax(1)?.mul(&onehot)?.sum(1)?.mean_all()?.neg()?;

        let leaves = bound.leaves();
        let mut inputs: Vec<&Var> = leaves.iter().map(|(_, v)| *v).collect();
        inputs.push(&hw);
        inputs.push(&hb);
        let grads = grad(&loss, &inputs, false)?;
        velocity.resize(grads.len(), None);
        let names: Vec<String> = leaves.iter().map(|(n, _)| n.to_string()).collect();
        for (i, g) in grads.iter().enumerate() {
            let g = g.value();
            let v = match velocity[i].take() {
                Some(v) => v.scale(config.momentum).add(g)?,
                None => g.clone(),
            };
            let step = v.scale(config.lr);
            let target = match i.checked_sub(names.len()) {
                None => encoder.get_mut(&names[i])?,
                Some(0) => &mut head_w,
                Some(_) => &mut head_b,
            };
            *target = target.sub(&step)?;
            velocity[i] = Some(v);
        }
    }

    let (x, labels) = batch(&mut rng)?;
    let z = plain_encode(spec, &encoder.constants(), &Var::constant(x))?;
    let logits = z.value().matmul(&head_w)?;
    let logits = logits.add(&head_b.expand_axis(0, logits.rows())?)?;
    let correct = logits.argmax_rows().iter().zip(&labels).filter(|(a, b)| a == b).count();
    Ok(Pretrained {
        encoder,
        accuracy: correct as f64 / labels.len() as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clusters() -> TaskFamily {
        TaskFamily::Clusters(ClusterFamily::default())
    }

    #[test]
    fn five_way_five_shot_sizes() {
        let spec = TaskSpec::classification(5, 5, 32);
        let e = clusters().episode(&spec, Split::Train, 1, 0).unwrap();
        assert_eq!(e.support_x.shape(), &[25, 32]);
        assert_eq!(e.query_x.shape(), &[75, 32]);
        assert_eq!(e.support_y.len(), 25);
        assert_eq!(e.query_y.len(), 75);
        for c in 0..5 {
            assert_eq!(e.support_y.labels().unwrap().iter().filter(|&&l| l == c).count(), 5);
            assert_eq!(e.query_y.labels().unwrap().iter().filter(|&&l| l == c).count(), 15);
        }
    }

    #[test]
    fn episodes_are_reproducible() {
        let spec = TaskSpec::classification(3, 2, 32);
        let f = clusters();
        assert_eq!(f.episode(&spec, Split::Val, 9, 4).unwrap(), f.episode(&spec, Split::Val, 9, 4).unwrap());
        assert_ne!(f.episode(&spec, Split::Val, 9, 4).unwrap(), f.episode(&spec, Split::Val, 9, 5).unwrap());
        let s = TaskFamily::Sinusoid(SinusoidFamily::default());
        let r = TaskSpec::regression(5);
        assert_eq!(s.episode(&r, Split::Train, 3, 1).unwrap(), s.episode(&r, Split::Train, 3, 1).unwrap());
    }

    #[test]
    fn splits_are_disjoint() {
        let f = ClusterFamily::default();
        let (a, b, c) = (f.pool(Split::Train), f.pool(Split::Val), f.pool(Split::Test));
        assert_eq!((a.len(), b.len(), c.len()), (60, 16, 20));
        assert!(a.end <= b.start && b.end <= c.start);
        let spec = TaskSpec::classification(5, 1, 32);
        let fam = clusters();
        for i in 0..50 {
            for split in [Split::Train, Split::Val, Split::Test] {
                let e = fam.episode(&spec, split, 0, i).unwrap();
                assert!(e.classes.iter().all(|c| f.pool(split).contains(c)));
            }
        }
    }

    #[test]
    fn small_pool_is_rejected() {
        let f = TaskFamily::Clusters(
            ClusterConfig {
                train_classes: 3,
                val_classes: 3,
                test_classes: 3,
                ..ClusterConfig::default()
            }
            .into(),
        );
        let spec = TaskSpec::classification(5, 1, 32);
        assert!(f.episode(&spec, Split::Train, 0, 0).is_err());
        assert!(f.validate(&spec).is_err());
    }

    #[test]
    fn sinusoid_draws_stay_in_range() {
        let f = TaskFamily::Sinusoid(SinusoidFamily::default());
        let spec = TaskSpec::regression(10);
        for i in 0..20 {
            let e = f.episode(&spec, Split::Train, 0, i).unwrap();
            assert_eq!(e.support_x.shape(), &[10, 1]);
            assert_eq!(e.query_x.shape(), &[15, 1]);
            assert!(e.support_x.data().iter().all(|x| (-5.0..5.0).contains(x)));
            let Targets::Values(y) = &e.query_y else { panic!() };
            assert!(y.data().iter().all(|v| v.abs() < 5.0 + 1.0));
        }
    }

    #[test]
    fn relabel_permutes_labels_and_classes() {
        let spec = TaskSpec::classification(3, 1, 32);
        let e = clusters().episode(&spec, Split::Test, 0, 0).unwrap();
        let r = e.relabel(&[2, 0, 1]).unwrap();
        assert_eq!(r.support_y.labels().unwrap(), &[2, 0, 1]);
        assert_eq!(r.classes, vec![e.classes[1], e.classes[2], e.classes[0]]);
        assert!(e.relabel(&[0, 0, 1]).is_err());
    }

    #[test]
    fn identical_query_scores_highest_for_its_class() {
        let spec = TaskSpec::classification(4, 1, 32);
        let mut e = clusters().episode(&spec, Split::Train, 5, 0).unwrap();
        e.query_x = e.support_x.slice(0, 2, 1).unwrap();
        e.query_y = Targets::Labels(vec![2]);
        let s = PrototypeScorer::new().scores(&e).unwrap();
        assert_eq!(s.argmax_rows(), vec![2]);
        assert!((s.data().iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn kernel_smoother_interpolates_constant_targets() {
        let spec = TaskSpec::regression(5);
        let mut e = TaskFamily::Sinusoid(SinusoidFamily::default()).episode(&spec, Split::Train, 0, 0).unwrap();
        e.support_y = Targets::Values(Tensor::full(&[5, 1], 2.5, Precision::Double));
        let s = KernelSmoother::default().scores(&e).unwrap();
        assert!(s.data().iter().all(|v| (v - 2.5).abs() < 1e-12));
    }

    #[test]
    fn zero_pretrain_steps_return_random_init() {
        let f = ClusterFamily::default();
        let spec = EncoderSpec::toy(32, 16);
        let cfg = PretrainConfig { seed: 4, ..PretrainConfig::default() };
        assert_eq!(pretrain_encoder(&f, &spec, &cfg).unwrap().encoder, init_encoder(&spec, 4));
    }

    #[test]
    fn family_config_round_trips() {
        let f = clusters();
        let json = serde_json::to_string(&f).unwrap();
        assert_eq!(serde_json::from_str::<TaskFamily>(&json).unwrap(), f);
    }
}
