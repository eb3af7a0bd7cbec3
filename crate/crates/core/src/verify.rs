//! Oracle checks of the identities the method rests on: meta-gradients
//! against finite differences, recovery of MAML and MetaSGD, the warp
//! preconditioner, loss recovery at φ = 0, and the invariances of the head
//! and the loss networks. Every check reports the worst deviation it saw.

use std::collections::BTreeMap;
use std::fmt;

use npbml_ad::{grad, Precision, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::eval::{ci_half_width, evaluate};
use crate::inner::{adapt, materialize_preconditioner, run_episode, InnerConfig, Trajectory};
use crate::loss::{meta_loss, query_input, query_loss, support_input, support_loss, BaseLoss, EpisodeData};
use crate::model::{gaussian, Activation, EncoderSpec, MetaModel, TaskShape};
use crate::outer::{meta_gradient, meta_objective, EpisodeContext, Execution};
use crate::params::{names, MetaParams, ParamGroup, Variant};
use crate::tasks::{ClusterConfig, Episode, PrototypeScorer, Split, TaskFamily, TaskKind, TaskSpec, Targets};

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &'static str, passed: bool, detail: String) -> Self {
        Self { name, passed, detail }
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{tag} {}: {}", self.name, self.detail)
    }
}

/// Seed of the frozen tiny instance used by the acceptance checks.
pub const FROZEN_SEED: u64 = 0;

/// Four-dimensional clusters, small enough for exhaustive oracles.
pub fn tiny_family() -> TaskFamily {
    TaskFamily::Clusters(
        ClusterConfig {
            train_classes: 6,
            val_classes: 3,
            test_classes: 3,
            dim: 4,
            ..ClusterConfig::default()
        }
        .into(),
    )
}

/// 2-way 1-shot classifier `4 → 8 → 4` with warp and FiLM on the last layer
/// and every loss network active.
pub fn tiny_instance(seed: u64) -> Result<(MetaModel, MetaParams, TaskSpec, Episode)> {
    let model = MetaModel::new(
        EncoderSpec::mlp(&[4, 8, 4], Activation::Relu),
        TaskShape {
            kind: TaskKind::Classification,
            n_way: 2,
        },
        Variant::full(),
    )?;
    let mut params = model.init_meta_params(None, seed)?;
    // move ω off the identity so transposition errors cannot hide
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let warp = params.get_mut(&names::warp(1))?;
    *warp = warp.add(&gaussian(&mut rng, &[4, 4], 0.2))?;
    let spec = TaskSpec::classification(2, 1, 4);
    let episode = tiny_family().episode(&spec, Split::Train, seed, 0)?;
    Ok((model, params, spec, episode))
}

fn close(analytic: f64, numeric: f64, rtol: f64, atol: f64, floor: f64) -> (bool, f64) {
    if analytic.abs() < floor && numeric.abs() < floor.max(atol) {
        let e = (analytic - numeric).abs();
        return (e <= atol, 0.0);
    }
    let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs());
    (rel <= rtol, rel)
}

/// Meta-gradient of the averaged query loss against central differences on
/// randomly sampled coordinates spread over θ, ω, φ and ψ.
pub fn meta_gradient_oracle(seed: u64, per_group: usize) -> Result<Check> {
    let (model, params, _, episode) = tiny_instance(seed)?;
    let scorer = PrototypeScorer::new();
    let inner = InnerConfig::plain(0.1, 2);
    let exec = Execution::double();
    let ctx = EpisodeContext {
        model: &model,
        scorer: Some(&scorer),
        inner: &inner,
        exec: &exec,
    };
    let episodes = [episode];
    let (_, grads) = meta_gradient(&ctx, &params, &episodes)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc00d);
    let mut coords = Vec::new();
    for group in ParamGroup::ALL {
        let mut pool: Vec<(String, usize)> = grads
            .iter()
            .filter(|(n, _)| ParamGroup::of(n) == Some(group))
            .flat_map(|(n, g)| (0..g.numel()).map(move |i| (n.clone(), i)))
            .collect();
        pool.shuffle(&mut rng);
        coords.extend(pool.into_iter().take(per_group));
    }

    // fourth-order central stencil
    let eps = 1e-5;
    let (mut worst, mut failures) = (0.0f64, Vec::new());
    for (name, i) in &coords {
        let mut probe = params.clone();
        let orig = probe.get(name)?.data()[*i];
        let mut at = |h: f64| -> Result<f64> {
            probe.get_mut(name)?.data_mut()[*i] = orig + h;
            meta_objective(&ctx, &probe, &episodes)
        };
        let numeric = (8.0 * (at(eps)? - at(-eps)?) - (at(2.0 * eps)? - at(-2.0 * eps)?)) / (12.0 * eps);
        let analytic = grads[name].data()[*i];
        let (ok, rel) = close(analytic, numeric, 1e-4, 1e-7, 1e-8);
        worst = worst.max(rel);
        if !ok {
            failures.push(format!("{name}[{i}]: {analytic:e} vs {numeric:e}"));
        }
    }
    let groups: Vec<String> = ParamGroup::ALL
        .iter()
        .map(|g| format!("{g}={}", coords.iter().filter(|(n, _)| ParamGroup::of(n) == Some(*g)).count()))
        .collect();
    Ok(Check::new(
        "meta-gradient oracle",
        failures.is_empty() && coords.len() >= 4 * per_group.min(16),
        format!(
            "{} coordinates ({}), worst relative error {worst:.2e}{}",
            coords.len(),
            groups.join(" "),
            if failures.is_empty() { String::new() } else { format!("; mismatches: {}", failures.join(", ")) }
        ),
    ))
}

/// Row-major `[r, k] × [k, c]`.
fn mm(a: &[f64], b: &[f64], r: usize, k: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for p in 0..k {
            let av = a[i * k + p];
            for j in 0..c {
                out[i * c + j] += av * b[p * c + j];
            }
        }
    }
    out
}

fn tr(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}

fn add_bias(a: &mut [f64], b: &[f64]) {
    for row in a.chunks_mut(b.len()) {
        for (x, y) in row.iter_mut().zip(b) {
            *x += y;
        }
    }
}

fn col_sums(a: &[f64], c: usize) -> Vec<f64> {
    let mut out = vec![0.0; c];
    for row in a.chunks(c) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    out
}

/// Plain MAML on a ReLU MLP whose last encoder layer and head adapt, with
/// the gradients written out by hand. Returns `[W, b, head W, head b]` after
/// each step, including the start.
pub fn reference_maml(
    spec: &EncoderSpec,
    params: &MetaParams,
    x: &Tensor,
    labels: &[usize],
    n_way: usize,
    alpha: f64,
    steps: usize,
) -> Result<Vec<[Vec<f64>; 4]>> {
    let n = x.rows();
    let last = spec.depth() - 1;
    let mut a = x.data().to_vec();
    let mut width = spec.input_dim();
    for l in 0..last {
        let (din, dout) = spec.layer_dims[l];
        debug_assert_eq!(din, width);
        let mut h = mm(&a, params.get(&names::layer_w(l))?.data(), n, din, dout);
        add_bias(&mut h, params.get(&names::layer_b(l))?.data());
        a = h.into_iter().map(|v| v.max(0.0)).collect();
        width = dout;
    }
    let (din, dout) = spec.layer_dims[last];
    let mut w = params.get(&names::layer_w(last))?.data().to_vec();
    let mut b = params.get(&names::layer_b(last))?.data().to_vec();
    let head = params.get(names::HEAD_W)?.data();
    let mut hw: Vec<f64> = head.iter().flat_map(|v| std::iter::repeat_n(*v, n_way)).collect();
    let mut hb = vec![params.get(names::HEAD_B)?.data()[0]; n_way];

    let mut out = vec![[w.clone(), b.clone(), hw.clone(), hb.clone()]];
    for _ in 0..steps {
        let mut pre = mm(&a, &w, n, din, dout);
        add_bias(&mut pre, &b);
        let z: Vec<f64> = pre.iter().map(|v| v.max(0.0)).collect();
        let mut logits = mm(&z, &hw, n, dout, n_way);
        add_bias(&mut logits, &hb);
        let mut dlogits = vec![0.0; n * n_way];
        for i in 0..n {
            let row = &logits[i * n_way..(i + 1) * n_way];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            for c in 0..n_way {
                let y = if labels[i] == c { 1.0 } else { 0.0 };
                dlogits[i * n_way + c] = (e[c] / s - y) / n as f64;
            }
        }
        let dhw = mm(&tr(&z, n, dout), &dlogits, dout, n, n_way);
        let dhb = col_sums(&dlogits, n_way);
        let dz = mm(&dlogits, &tr(&hw, dout, n_way), n, n_way, dout);
        let dpre: Vec<f64> = dz.iter().zip(&pre).map(|(g, p)| if *p > 0.0 { *g } else { 0.0 }).collect();
        let dw = mm(&tr(&a, n, din), &dpre, din, n, dout);
        let db = col_sums(&dpre, dout);
        for (p, g) in [(&mut w, &dw), (&mut b, &db), (&mut hw, &dhw), (&mut hb, &dhb)] {
            for (pi, gi) in p.iter_mut().zip(g.iter()) {
                *pi -= alpha * gi;
            }
        }
        out.push([w.clone(), b.clone(), hw.clone(), hb.clone()]);
    }
    Ok(out)
}

fn run_trajectory(model: &MetaModel, params: &MetaParams, episode: &Episode, inner: &InnerConfig) -> Result<Trajectory> {
    let scorer = PrototypeScorer::new();
    let data = EpisodeData::new(model, episode, Some(&scorer), Precision::Double)?;
    adapt(model, &params.constants(), &data, inner, &Tape::new())
}

fn trajectory_gap(a: &Trajectory, b: &Trajectory) -> f64 {
    a.thetas
        .iter()
        .zip(&b.thetas)
        .flat_map(|(x, y)| x.iter().map(move |(k, v)| y.get(k).map_or(f64::INFINITY, |w| v.max_abs_diff(w))))
        .fold(if a.thetas.len() == b.thetas.len() { 0.0 } else { f64::INFINITY }, f64::max)
}

fn zero_group(params: &mut MetaParams, group: ParamGroup) {
    for (name, t) in params.iter_mut() {
        if ParamGroup::of(name) == Some(group) && !name.starts_with("omega.") {
            *t = Tensor::zeros(t.shape(), t.precision());
        }
    }
}

/// Five plain SGD steps of the MAML configuration, and of the full model at
/// ω = I, ψ = 0, φ = 0, against the hand-written reference loop.
pub fn maml_equivalence(seed: u64) -> Result<Check> {
    let spec = EncoderSpec::mlp(&[4, 8, 6], Activation::Relu);
    let shape = TaskShape {
        kind: TaskKind::Classification,
        n_way: 3,
    };
    let task = TaskSpec::classification(3, 2, 4);
    let family = tiny_family();
    let inner = InnerConfig::plain(0.1, 5);
    let mut worst = 0.0f64;
    for (i, variant) in [Variant::maml(), Variant::full()].into_iter().enumerate() {
        let model = MetaModel::new(spec.clone(), shape, variant)?;
        let mut params = model.init_meta_params(None, seed + i as u64)?;
        zero_group(&mut params, ParamGroup::Phi);
        zero_group(&mut params, ParamGroup::Psi);
        let episode = family.episode(&task, Split::Train, seed, i as u64)?;
        let traj = run_trajectory(&model, &params, &episode, &inner)?;
        let labels = episode.support_y.labels().expect("classification");
        let reference = reference_maml(&spec, &params, &episode.support_x, labels, 3, inner.alpha, inner.steps)?;
        let keys = [names::layer_w(1), names::layer_b(1), names::HEAD_W.into(), names::HEAD_B.into()];
        for (snap, refs) in traj.thetas.iter().zip(&reference) {
            for (k, r) in keys.iter().zip(refs) {
                let got = snap[k].data();
                let gap = got.iter().zip(r).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                worst = worst.max(if got.len() == r.len() { gap } else { f64::INFINITY });
            }
        }
        if traj.thetas.len() != reference.len() {
            worst = f64::INFINITY;
        }
    }
    Ok(Check::new(
        "MAML equivalence",
        worst <= 1e-6,
        format!("max per-parameter deviation over 5 steps {worst:.2e}"),
    ))
}

/// One implicit step through a fixed warp against the explicit
/// `ω ωᵀ`-preconditioned step, for 20 random ω; then the scaled-identity
/// warp `√c I` through the full inner loop.
pub fn preconditioner_identity(seed: u64) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, din, dout, alpha) = (6, 3, 4, 0.1);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let x = Var::constant(gaussian(&mut rng, &[n, din], 1.0));
        let y = Var::constant(gaussian(&mut rng, &[n, dout], 1.0));
        let w0 = gaussian(&mut rng, &[din, dout], 0.5);
        let omega = gaussian(&mut rng, &[dout, dout], 0.7);
        let omega_t = omega.transpose()?;

        // implicit: adapt W through the warped layer x W ωᵀ
        let tape = Tape::new();
        let w = tape.leaf(w0.clone());
        let loss = x.matmul(&w)?.matmul(&Var::constant(omega_t.clone()))?.sub(&y)?.square()?.mean_all()?;
        let gw = grad(&loss, &[&w], false)?.remove(0);
        let implicit = w0.sub(&gw.value().scale(alpha))?.matmul(&omega_t)?;

        // explicit: precondition the gradient of the effective weights
        let v0 = w0.matmul(&omega_t)?;
        let tape = Tape::new();
        let v = tape.leaf(v0.clone());
        let loss = x.matmul(&v)?.sub(&y)?.square()?.mean_all()?;
        let gv = grad(&loss, &[&v], false)?.remove(0);
        let p = materialize_preconditioner(&omega)?;
        let explicit = v0.sub(&gv.value().matmul(&p)?.scale(alpha))?;
        worst = worst.max(implicit.max_abs_diff(&explicit));
    }

    let scale_gap = scaled_warp_gap(seed)?;
    Ok(Check::new(
        "preconditioner identity",
        worst <= 1e-6 && scale_gap <= 1e-6,
        format!("20 random warps: max gap {worst:.2e}; √c·I warp scales the step by c: max gap {scale_gap:.2e}"),
    ))
}

/// A one-layer warped model with `(W, I)` and with `(W / √c, √c I)` computes
/// the same function; the second's effective weight delta must be `c` times
/// the first's.
fn scaled_warp_gap(seed: u64) -> Result<f64> {
    let d = 3;
    let spec = EncoderSpec {
        layer_dims: vec![(d, d)],
        activations: vec![Activation::Identity],
        warped_layers: vec![0],
        adapt_layers: vec![0],
    };
    let model = MetaModel::new(
        spec,
        TaskShape {
            kind: TaskKind::Regression,
            n_way: 1,
        },
        Variant {
            warp: true,
            ..Variant::default()
        },
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x15);
    let episode = Episode {
        support_x: gaussian(&mut rng, &[5, d], 1.0),
        support_y: Targets::Values(gaussian(&mut rng, &[5, 1], 1.0)),
        query_x: gaussian(&mut rng, &[4, d], 1.0),
        query_y: Targets::Values(gaussian(&mut rng, &[4, 1], 1.0)),
        classes: Vec::new(),
        seed: 0,
    };
    let inner = InnerConfig::plain(0.05, 1);
    let base = model.init_meta_params(None, seed)?;
    let w_name = names::layer_w(0);
    let mut worst = 0.0f64;
    for c in [4.0, 0.25, 2.0] {
        let s: f64 = f64::sqrt(c);
        let mut scaled = base.clone();
        *scaled.get_mut(&w_name)? = base.get(&w_name)?.scale(1.0 / s);
        *scaled.get_mut(&names::warp(0))? = Tensor::eye(d, Precision::Double).scale(s);
        let a = run_trajectory(&model, &base, &episode, &inner)?;
        let b = run_trajectory(&model, &scaled, &episode, &inner)?;
        let delta_a = a.thetas[1][&w_name].sub(&a.thetas[0][&w_name])?;
        let delta_b = b.thetas[1][&w_name].sub(&b.thetas[0][&w_name])?.scale(s);
        worst = worst.max(delta_b.max_abs_diff(&delta_a.scale(c)));
    }
    Ok(worst)
}

/// `M(φ = 0)` against the base loss on 100 random episodes, and the
/// hand-wired support network that turns `M` into `c · L_base`.
pub fn loss_recovery(seed: u64) -> Result<Check> {
    let family = tiny_family();
    let task = TaskSpec::classification(3, 2, 4);
    let spec = EncoderSpec::mlp(&[4, 8, 6], Activation::Relu);
    let shape = TaskShape {
        kind: TaskKind::Classification,
        n_way: 3,
    };
    let full = MetaModel::new(spec.clone(), shape, Variant::full())?;
    let scorer = PrototypeScorer::new();
    let mut zero_gap = 0.0f64;
    for i in 0..100u64 {
        let mut params = full.init_meta_params(None, seed.wrapping_add(i))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ i);
        *params.get_mut(names::HEAD_B)? = gaussian(&mut rng, &[1, 1], 1.0);
        *params.get_mut(&names::warp(1))? = gaussian(&mut rng, &[6, 6], 0.5);
        zero_group(&mut params, ParamGroup::Phi);
        let episode = family.episode(&task, Split::Train, seed, i)?;
        let data = EpisodeData::new(&full, &episode, Some(&scorer), Precision::Double)?;
        let bound = params.constants();
        let fast = full.initial_fast(&bound)?;
        let m = meta_loss(&full, &bound, &fast, &data)?;
        zero_gap = zero_gap.max((m.total.item() - m.base.item()).abs());
    }

    let c = 3.0;
    let wired = MetaModel::new(
        spec.clone(),
        shape,
        Variant {
            support_loss: true,
            ..Variant::default()
        },
    )?;
    let mut params = wired.init_meta_params(None, seed)?;
    zero_group(&mut params, ParamGroup::Phi);
    let loss_coord = 2 * shape.n_way;
    let h = wired.loss_hidden;
    params.get_mut(&names::loss_w("support", 0))?.data_mut()[loss_coord * h] = 1.0;
    params.get_mut(&names::loss_w("support", 1))?.data_mut()[0] = 1.0;
    params.get_mut(&names::loss_w("support", 2))?.data_mut()[0] = c - 1.0;
    let plain = wired.with_variant(Variant::maml());
    let mut theta_only = params.clone();
    for n in params.names().filter(|n| !n.starts_with("theta.")).map(str::to_string).collect::<Vec<_>>() {
        theta_only.remove(&n);
    }
    let episode = family.episode(&task, Split::Train, seed, 1000)?;
    let alpha = 0.05;
    let a = run_trajectory(&wired, &params, &episode, &InnerConfig::plain(alpha, 5))?;
    let b = run_trajectory(&plain, &theta_only, &episode, &InnerConfig::plain(c * alpha, 5))?;
    let scaled_gap = trajectory_gap(&a, &b);
    Ok(Check::new(
        "loss recovery",
        zero_gap <= 1e-7 && scaled_gap <= 1e-6,
        format!("|M(φ=0) - L_base| ≤ {zero_gap:.2e} over 100 episodes; hand-wired c={c} vs SGD at cα: {scaled_gap:.2e}"),
    ))
}

/// Per-coordinate learning rates fixed to 1 (so `α ⊙ 1`) against scalar
/// SGD at `α`.
pub fn metasgd_special_case(seed: u64) -> Result<Check> {
    let spec = EncoderSpec::mlp(&[4, 8, 6], Activation::Relu);
    let shape = TaskShape {
        kind: TaskKind::Classification,
        n_way: 3,
    };
    let msgd = MetaModel::new(spec, shape, Variant::metasgd())?;
    let params = msgd.init_meta_params(None, seed)?;
    let plain = msgd.with_variant(Variant::maml());
    let mut theta_only = params.clone();
    for n in params.names().filter(|n| n.starts_with("omega.")).map(str::to_string).collect::<Vec<_>>() {
        theta_only.remove(&n);
    }
    let episode = tiny_family().episode(&TaskSpec::classification(3, 2, 4), Split::Train, seed, 7)?;
    let inner = InnerConfig::plain(0.1, 5);
    let a = run_trajectory(&msgd, &params, &episode, &inner)?;
    let b = run_trajectory(&plain, &theta_only, &episode, &inner)?;
    let gap = trajectory_gap(&a, &b);
    Ok(Check::new(
        "MetaSGD special case",
        gap <= 1e-7,
        format!("uniform diagonal vs scalar SGD over 5 steps: {gap:.2e}"),
    ))
}

/// Relabels every episode by a random permutation and compares the
/// post-adaptation accuracy (exactly) and the permuted logits.
pub fn permutation_invariance(
    ctx: &EpisodeContext<'_>,
    params: &MetaParams,
    family: &TaskFamily,
    spec: &TaskSpec,
    episodes: usize,
    seed: u64,
) -> Result<(bool, f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut identical = true;
    let mut logit_gap = 0.0f64;
    let mut total = 0.0;
    for i in 0..episodes as u64 {
        let e = family.episode(spec, Split::Test, seed, i)?;
        let mut perm: Vec<usize> = (0..spec.n_way).collect();
        perm.shuffle(&mut rng);
        let r = e.relabel(&perm)?;
        let a = run_episode(ctx.model, params, &e, ctx.scorer, ctx.inner, ctx.exec.precision, false)?;
        let b = run_episode(ctx.model, params, &r, ctx.scorer, ctx.inner, ctx.exec.precision, false)?;
        identical &= a.accuracy == b.accuracy;
        total += a.accuracy.unwrap_or(0.0);
        for row in 0..a.predictions.rows() {
            for (c, &p) in perm.iter().enumerate() {
                logit_gap = logit_gap.max((a.predictions.at(row, c) - b.predictions.at(row, p)).abs());
            }
        }
    }
    Ok((identical, logit_gap, total / episodes.max(1) as f64))
}

/// Permutation invariance on 100 meta-test episodes for the MAML head and
/// for warp + FiLM + regularizer, both at a random initialization.
pub fn permutation_check(seed: u64) -> Result<Check> {
    let family = TaskFamily::Clusters(Default::default());
    let spec = TaskSpec::classification(5, 5, 32);
    let scorer = PrototypeScorer::new();
    let inner = InnerConfig::default();
    let exec = Execution::double();
    let mut parts = Vec::new();
    let mut passed = true;
    for (label, variant) in [
        ("MAML", Variant::maml()),
        (
            "warp+FiLM+regularizer",
            Variant {
                warp: true,
                film: true,
                regularizer: true,
                ..Variant::default()
            },
        ),
    ] {
        let model = MetaModel::new(
            EncoderSpec::mlp(&[32, 32, 16], Activation::Relu),
            TaskShape {
                kind: TaskKind::Classification,
                n_way: 5,
            },
            variant,
        )?;
        let params = model.init_meta_params(None, seed)?;
        let ctx = EpisodeContext {
            model: &model,
            scorer: Some(&scorer),
            inner: &inner,
            exec: &exec,
        };
        let (same, gap, acc) = permutation_invariance(&ctx, &params, &family, &spec, 100, seed)?;
        passed &= same;
        parts.push(format!("{label}: accuracy identical={same} (mean {acc:.4}), max permuted-logit gap {gap:.1e}"));
    }
    Ok(Check::new("permutation invariance", passed, parts.join("; ")))
}

/// Support and query losses under instance permutation and duplication.
pub fn batch_invariance(seed: u64) -> Result<Check> {
    let n_way = 3;
    let model = MetaModel::new(
        EncoderSpec::mlp(&[4, 8, 6], Activation::Relu),
        TaskShape {
            kind: TaskKind::Classification,
            n_way,
        },
        Variant::full(),
    )?;
    let params = model.init_meta_params(None, seed)?;
    let bound = params.constants();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 7;
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let logits = Var::constant(gaussian(&mut rng, &[n, n_way], 2.0));
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..n_way)).collect();
        let y = Var::one_hot(&labels, n_way, Precision::Double)?;
        let rel = Tensor::from_vec(&[n, n_way], (0..n * n_way).map(|_| rng.random::<f64>()).collect())?.softmax(1)?;
        let s_in = support_input(&logits, &y, BaseLoss::CrossEntropy)?.value().clone();
        let q_in = query_input(&logits, &rel, BaseLoss::CrossEntropy)?.value().clone();

        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let dup: Vec<usize> = (0..3).flat_map(|_| 0..n).collect();
        for (input, f) in [
            (&s_in, support_loss as fn(&MetaModel, &crate::params::BoundParams, &Var) -> Result<Var>),
            (&q_in, query_loss),
        ] {
            let reference = f(&model, &bound, &Var::constant(input.clone()))?.item();
            for rows in [&order, &dup] {
                let v = f(&model, &bound, &Var::constant(input.gather_rows(rows)?))?.item();
                worst = worst.max((v - reference).abs());
            }
        }
    }
    Ok(Check::new(
        "batch invariances",
        worst <= 1e-6,
        format!("max change under permutation or 3x duplication {worst:.2e}"),
    ))
}

/// Half-widths at n ∈ {100, 400, 1600} must each halve within 20%, and the
/// reported intervals must follow from the raw records.
pub fn ci_scaling(seed: u64) -> Result<Check> {
    let family = TaskFamily::Clusters(Default::default());
    let spec = TaskSpec::classification(5, 1, 32);
    let model = MetaModel::new(
        EncoderSpec::mlp(&[32, 16], Activation::Relu),
        TaskShape {
            kind: TaskKind::Classification,
            n_way: 5,
        },
        Variant::maml(),
    )?;
    let params = model.init_meta_params(None, seed)?;
    let inner = InnerConfig::plain(0.1, 3);
    let exec = Execution::new(std::thread::available_parallelism().map_or(1, |n| n.get()), Precision::Double)?;
    let ctx = EpisodeContext {
        model: &model,
        scorer: None,
        inner: &inner,
        exec: &exec,
    };
    let mut widths = Vec::new();
    let mut replay_gap = 0.0f64;
    for n in [100, 400, 1600] {
        let report = evaluate(&ctx, &params, &family, &spec, Split::Test, n, seed)?;
        let hw = report.pooled.accuracy_ci.unwrap_or(f64::NAN);
        let raw: Vec<f64> = report.records.iter().filter_map(|r| r.accuracy).collect();
        replay_gap = replay_gap.max((ci_half_width(&raw) - hw).abs());
        widths.push(hw);
    }
    let ratios = [widths[0] / widths[1], widths[1] / widths[2]];
    let ok = ratios.iter().all(|r| (r / 2.0 - 1.0).abs() <= 0.2) && replay_gap <= 1e-12;
    Ok(Check::new(
        "CI scaling",
        ok,
        format!(
            "half-widths {:.4} / {:.4} / {:.4}, ratios {:.3} and {:.3} (ideal 2), recomputation gap {replay_gap:.1e}",
            widths[0], widths[1], widths[2], ratios[0], ratios[1]
        ),
    ))
}

/// Every fast oracle check with its seed.
pub fn all_checks(seed: u64) -> Vec<(&'static str, Result<Check>)> {
    vec![
        ("meta-gradient oracle", meta_gradient_oracle(seed, 16)),
        ("MAML equivalence", maml_equivalence(seed)),
        ("preconditioner identity", preconditioner_identity(seed)),
        ("loss recovery", loss_recovery(seed)),
        ("MetaSGD special case", metasgd_special_case(seed)),
        ("permutation invariance", permutation_check(seed)),
        ("batch invariances", batch_invariance(seed)),
        ("CI scaling", ci_scaling(seed)),
    ]
}

/// Parameter counts per group, for reports.
pub fn group_sizes(params: &MetaParams) -> BTreeMap<ParamGroup, usize> {
    ParamGroup::ALL
        .iter()
        .map(|g| (*g, params.group(*g).map(|(_, t)| t.numel()).sum()))
        .collect()
}
