use npbml_ad::{Precision, Tape, Tensor, Var};
use npbml_core::inner::{adapt, InnerConfig};
use npbml_core::loss::{meta_loss, query_loss, support_input, support_loss, BaseLoss, EpisodeData};
use npbml_core::model::{film, Activation, EncoderSpec, FilmGenerator, MetaModel, TaskShape};
use npbml_core::params::{names, ParamGroup, Variant};
use npbml_core::tasks::{
    ClusterFamily, KernelSmoother, PrototypeScorer, RelationScorer, SinusoidFamily, Split, TaskFamily, TaskKind, TaskSpec,
};
use npbml_core::verify::{self, tiny_family};
use proptest::prelude::*;

fn classifier(variant: Variant, n_way: usize) -> MetaModel {
    MetaModel::new(
        EncoderSpec::mlp(&[4, 8, 6], Activation::Relu),
        TaskShape {
            kind: TaskKind::Classification,
            n_way,
        },
        variant,
    )
    .unwrap()
}

fn permutation(n: usize) -> impl Strategy<Value = Vec<usize>> {
    Just((0..n).collect::<Vec<_>>()).prop_shuffle()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn zero_phi_meta_loss_is_the_base_loss(seed in 0u64..10_000, index in 0u64..1000) {
        let model = classifier(Variant::full(), 3);
        let mut params = model.init_meta_params(None, seed).unwrap();
        for (name, t) in params.iter_mut() {
            if ParamGroup::of(name) == Some(ParamGroup::Phi) {
                *t = Tensor::zeros(t.shape(), Precision::Double);
            }
        }
        let e = tiny_family().episode(&TaskSpec::classification(3, 2, 4), Split::Train, seed, index).unwrap();
        let scorer = PrototypeScorer::new();
        let data = EpisodeData::new(&model, &e, Some(&scorer), Precision::Double).unwrap();
        let b = params.constants();
        let m = meta_loss(&model, &b, &model.initial_fast(&b).unwrap(), &data).unwrap();
        prop_assert!((m.total.item() - m.base.item()).abs() <= 1e-7);
    }

    #[test]
    fn loss_networks_ignore_instance_order_and_multiplicity(
        seed in 0u64..10_000,
        order in permutation(6),
        copies in 1usize..5,
    ) {
        let model = classifier(Variant::full(), 3);
        let b = model.init_meta_params(None, seed).unwrap().constants();
        let logits = Tensor::from_vec(&[6, 3], (0..18).map(|i| ((i as f64 + seed as f64) * 0.37).sin() * 3.0).collect()).unwrap();
        let labels = [0, 1, 2, 2, 1, 0];
        let y = Var::one_hot(&labels, 3, Precision::Double).unwrap();
        let input = support_input(&Var::constant(logits), &y, BaseLoss::CrossEntropy).unwrap().value().clone();
        let reference = support_loss(&model, &b, &Var::constant(input.clone())).unwrap().item();
        let shuffled = support_loss(&model, &b, &Var::constant(input.gather_rows(&order).unwrap())).unwrap().item();
        let rows: Vec<usize> = (0..copies).flat_map(|_| 0..6).collect();
        let repeated = support_loss(&model, &b, &Var::constant(input.gather_rows(&rows).unwrap())).unwrap().item();
        prop_assert!((shuffled - reference).abs() <= 1e-6);
        prop_assert!((repeated - reference).abs() <= 1e-6);

        let q_in = Tensor::from_vec(&[6, 7], (0..42).map(|i| ((i * 7 + seed as usize) % 11) as f64 / 11.0).collect()).unwrap();
        let q_ref = query_loss(&model, &b, &Var::constant(q_in.clone())).unwrap().item();
        let q_shuf = query_loss(&model, &b, &Var::constant(q_in.gather_rows(&order).unwrap())).unwrap().item();
        prop_assert!((q_shuf - q_ref).abs() <= 1e-6);
    }

    #[test]
    fn relabeling_permutes_adapted_logits(seed in 0u64..10_000, perm in permutation(3)) {
        let variant = Variant { warp: true, film: true, regularizer: true, ..Variant::default() };
        let model = classifier(variant, 3);
        let params = model.init_meta_params(None, seed).unwrap();
        let e = tiny_family().episode(&TaskSpec::classification(3, 2, 4), Split::Test, seed, 0).unwrap();
        let r = e.relabel(&perm).unwrap();
        let cfg = InnerConfig::plain(0.1, 3);
        let run = |ep| {
            let data = EpisodeData::new(&model, ep, None, Precision::Double).unwrap();
            let b = params.constants();
            let t = adapt(&model, &b, &data, &cfg, &Tape::new()).unwrap();
            model.forward(&b, &t.fast, &data.query.x).unwrap().value().clone()
        };
        let (a, b) = (run(&e), run(&r));
        for row in 0..a.rows() {
            for (c, &p) in perm.iter().enumerate() {
                prop_assert!((a.at(row, c) - b.at(row, p)).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn implicit_and_explicit_preconditioning_agree(seed in 0u64..10_000) {
        let check = verify::preconditioner_identity(seed).unwrap();
        prop_assert!(check.passed, "{}", check);
    }

    #[test]
    fn film_keeps_the_activation_shape(rows in 1usize..6, cols in 1usize..6, seed in 0u64..1000) {
        let x = Var::constant(Tensor::from_vec(&[rows, cols], (0..rows * cols).map(|i| (i as f64 + seed as f64).cos()).collect()).unwrap());
        let w = Var::constant(Tensor::full(&[cols, 2 * cols], 0.01 * (seed % 7) as f64, Precision::Double));
        let b = Var::constant(Tensor::zeros(&[1, 2 * cols], Precision::Double));
        let y = film(&x, &FilmGenerator { weight: w, bias: b }).unwrap();
        prop_assert_eq!(y.shape(), x.shape());
    }

    #[test]
    fn episodes_are_reproducible_and_split_pools_disjoint(root in any::<u64>(), index in 0u64..100_000) {
        let family = ClusterFamily::default();
        let spec = TaskSpec::classification(5, 1, 32);
        let f = TaskFamily::Clusters(family.clone());
        for split in [Split::Train, Split::Val, Split::Test] {
            let a = f.episode(&spec, split, root, index).unwrap();
            let b = f.episode(&spec, split, root, index).unwrap();
            prop_assert_eq!(&a.support_x, &b.support_x);
            prop_assert_eq!(&a.classes, &b.classes);
            prop_assert!(a.classes.iter().all(|c| family.pool(split).contains(c)));
        }
    }

    #[test]
    fn relation_scores_are_distributions(root in any::<u64>(), index in 0u64..1000) {
        let e = TaskFamily::Clusters(ClusterFamily::default())
            .episode(&TaskSpec::classification(5, 1, 32), Split::Test, root, index)
            .unwrap();
        let s = PrototypeScorer::new().scores(&e).unwrap();
        prop_assert_eq!(s.shape(), &[e.query_x.rows(), 5][..]);
        for r in 0..s.rows() {
            let row = s.row(r);
            prop_assert!(row.iter().all(|v| *v >= 0.0 && v.is_finite()));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }
        let reg = TaskFamily::Sinusoid(SinusoidFamily::default()).episode(&TaskSpec::regression(5), Split::Test, root, index).unwrap();
        let est = KernelSmoother::default().scores(&reg).unwrap();
        prop_assert!(est.data().iter().all(|v| v.is_finite()));
    }
}

#[test]
fn plain_sgd_is_monotone_on_a_convex_problem() {
    let spec = EncoderSpec {
        layer_dims: vec![(1, 1)],
        activations: vec![Activation::Identity],
        warped_layers: vec![],
        adapt_layers: vec![0],
    };
    let model = MetaModel::new(
        spec,
        TaskShape {
            kind: TaskKind::Regression,
            n_way: 1,
        },
        Variant::maml(),
    )
    .unwrap();
    let params = model.init_meta_params(None, 4).unwrap();
    let family = TaskFamily::Sinusoid(SinusoidFamily::default());
    for i in 0..20 {
        let e = family.episode(&TaskSpec::regression(10), Split::Train, 4, i).unwrap();
        let data = EpisodeData::new(&model, &e, None, Precision::Double).unwrap();
        let t = adapt(&model, &params.constants(), &data, &InnerConfig::plain(1e-3, 10), &Tape::new()).unwrap();
        for w in t.base_losses.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "{:?}", t.base_losses);
        }
    }
}

#[test]
fn every_parameter_name_belongs_to_a_group() {
    let model = classifier(Variant { metasgd: true, ..Variant::full() }, 3);
    let params = model.init_meta_params(None, 0).unwrap();
    assert!(params.names().all(|n| ParamGroup::of(n).is_some()));
    assert!(params.contains(&names::warp(1)));
}
