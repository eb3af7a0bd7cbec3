use npbml_ad::{concat, finite_diff, grad, relative_error, Precision, Result, Tape, Tensor, Var};
use proptest::prelude::*;

type Unary = fn(&Var) -> Result<Var>;

/// Primitives with the input range on which they are smooth.
fn unary_cases() -> Vec<(&'static str, Unary, f64, f64)> {
    vec![
        ("relu", |x| x.relu(), 0.1, 2.0),
        ("leaky_relu", |x| x.leaky_relu(0.1), 0.1, 2.0),
        ("softmax0", |x| x.softmax(0), -2.0, 2.0),
        ("softmax1", |x| x.softmax(1), -2.0, 2.0),
        ("log_softmax", |x| x.log_softmax(1), -2.0, 2.0),
        ("log", |x| x.log(), 0.5, 2.0),
        ("exp", |x| x.exp(), -1.0, 1.0),
        ("square", |x| x.square(), -2.0, 2.0),
        ("sqrt", |x| x.sqrt(), 0.5, 2.0),
        ("abs", |x| x.abs(), 0.1, 2.0),
        ("scale", |x| x.scale(-1.7), -2.0, 2.0),
        ("mean0", |x| x.mean(0), -2.0, 2.0),
        ("mean1", |x| x.mean(1), -2.0, 2.0),
        ("sum0", |x| x.sum(0), -2.0, 2.0),
        ("sum1", |x| x.sum(1), -2.0, 2.0),
        ("transpose", |x| x.transpose(), -2.0, 2.0),
        ("slice", |x| x.slice(1, 1, 1), -2.0, 2.0),
        ("concat", |x| concat(&[x.clone(), x.square()?], 1), -2.0, 2.0),
        ("reshape", |x| x.reshape(&[x.value().numel()]), -2.0, 2.0),
        ("expand", |x| x.sum(0)?.expand(0, 3), -2.0, 2.0),
        ("self_matmul", |x| x.matmul(&x.transpose()?), -2.0, 2.0),
        ("self_div", |x| x.div(&x.square()?.scale(0.5)?.exp()?), -1.0, 1.0),
        ("self_sub", |x| x.exp()?.sub(&x.square()?), -1.0, 1.0),
    ]
}

/// Scalar probe `Σ w ⊙ op(x)` with fixed random weights.
fn probe(op: Unary, x: &Var, weights: &[f64]) -> Result<Var> {
    let y = op(x)?;
    let w = Tensor::new(y.shape().to_vec(), weights[..y.value().numel()].to_vec(), Precision::Double)?;
    y.mul(&Var::constant(w))?.sum_all()
}

fn assert_close(name: &str, analytic: &Tensor, numeric: &Tensor, rtol: f64, atol: f64) {
    for (a, n) in analytic.data().iter().zip(numeric.data()) {
        let ok = (a - n).abs() <= atol || relative_error(*a, *n) <= rtol;
        assert!(ok, "{name}: analytic {a} vs numeric {n}");
    }
}

/// Entries with `lo <= |x| < hi`; negative only for kinked functions that
/// are defined there.
fn matrix(name: &'static str, rows: usize, cols: usize, lo: f64, hi: f64) -> impl Strategy<Value = Tensor> {
    let signed = matches!(name, "relu" | "leaky_relu" | "abs");
    prop::collection::vec((lo..hi, any::<bool>()), rows * cols).prop_map(move |v| {
        let v = v.into_iter().map(|(m, neg)| if signed && neg { -m } else { m }).collect();
        Tensor::from_vec(&[rows, cols], v).unwrap()
    })
}

fn inputs() -> impl Strategy<Value = (usize, Tensor, Vec<f64>, Vec<f64>)> {
    let cases = unary_cases().len();
    (0..cases, 1usize..4, 2usize..4).prop_flat_map(|(case, r, c)| {
        let (name, _, lo, hi) = unary_cases()[case];
        let x = if lo < 0.0 {
            prop::collection::vec(lo..hi, r * c)
                .prop_map(move |v| Tensor::from_vec(&[r, c], v).unwrap())
                .boxed()
        } else {
            matrix(name, r, c, lo, hi).boxed()
        };
        (
            Just(case),
            x,
            prop::collection::vec(-1.0..1.0f64, 32),
            prop::collection::vec(-1.0..1.0f64, 32),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn first_order_matches_finite_differences((case, x0, w, _v) in inputs()) {
        let (name, op, _, _) = unary_cases()[case];
        let tape = Tape::new();
        let x = tape.leaf(x0.clone());
        let y = probe(op, &x, &w).unwrap();
        let g = grad(&y, &[&x], false).unwrap().remove(0);
        let fd = finite_diff(|t| probe(op, &Var::constant(t.clone()), &w).map(|v| v.item()), &x0, 1e-5).unwrap();
        assert_close(name, g.value(), &fd, 1e-4, 1e-8);
    }

    #[test]
    fn second_order_matches_finite_differences((case, x0, w, v) in inputs()) {
        let (name, op, _, _) = unary_cases()[case];
        let v = Tensor::new(x0.shape().to_vec(), v[..x0.numel()].to_vec(), Precision::Double).unwrap();
        // d/dx <∇f(x), v>
        let directional = |t: &Tensor, create: bool| -> Result<(Var, Var)> {
            let tape = Tape::new();
            let x = tape.leaf(t.clone());
            let y = probe(op, &x, &w)?;
            let g = grad(&y, &[&x], create)?.remove(0);
            Ok((x, g.mul(&Var::constant(v.clone()))?.sum_all()?))
        };
        let (x, s) = directional(&x0, true).unwrap();
        let hv = grad(&s, &[&x], false).unwrap().remove(0);
        let fd = finite_diff(|t| directional(t, false).map(|(_, s)| s.item()), &x0, 1e-5).unwrap();
        assert_close(name, hv.value(), &fd, 1e-4, 1e-7);
    }

    #[test]
    fn matmul_and_binary_ops_match_finite_differences(
        a in prop::collection::vec(-2.0..2.0f64, 6),
        b in prop::collection::vec(0.5..2.0f64, 6),
    ) {
        let a0 = Tensor::from_vec(&[2, 3], a).unwrap();
        let b0 = Tensor::from_vec(&[2, 3], b).unwrap();
        let f = |a: &Var, b: &Var| -> Result<Var> {
            let p = a.matmul(&b.transpose()?)?;
            let q = a.mul(b)?.add(&a.div(b)?)?.sub(&b.square()?)?;
            p.square()?.sum_all()?.add(&q.sum_all()?)
        };
        let tape = Tape::new();
        let (a, b) = (tape.leaf(a0.clone()), tape.leaf(b0.clone()));
        let y = f(&a, &b).unwrap();
        let g = grad(&y, &[&a, &b], false).unwrap();
        let fa = finite_diff(|t| f(&Var::constant(t.clone()), &Var::constant(b0.clone())).map(|v| v.item()), &a0, 1e-5).unwrap();
        let fb = finite_diff(|t| f(&Var::constant(a0.clone()), &Var::constant(t.clone())).map(|v| v.item()), &b0, 1e-5).unwrap();
        assert_close("a", g[0].value(), &fa, 1e-4, 1e-8);
        assert_close("b", g[1].value(), &fb, 1e-4, 1e-8);
    }

    #[test]
    fn softmax_is_a_distribution(x in prop::collection::vec(-30.0..30.0f64, 12)) {
        let t = Var::constant(Tensor::from_vec(&[3, 4], x).unwrap());
        for axis in 0..2 {
            let s = t.softmax(axis).unwrap();
            prop_assert!(s.value().data().iter().all(|v| *v >= 0.0));
            let sums = s.sum(axis).unwrap();
            for total in sums.value().data() {
                prop_assert!((total - 1.0).abs() < 1e-6);
            }
        }
    }
}

/// ‖x‖⁴ has Hessian 8 x xᵀ + 4 ‖x‖² I.
#[test]
fn hessian_vector_product_of_quartic_norm() {
    let x0 = Tensor::from_vec(&[4], vec![0.3, -1.2, 0.7, 2.0]).unwrap();
    let v0 = Tensor::from_vec(&[4], vec![1.0, 0.5, -0.25, 0.1]).unwrap();
    let tape = Tape::new();
    let x = tape.leaf(x0.clone());
    let f = x.square().unwrap().sum_all().unwrap().square().unwrap();
    let g = grad(&f, &[&x], true).unwrap().remove(0);
    let gv = g.mul(&Var::constant(v0.clone())).unwrap().sum_all().unwrap();
    let hv = grad(&gv, &[&x], false).unwrap().remove(0);

    let xs = x0.data();
    let vs = v0.data();
    let sq: f64 = xs.iter().map(|a| a * a).sum();
    let xv: f64 = xs.iter().zip(vs).map(|(a, b)| a * b).sum();
    for i in 0..4 {
        let expected = 8.0 * xs[i] * xv + 4.0 * sq * vs[i];
        assert!((hv.value().data()[i] - expected).abs() < 1e-6, "coordinate {i}");
    }
}

#[test]
fn third_derivative_through_two_backward_passes() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::scalar(0.7, Precision::Double));
    let y = x.exp().unwrap().mul(&x.square().unwrap()).unwrap();
    let d1 = grad(&y, &[&x], true).unwrap().remove(0);
    let d2 = grad(&d1, &[&x], true).unwrap().remove(0);
    let d3 = grad(&d2, &[&x], false).unwrap().remove(0);
    // d³/dx³ (x² eˣ) = (x² + 6x + 6) eˣ
    let expected = (0.49 + 4.2 + 6.0) * 0.7f64.exp();
    assert!((d3.item() - expected).abs() < 1e-12);
}

#[test]
fn replay_reproduces_forward_values_bit_exactly() {
    let build = || {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(&[2, 3], vec![0.1, -0.4, 1.3, 2.2, -0.7, 0.05]).unwrap());
        let w = tape.leaf(Tensor::from_vec(&[3, 2], vec![0.3, 0.2, -0.1, 0.9, 0.4, -0.6]).unwrap());
        let y = x.matmul(&w).unwrap().relu().unwrap().log_softmax(1).unwrap().mean_all().unwrap();
        let g = grad(&y, &[&w], true).unwrap().remove(0);
        let z = g.square().unwrap().sum_all().unwrap();
        (tape, y.item(), z.item())
    };
    let (tape, y1, z1) = build();
    let (_, y2, z2) = build();
    assert_eq!(y1.to_bits(), y2.to_bits());
    assert_eq!(z1.to_bits(), z2.to_bits());
    assert!(tape.replay_matches().unwrap());
    assert!(tape.is_topologically_ordered());
}

#[test]
fn single_precision_results_are_representable() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::new(vec![1, 3], vec![0.1, 0.2, 0.3], Precision::Single).unwrap());
    let y = x.exp().unwrap().softmax(1).unwrap().sum_all().unwrap();
    let g = grad(&y, &[&x], false).unwrap().remove(0);
    for v in g.value().data().iter().chain(y.value().data()) {
        assert_eq!(*v, *v as f32 as f64);
    }
}
