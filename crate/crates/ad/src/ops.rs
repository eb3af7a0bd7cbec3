//! Differentiable primitives on [`Var`].
//!
//! There is no implicit broadcasting: operands of elementwise ops must agree
//! exactly, and callers use [`Var::expand`] / [`Var::reshape`] to line shapes up.

use crate::error::{AdError, Result};
use crate::tape::{Op, Var};
use crate::tensor::Tensor;

impl Var {
    pub fn add(&self, other: &Var) -> Result<Var> {
        Var::apply(Op::Add, &[self, other])
    }

    pub fn sub(&self, other: &Var) -> Result<Var> {
        Var::apply(Op::Sub, &[self, other])
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Var) -> Result<Var> {
        Var::apply(Op::Mul, &[self, other])
    }

    /// Elementwise quotient.
    pub fn div(&self, other: &Var) -> Result<Var> {
        Var::apply(Op::Div, &[self, other])
    }

    pub fn matmul(&self, other: &Var) -> Result<Var> {
        Var::apply(Op::MatMul, &[self, other])
    }

    pub fn relu(&self) -> Result<Var> {
        Var::apply(Op::Relu, &[self])
    }

    pub fn leaky_relu(&self, slope: f64) -> Result<Var> {
        Var::apply(Op::LeakyRelu(slope), &[self])
    }

    pub fn softmax(&self, axis: usize) -> Result<Var> {
        Var::apply(Op::Softmax(axis), &[self])
    }

    /// `x - log Σ exp x` along `axis`, shifted by the (constant) maximum.
    pub fn log_softmax(&self, axis: usize) -> Result<Var> {
        let n = *self.shape().get(axis).ok_or(AdError::BadAxis {
            op: "log_softmax",
            axis,
            shape: self.shape().to_vec(),
        })?;
        let shift = Var::constant(self.value().max_axis(axis)?.expand_axis(axis, n)?);
        let centred = self.sub(&shift)?;
        let lse = centred.exp()?.sum(axis)?.log()?.expand(axis, n)?;
        centred.sub(&lse)
    }

    pub fn log(&self) -> Result<Var> {
        Var::apply(Op::Log, &[self])
    }

    pub fn exp(&self) -> Result<Var> {
        Var::apply(Op::Exp, &[self])
    }

    pub fn square(&self) -> Result<Var> {
        Var::apply(Op::Square, &[self])
    }

    pub fn sqrt(&self) -> Result<Var> {
        Var::apply(Op::Sqrt, &[self])
    }

    pub fn abs(&self) -> Result<Var> {
        Var::apply(Op::Abs, &[self])
    }

    /// Multiplication by a fixed scalar.
    pub fn scale(&self, c: f64) -> Result<Var> {
        Var::apply(Op::Scale(c), &[self])
    }

    pub fn neg(&self) -> Result<Var> {
        self.scale(-1.0)
    }

    /// Sum along `axis`; the axis is kept with extent 1.
    pub fn sum(&self, axis: usize) -> Result<Var> {
        Var::apply(Op::Sum(axis), &[self])
    }

    /// Mean along `axis`; the axis is kept with extent 1.
    pub fn mean(&self, axis: usize) -> Result<Var> {
        Var::apply(Op::Mean(axis), &[self])
    }

    /// Sum of every element, as a `[1]` tensor.
    pub fn sum_all(&self) -> Result<Var> {
        self.reshape(&[self.value().numel()])?.sum(0)
    }

    /// Mean of every element, as a `[1]` tensor.
    pub fn mean_all(&self) -> Result<Var> {
        self.reshape(&[self.value().numel()])?.mean(0)
    }

    /// Repeats an extent-1 axis `n` times.
    pub fn expand(&self, axis: usize, n: usize) -> Result<Var> {
        Var::apply(Op::Expand(axis, n), &[self])
    }

    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Var> {
        Var::apply(Op::Slice { axis, start, len }, &[self])
    }

    pub fn transpose(&self) -> Result<Var> {
        Var::apply(Op::Transpose, &[self])
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var> {
        Var::apply(Op::Reshape(shape.to_vec()), &[self])
    }

    /// Constant one-hot matrix `[labels.len(), n]` in this variable's precision.
    pub fn one_hot(labels: &[usize], n: usize, precision: crate::Precision) -> Result<Var> {
        Ok(Var::constant(Tensor::one_hot(labels, n, precision)?))
    }

    /// Adds a `[1, d]` row to every row of a `[n, d]` matrix.
    pub fn add_row(&self, row: &Var) -> Result<Var> {
        let n = self.shape().first().copied().unwrap_or(1);
        if row.shape().len() != 2 || row.shape()[0] != 1 {
            return Err(AdError::ShapeMismatch {
                op: "add_row",
                lhs: self.shape().to_vec(),
                rhs: row.shape().to_vec(),
            });
        }
        self.add(&row.expand(0, n)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::{grad, Precision, Tape};

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::from_vec(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let x = Var::constant(Tensor::zeros(&[1, 3], Precision::Double));
        let s = x.softmax(1).unwrap();
        for v in s.value().data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn mean_of_relu() {
        let x = Var::constant(t(&[3], &[-1.0, 2.0, 4.0]));
        assert_eq!(x.relu().unwrap().mean(0).unwrap().item(), 2.0);
    }

    #[test]
    fn log_of_negative_is_a_domain_error() {
        let x = Var::constant(t(&[2], &[1.0, -0.5]));
        assert!(matches!(x.log(), Err(AdError::Domain { op: "log", .. })));
        assert!(matches!(x.sqrt(), Err(AdError::Domain { op: "sqrt", .. })));
    }

    #[test]
    fn gradient_of_dot_self() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[2, 1], &[1.0, 2.0]));
        let y = x.transpose().unwrap().matmul(&x).unwrap();
        let g = grad(&y, &[&x], false).unwrap();
        assert_eq!(g[0].value().data(), &[2.0, 4.0]);
    }

    #[test]
    fn second_derivative_of_cube() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[1], &[2.0]));
        let y = x.square().unwrap().mul(&x).unwrap();
        let dy = grad(&y, &[&x], true).unwrap().remove(0);
        assert_eq!(dy.item(), 12.0);
        let d2y = grad(&dy, &[&x], false).unwrap().remove(0);
        assert_eq!(d2y.item(), 12.0);
    }

    #[test]
    fn softmax_cross_entropy_gradient() {
        let tape = Tape::new();
        let logits = tape.leaf(Tensor::zeros(&[1, 2], Precision::Double));
        let target = Var::one_hot(&[0], 2, Precision::Double).unwrap();
        let loss = logits.log_softmax(1).unwrap().mul(&target).unwrap().sum_all().unwrap().neg().unwrap();
        let g = grad(&loss, &[&logits], false).unwrap();
        let d = g[0].value().data();
        assert!((d[0] + 0.5).abs() < 1e-15 && (d[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn non_scalar_output_is_rejected() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]));
        assert!(matches!(grad(&x, &[&x], false), Err(AdError::NonScalarOutput(_))));
    }

    #[test]
    fn input_off_tape_is_rejected() {
        let tape = Tape::new();
        let other = Tape::new();
        let x = tape.leaf(t(&[1], &[1.0]));
        let z = other.leaf(t(&[1], &[1.0]));
        let y = x.square().unwrap();
        assert!(matches!(grad(&y, &[&z], false), Err(AdError::NotOnTape(0))));
        let c = Var::constant(t(&[1], &[1.0]));
        assert!(matches!(grad(&y, &[&x, &c], false), Err(AdError::NotOnTape(1))));
    }

    #[test]
    fn mixing_tapes_is_an_error() {
        let a = Tape::new().leaf(t(&[1], &[1.0]));
        let b = Tape::new().leaf(t(&[1], &[1.0]));
        assert!(matches!(a.add(&b), Err(AdError::TapeMismatch { op: "add" })));
    }

    #[test]
    fn unreachable_input_gets_zero() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]));
        let unused = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]));
        let y = x.square().unwrap().sum_all().unwrap();
        let g = grad(&y, &[&unused, &x], false).unwrap();
        assert_eq!(g[0].value().data(), &[0.0, 0.0, 0.0]);
        assert_eq!(g[1].value().data(), &[2.0, 4.0]);
    }

    #[test]
    fn constants_do_not_record() {
        let tape = Tape::new();
        let before = tape.len();
        let a = Var::constant(t(&[2], &[1.0, 2.0]));
        let _ = a.exp().unwrap().mul(&a).unwrap();
        assert_eq!(tape.len(), before);
    }

    #[test]
    fn first_order_gradients_are_constants() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[1], &[3.0]));
        let y = x.square().unwrap();
        let g = grad(&y, &[&x], false).unwrap();
        assert!(!g[0].is_recorded());
        let g2 = grad(&y, &[&x], true).unwrap();
        assert!(g2[0].is_recorded());
    }

    #[test]
    fn shared_subexpression_accumulates() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[1], &[1.5]));
        let y = x.mul(&x).unwrap().add(&x).unwrap();
        let g = grad(&y, &[&x], false).unwrap();
        assert_eq!(g[0].item(), 4.0);
    }
}
