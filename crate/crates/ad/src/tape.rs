//! Reverse-mode tape whose backward pass records onto the same tape.
//!
//! Every vector-Jacobian product is written in terms of [`Var`] operations.
//! With `create_graph` the parents are re-attached to their nodes so the
//! returned gradients are themselves differentiable; without it the same code
//! runs on detached constants and records nothing.

use std::cell::RefCell;
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{AdError, Result};
use crate::tensor::{Precision, Tensor};

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    MatMul,
    Relu,
    LeakyRelu(f64),
    Softmax(usize),
    Log,
    Exp,
    Square,
    Sqrt,
    Abs,
    Scale(f64),
    Sum(usize),
    Mean(usize),
    Expand(usize, usize),
    Concat(usize),
    Slice { axis: usize, start: usize, len: usize },
    Transpose,
    Reshape(Vec<usize>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::MatMul => "matmul",
            Op::Relu => "relu",
            Op::LeakyRelu(_) => "leaky_relu",
            Op::Softmax(_) => "softmax",
            Op::Log => "log",
            Op::Exp => "exp",
            Op::Square => "square",
            Op::Sqrt => "sqrt",
            Op::Abs => "abs",
            Op::Scale(_) => "scale",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Expand(..) => "expand",
            Op::Concat(_) => "concat",
            Op::Slice { .. } => "slice",
            Op::Transpose => "transpose",
            Op::Reshape(_) => "reshape",
        }
    }
}

#[derive(Clone)]
struct Parent {
    id: Option<usize>,
    value: Rc<Tensor>,
}

struct Node {
    op: Op,
    parents: Vec<Parent>,
    value: Rc<Tensor>,
}

struct TapeInner {
    generation: u64,
    nodes: RefCell<Vec<Node>>,
}

/// Append-only record of the operations performed on its variables.
#[derive(Clone)]
pub struct Tape {
    inner: Rc<TapeInner>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tape(gen={}, nodes={})", self.inner.generation, self.len())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            inner: Rc::new(TapeInner {
                generation: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
                nodes: RefCell::new(Vec::new()),
            }),
        }
    }

    pub fn generation(&self) -> u64 {
        self.inner.generation
    }

    pub fn len(&self) -> usize {
        self.inner.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Registers a differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var {
        let value = Rc::new(value);
        let id = self.push(Op::Leaf, Vec::new(), value.clone());
        Var {
            value,
            node: Some(NodeRef {
                tape: self.clone(),
                id,
            }),
        }
    }

    fn push(&self, op: Op, parents: Vec<Parent>, value: Rc<Tensor>) -> usize {
        let mut nodes = self.inner.nodes.borrow_mut();
        nodes.push(Node { op, parents, value });
        nodes.len() - 1
    }

    fn same(&self, other: &Tape) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    /// Re-evaluates every recorded node from its saved parent values and
    /// reports whether all outputs are reproduced bit for bit.
    pub fn replay_matches(&self) -> Result<bool> {
        let nodes = self.inner.nodes.borrow();
        for node in nodes.iter() {
            if node.op == Op::Leaf {
                continue;
            }
            let parents: Vec<&Tensor> = node.parents.iter().map(|p| p.value.as_ref()).collect();
            let again = eval(&node.op, &parents)?;
            if again.shape() != node.value.shape()
                || again
                    .data()
                    .iter()
                    .zip(node.value.data())
                    .any(|(a, b)| a.to_bits() != b.to_bits())
            {
                return Ok(false);
            }
        }
        Ok(true)
    }

    /// Checks that every node's parents precede it.
    pub fn is_topologically_ordered(&self) -> bool {
        let nodes = self.inner.nodes.borrow();
        nodes
            .iter()
            .enumerate()
            .all(|(i, n)| n.parents.iter().all(|p| p.id.is_none_or(|pid| pid < i)))
    }
}

#[derive(Clone)]
struct NodeRef {
    tape: Tape,
    id: usize,
}

/// A tensor value, optionally tied to a node on a [`Tape`].
#[derive(Clone)]
pub struct Var {
    value: Rc<Tensor>,
    node: Option<NodeRef>,
}

impl fmt::Debug for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.node {
            Some(n) => write!(f, "Var(#{} on {:?}, {:?})", n.id, n.tape, self.value),
            None => write!(f, "Var(const, {:?})", self.value),
        }
    }
}

impl From<Tensor> for Var {
    fn from(t: Tensor) -> Self {
        Var::constant(t)
    }
}

impl Var {
    pub fn constant(value: Tensor) -> Self {
        Self {
            value: Rc::new(value),
            node: None,
        }
    }

    pub fn scalar(value: f64, precision: Precision) -> Self {
        Self::constant(Tensor::scalar(value, precision))
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn precision(&self) -> Precision {
        self.value.precision()
    }

    /// Value of a one-element variable; `NaN` otherwise.
    pub fn item(&self) -> f64 {
        self.value.item().unwrap_or(f64::NAN)
    }

    pub fn is_recorded(&self) -> bool {
        self.node.is_some()
    }

    pub fn tape(&self) -> Option<&Tape> {
        self.node.as_ref().map(|n| &n.tape)
    }

    pub fn node_id(&self) -> Option<usize> {
        self.node.as_ref().map(|n| n.id)
    }

    /// Same value, cut from the tape.
    pub fn detach(&self) -> Var {
        Var {
            value: self.value.clone(),
            node: None,
        }
    }

    pub(crate) fn apply(op: Op, parents: &[&Var]) -> Result<Var> {
        let values: Vec<&Tensor> = parents.iter().map(|p| p.value.as_ref()).collect();
        let value = Rc::new(eval(&op, &values)?);
        let mut tape: Option<&Tape> = None;
        for p in parents {
            if let Some(n) = &p.node {
                match tape {
                    None => tape = Some(&n.tape),
                    Some(t) if !t.same(&n.tape) => return Err(AdError::TapeMismatch { op: op.name() }),
                    Some(_) => {}
                }
            }
        }
        let Some(tape) = tape else {
            return Ok(Var { value, node: None });
        };
        let recorded = parents
            .iter()
            .map(|p| Parent {
                id: p.node.as_ref().map(|n| n.id),
                value: p.value.clone(),
            })
            .collect();
        let id = tape.push(op, recorded, value.clone());
        Ok(Var {
            value,
            node: Some(NodeRef {
                tape: tape.clone(),
                id,
            }),
        })
    }
}

fn unary_domain(op: &'static str, t: &Tensor, ok: impl Fn(f64) -> bool) -> Result<()> {
    if let Some(bad) = t.data().iter().find(|v| !ok(**v)) {
        return Err(AdError::Domain {
            op,
            detail: format!("element {bad}"),
        });
    }
    Ok(())
}

/// Forward kernel shared by recording and replay.
fn eval(op: &Op, p: &[&Tensor]) -> Result<Tensor> {
    let prec = p.first().map(|t| t.precision()).unwrap_or_default();
    Ok(match op {
        Op::Leaf => {
            return Err(AdError::InvalidArgument {
                op: "leaf",
                detail: "leaves have no forward rule".into(),
            })
        }
        Op::Add => p[0].add(p[1])?,
        Op::Sub => p[0].sub(p[1])?,
        Op::Mul => p[0].mul(p[1])?,
        Op::Div => p[0].zip_with("div", p[1], |a, b| a / b)?,
        Op::MatMul => p[0].matmul(p[1])?,
        Op::Relu => p[0].map(|v| if v > 0.0 { v } else { 0.0 }),
        Op::LeakyRelu(s) => p[0].map(|v| if v > 0.0 { v } else { s * v }),
        Op::Softmax(axis) => p[0].softmax(*axis)?,
        Op::Log => {
            unary_domain("log", p[0], |v| v >= 0.0 || v.is_nan())?;
            p[0].map(f64::ln)
        }
        Op::Exp => p[0].map(f64::exp),
        Op::Square => p[0].map(|v| v * v),
        Op::Sqrt => {
            unary_domain("sqrt", p[0], |v| v >= 0.0 || v.is_nan())?;
            p[0].map(f64::sqrt)
        }
        Op::Abs => p[0].map(f64::abs),
        Op::Scale(c) => p[0].scale(*c),
        Op::Sum(axis) => p[0].sum_axis(*axis)?,
        Op::Mean(axis) => {
            let n = *p[0].shape().get(*axis).ok_or(AdError::BadAxis {
                op: "mean",
                axis: *axis,
                shape: p[0].shape().to_vec(),
            })?;
            let s = p[0].sum_axis(*axis)?;
            let inv = 1.0 / n as f64;
            let data = s.data().iter().map(|v| v * inv).collect();
            Tensor::new(s.shape().to_vec(), data, prec)?
        }
        Op::Expand(axis, n) => p[0].expand_axis(*axis, *n)?,
        Op::Concat(axis) => Tensor::concat(p, *axis)?,
        Op::Slice { axis, start, len } => p[0].slice(*axis, *start, *len)?,
        Op::Transpose => p[0].transpose()?,
        Op::Reshape(shape) => p[0].reshape(shape)?,
    })
}

/// Vector-Jacobian products for one node, expressed as tape operations.
fn vjp(op: &Op, parents: &[Var], out: &Var, g: &Var, needed: &[bool]) -> Result<Vec<Option<Var>>> {
    let want = |i: usize| needed.get(i).copied().unwrap_or(false);
    let mask = |t: &Tensor, f: &dyn Fn(f64) -> f64| Var::constant(t.map(f));
    let grads = match op {
        Op::Leaf => vec![],
        Op::Add => vec![Some(g.clone()), Some(g.clone())],
        Op::Sub => vec![Some(g.clone()), if want(1) { Some(g.neg()?) } else { None }],
        Op::Mul => vec![
            if want(0) { Some(g.mul(&parents[1])?) } else { None },
            if want(1) { Some(g.mul(&parents[0])?) } else { None },
        ],
        Op::Div => vec![
            if want(0) { Some(g.div(&parents[1])?) } else { None },
            if want(1) {
                Some(g.mul(out)?.div(&parents[1])?.neg()?)
            } else {
                None
            },
        ],
        Op::MatMul => vec![
            if want(0) {
                Some(g.matmul(&parents[1].transpose()?)?)
            } else {
                None
            },
            if want(1) {
                Some(parents[0].transpose()?.matmul(g)?)
            } else {
                None
            },
        ],
        Op::Relu => vec![Some(g.mul(&mask(parents[0].value(), &|v| if v > 0.0 { 1.0 } else { 0.0 }))?)],
        Op::LeakyRelu(s) => {
            let s = *s;
            vec![Some(g.mul(&mask(parents[0].value(), &|v| if v > 0.0 { 1.0 } else { s }))?)]
        }
        Op::Softmax(axis) => {
            let n = out.shape()[*axis];
            let inner = g.mul(out)?.sum(*axis)?.expand(*axis, n)?;
            vec![Some(out.mul(&g.sub(&inner)?)?)]
        }
        Op::Log => vec![Some(g.div(&parents[0])?)],
        Op::Exp => vec![Some(g.mul(out)?)],
        Op::Square => vec![Some(g.mul(&parents[0].scale(2.0)?)?)],
        Op::Sqrt => vec![Some(g.div(&out.scale(2.0)?)?)],
        Op::Abs => vec![Some(g.mul(&mask(parents[0].value(), &|v| {
            if v > 0.0 {
                1.0
            } else if v < 0.0 {
                -1.0
            } else {
                0.0
            }
        }))?)],
        Op::Scale(c) => vec![Some(g.scale(*c)?)],
        Op::Sum(axis) => vec![Some(g.expand(*axis, parents[0].shape()[*axis])?)],
        Op::Mean(axis) => {
            let n = parents[0].shape()[*axis];
            vec![Some(g.expand(*axis, n)?.scale(1.0 / n as f64)?)]
        }
        Op::Expand(axis, _) => vec![Some(g.sum(*axis)?)],
        Op::Concat(axis) => {
            let mut offset = 0;
            let mut grads = Vec::with_capacity(parents.len());
            for (i, p) in parents.iter().enumerate() {
                let len = p.shape()[*axis];
                grads.push(if want(i) { Some(g.slice(*axis, offset, len)?) } else { None });
                offset += len;
            }
            grads
        }
        Op::Slice { axis, start, len } => {
            let shape = parents[0].shape();
            let full = shape[*axis];
            let pad = |extent: usize| {
                let mut s = shape.to_vec();
                s[*axis] = extent;
                Var::constant(Tensor::zeros(&s, g.precision()))
            };
            let mut pieces = Vec::with_capacity(3);
            if *start > 0 {
                pieces.push(pad(*start));
            }
            pieces.push(g.clone());
            if start + len < full {
                pieces.push(pad(full - start - len));
            }
            vec![Some(concat(&pieces, *axis)?)]
        }
        Op::Transpose => vec![Some(g.transpose()?)],
        Op::Reshape(_) => vec![Some(g.reshape(parents[0].shape())?)],
    };
    Ok(grads)
}

/// Gradients of a scalar `output` with respect to each of `inputs`.
///
/// Inputs the output does not depend on receive a zero gradient. With
/// `create_graph` the returned gradients are recorded on the tape and can be
/// differentiated again.
pub fn grad(output: &Var, inputs: &[&Var], create_graph: bool) -> Result<Vec<Var>> {
    if !output.value.is_scalar() {
        return Err(AdError::NonScalarOutput(output.shape().to_vec()));
    }
    let zeros = |v: &Var| Var::constant(Tensor::zeros(v.shape(), v.precision()));
    let Some(out_ref) = &output.node else {
        return inputs
            .iter()
            .enumerate()
            .map(|(i, v)| if v.is_recorded() { Ok(zeros(v)) } else { Err(AdError::NotOnTape(i)) })
            .collect();
    };
    let tape = &out_ref.tape;
    let mut input_ids = Vec::with_capacity(inputs.len());
    for (i, v) in inputs.iter().enumerate() {
        match &v.node {
            Some(n) if n.tape.same(tape) => input_ids.push(n.id),
            _ => return Err(AdError::NotOnTape(i)),
        }
    }

    let out_id = out_ref.id;
    let Some(lo) = input_ids.iter().copied().filter(|&i| i <= out_id).min() else {
        return Ok(inputs.iter().map(|v| zeros(v)).collect());
    };

    // Nodes on a path from some input to the output.
    let mut reaches = vec![false; out_id + 1 - lo];
    for &id in &input_ids {
        if id <= out_id {
            reaches[id - lo] = true;
        }
    }
    {
        let nodes = tape.inner.nodes.borrow();
        for id in lo..=out_id {
            if reaches[id - lo] {
                continue;
            }
            reaches[id - lo] = nodes[id]
                .parents
                .iter()
                .any(|p| p.id.is_some_and(|pid| pid >= lo && reaches[pid - lo]));
        }
    }
    if !reaches[out_id - lo] {
        return Ok(inputs.iter().map(|v| zeros(v)).collect());
    }

    let wanted: std::collections::HashSet<usize> = input_ids.iter().copied().collect();
    let mut found: HashMap<usize, Var> = HashMap::new();
    let mut acc: Vec<Option<Var>> = vec![None; out_id + 1 - lo];
    acc[out_id - lo] = Some(Var::constant(Tensor::ones(output.shape(), output.precision())));

    for id in (lo..=out_id).rev() {
        let Some(g) = acc[id - lo].take() else { continue };
        if wanted.contains(&id) {
            found.insert(id, g.clone());
        }
        let (op, parents, value) = {
            let nodes = tape.inner.nodes.borrow();
            let node = &nodes[id];
            (node.op.clone(), node.parents.clone(), node.value.clone())
        };
        if op == Op::Leaf {
            continue;
        }
        let needed: Vec<bool> = parents
            .iter()
            .map(|p| p.id.is_some_and(|pid| pid >= lo && reaches[pid - lo]))
            .collect();
        if !needed.iter().any(|n| *n) {
            continue;
        }
        let attach = |value: Rc<Tensor>, id: Option<usize>| Var {
            value,
            node: if create_graph {
                id.map(|id| NodeRef { tape: tape.clone(), id })
            } else {
                None
            },
        };
        let parent_vars: Vec<Var> = parents.iter().map(|p| attach(p.value.clone(), p.id)).collect();
        let out_var = attach(value, Some(id));
        let g = if create_graph { g } else { g.detach() };
        let contributions = vjp(&op, &parent_vars, &out_var, &g, &needed)?;
        for ((p, need), contrib) in parents.iter().zip(&needed).zip(contributions) {
            let (Some(pid), true, Some(c)) = (p.id, *need, contrib) else { continue };
            let slot = &mut acc[pid - lo];
            *slot = Some(match slot.take() {
                Some(prev) => prev.add(&c)?,
                None => c,
            });
        }
    }

    Ok(inputs
        .iter()
        .zip(&input_ids)
        .map(|(v, id)| found.get(id).cloned().unwrap_or_else(|| zeros(v)))
        .collect())
}

/// Concatenates variables along `axis`.
pub fn concat(parts: &[Var], axis: usize) -> Result<Var> {
    let refs: Vec<&Var> = parts.iter().collect();
    Var::apply(Op::Concat(axis), &refs)
}
