//! Tape-based reverse-mode automatic differentiation.
//!
//! Operations evaluate eagerly and append a node to the [`Tape`]; a node only
//! ever references earlier nodes, so the tape is already in topological order
//! and [`Tape::backward`] is a single reverse sweep.

use std::sync::atomic::{AtomicBool, Ordering};

use thiserror::Error;

use crate::tensor::{self, ShapeError, Tensor};

/// Inputs to `log` are clamped from below at this value.
pub const LOG_FLOOR: f64 = 1e-12;

static CORRUPT_TANH_BACKWARD: AtomicBool = AtomicBool::new(false);

/// Test hook: perturbs the tanh backward rule so gradient checks can be shown
/// to detect a wrong derivative. Process-global.
#[doc(hidden)]
pub fn set_corrupt_tanh_backward(on: bool) {
    CORRUPT_TANH_BACKWARD.store(on, Ordering::SeqCst);
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TapeError {
    #[error("node {node} ({op}): {source}")]
    Shape {
        node: usize,
        op: &'static str,
        #[source]
        source: ShapeError,
    },
    #[error("backward needs a scalar output, node {node} has shape {shape:?}")]
    NonScalar { node: usize, shape: Vec<usize> },
    #[error("replay override for node {node} is not a leaf")]
    NotALeaf { node: usize },
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    Constant,
    Param,
    MatMul,
    Add,
    Sub,
    Mul,
    Exp,
    Log,
    Sigmoid,
    Tanh,
    Softplus,
    Sum,
    SumAxis(usize),
    Mean,
    Slice { axis: usize, start: usize, len: usize },
    Concat { axis: usize },
    Reshape(Vec<usize>),
    Transpose,
    Scale(f64),
    Clamp { lo: f64, hi: f64 },
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Param => "param",
            Op::MatMul => "matmul",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Sigmoid => "sigmoid",
            Op::Tanh => "tanh",
            Op::Softplus => "softplus",
            Op::Sum => "sum",
            Op::SumAxis(_) => "sum_axis",
            Op::Mean => "mean",
            Op::Slice { .. } => "slice",
            Op::Concat { .. } => "concat",
            Op::Reshape(_) => "reshape",
            Op::Transpose => "transpose",
            Op::Scale(_) => "scale",
            Op::Clamp { .. } => "clamp",
        }
    }

    fn is_leaf(&self) -> bool {
        matches!(self, Op::Constant | Op::Param)
    }

    /// Forward rule shared by eager evaluation and replay.
    fn eval(&self, xs: &[&Tensor]) -> Result<Tensor, ShapeError> {
        Ok(match self {
            Op::Constant | Op::Param => unreachable!("leaves carry their own value"),
            Op::MatMul => xs[0].matmul(xs[1])?,
            Op::Add => xs[0].add(xs[1])?,
            Op::Sub => xs[0].sub(xs[1])?,
            Op::Mul => xs[0].mul(xs[1])?,
            Op::Exp => xs[0].map(f64::exp),
            Op::Log => xs[0].map(|v| v.max(LOG_FLOOR).ln()),
            Op::Sigmoid => xs[0].map(tensor::sigmoid),
            Op::Tanh => xs[0].map(f64::tanh),
            Op::Softplus => xs[0].map(tensor::softplus),
            Op::Sum => Tensor::scalar(xs[0].sum()),
            Op::SumAxis(axis) => xs[0].sum_axis(*axis)?,
            Op::Mean => {
                if xs[0].is_empty() {
                    return Err(ShapeError::Invalid {
                        op: "mean",
                        detail: "mean of an empty tensor".into(),
                    });
                }
                Tensor::scalar(xs[0].mean())
            }
            Op::Slice { axis, start, len } => xs[0].slice(*axis, *start, *len)?,
            Op::Concat { axis } => Tensor::concat(xs, *axis)?,
            Op::Reshape(shape) => xs[0].reshape(shape)?,
            Op::Transpose => xs[0].transpose()?,
            Op::Scale(c) => xs[0].scale(*c),
            Op::Clamp { lo, hi } => xs[0].map(|v| v.clamp(*lo, *hi)),
        })
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    inputs: Vec<usize>,
    value: Tensor,
}

#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<usize>,
}

/// Gradients of one scalar with respect to every node that reaches it.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient for `v`, zeros when `v` does not influence the output.
    pub fn wrt(&self, v: Var) -> Tensor {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Scalar value of a one-element node.
    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    pub fn op(&self, v: Var) -> &Op {
        &self.nodes[v.0].op
    }

    pub fn inputs(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].inputs
    }

    /// Registered parameter leaves in registration order.
    pub fn params(&self) -> Vec<Var> {
        self.params.iter().map(|&i| Var(i)).collect()
    }

    fn leaf(&mut self, op: Op, t: Tensor) -> Var {
        self.nodes.push(Node {
            op,
            inputs: vec![],
            value: t,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(Op::Constant, t)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    /// Leaf whose gradient is reported by [`Tape::backward`].
    pub fn param(&mut self, t: Tensor) -> Var {
        let v = self.leaf(Op::Param, t);
        self.params.push(v.0);
        v
    }

    fn push(&mut self, op: Op, inputs: &[Var]) -> Result<Var, TapeError> {
        let node = self.nodes.len();
        let xs: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
        let value = op.eval(&xs).map_err(|source| TapeError::Shape {
            node,
            op: op.name(),
            source,
        })?;
        self.nodes.push(Node {
            op,
            inputs: inputs.iter().map(|v| v.0).collect(),
            value,
        });
        Ok(Var(node))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TapeError> {
        self.push(Op::MatMul, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TapeError> {
        self.push(Op::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TapeError> {
        self.push(Op::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TapeError> {
        self.push(Op::Mul, &[a, b])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, TapeError> {
        self.push(Op::Exp, &[a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var, TapeError> {
        self.push(Op::Log, &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, TapeError> {
        self.push(Op::Sigmoid, &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, TapeError> {
        self.push(Op::Tanh, &[a])
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var, TapeError> {
        self.push(Op::Softplus, &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, TapeError> {
        self.push(Op::Sum, &[a])
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var, TapeError> {
        self.push(Op::SumAxis(axis), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, TapeError> {
        self.push(Op::Mean, &[a])
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var, TapeError> {
        self.push(Op::Slice { axis, start, len }, &[a])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, TapeError> {
        self.push(Op::Concat { axis }, parts)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, TapeError> {
        self.push(Op::Reshape(shape.to_vec()), &[a])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, TapeError> {
        self.push(Op::Transpose, &[a])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var, TapeError> {
        self.push(Op::Scale(c), &[a])
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var, TapeError> {
        self.push(Op::Clamp { lo, hi }, &[a])
    }

    pub fn neg(&mut self, a: Var) -> Result<Var, TapeError> {
        self.scale(a, -1.0)
    }

    /// `a + c` for a constant `c`.
    pub fn add_const(&mut self, a: Var, c: f64) -> Result<Var, TapeError> {
        let k = self.scalar(c);
        self.add(a, k)
    }

    pub fn square(&mut self, a: Var) -> Result<Var, TapeError> {
        self.mul(a, a)
    }

    /// Reverse sweep from a one-element output.
    pub fn backward(&self, output: Var) -> Result<Gradients, TapeError> {
        let out = &self.nodes[output.0];
        if out.value.len() != 1 {
            return Err(TapeError::NonScalar {
                node: output.0,
                shape: out.value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Tensor::ones(out.value.shape()));
        let corrupt_tanh = CORRUPT_TANH_BACKWARD.load(Ordering::SeqCst);

        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let contribs = self
                .local_grads(node, &g, corrupt_tanh)
                .map_err(|source| TapeError::Shape {
                    node: i,
                    op: node.op.name(),
                    source,
                })?;
            for (&input, contrib) in node.inputs.iter().zip(contribs) {
                grads[input] = Some(match grads[input].take() {
                    None => contrib,
                    Some(acc) => acc.add(&contrib).map_err(|source| TapeError::Shape {
                        node: i,
                        op: "accumulate",
                        source,
                    })?,
                });
            }
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn local_grads(&self, node: &Node, g: &Tensor, corrupt_tanh: bool) -> Result<Vec<Tensor>, ShapeError> {
        let x = |k: usize| &self.nodes[node.inputs[k]].value;
        let y = &node.value;
        Ok(match &node.op {
            Op::Constant | Op::Param => vec![],
            Op::MatMul => vec![
                g.matmul(&x(1).transpose()?)?,
                x(0).transpose()?.matmul(g)?,
            ],
            Op::Add => vec![g.sum_to_shape(x(0).shape()), g.sum_to_shape(x(1).shape())],
            Op::Sub => vec![
                g.sum_to_shape(x(0).shape()),
                g.scale(-1.0).sum_to_shape(x(1).shape()),
            ],
            Op::Mul => vec![
                g.mul(x(1))?.sum_to_shape(x(0).shape()),
                g.mul(x(0))?.sum_to_shape(x(1).shape()),
            ],
            Op::Exp => vec![g.mul(y)?],
            Op::Log => vec![g.zip_with(x(0), "log'", |gi, xi| if xi > LOG_FLOOR { gi / xi } else { 0.0 })?],
            Op::Sigmoid => vec![g.zip_with(y, "sigmoid'", |gi, s| gi * s * (1.0 - s))?],
            Op::Tanh => {
                let k = if corrupt_tanh { 1.01 } else { 1.0 };
                vec![g.zip_with(y, "tanh'", |gi, t| k * gi * (1.0 - t * t))?]
            }
            Op::Softplus => vec![g.zip_with(x(0), "softplus'", |gi, xi| gi * tensor::sigmoid(xi))?],
            Op::Sum => vec![Tensor::full(x(0).shape(), g.data()[0])],
            Op::SumAxis(_) => vec![Tensor::zeros(x(0).shape()).add(g)?],
            Op::Mean => {
                let n = x(0).len() as f64;
                vec![Tensor::full(x(0).shape(), g.data()[0] / n)]
            }
            Op::Slice { axis, start, len } => {
                let shape = x(0).shape();
                let mut before = shape.to_vec();
                before[*axis] = *start;
                let mut after = shape.to_vec();
                after[*axis] = shape[*axis] - start - len;
                vec![Tensor::concat(&[&Tensor::zeros(&before), g, &Tensor::zeros(&after)], *axis)?]
            }
            Op::Concat { axis } => {
                let mut start = 0;
                let mut out = Vec::with_capacity(node.inputs.len());
                for k in 0..node.inputs.len() {
                    let len = x(k).shape()[*axis];
                    out.push(g.slice(*axis, start, len)?);
                    start += len;
                }
                out
            }
            Op::Reshape(_) => vec![g.reshape(x(0).shape())?],
            Op::Transpose => vec![g.transpose()?],
            Op::Scale(c) => vec![g.scale(*c)],
            Op::Clamp { lo, hi } => {
                vec![g.zip_with(x(0), "clamp'", |gi, xi| if xi >= *lo && xi <= *hi { gi } else { 0.0 })?]
            }
        })
    }

    /// Re-evaluates the whole tape with some leaves replaced, returning every
    /// node value. With no overrides this reproduces the recorded values
    /// bit for bit.
    pub fn replay(&self, overrides: &[(Var, Tensor)]) -> Result<Vec<Tensor>, TapeError> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for (i, node) in self.nodes.iter().enumerate() {
            let value = if node.op.is_leaf() {
                match overrides.iter().find(|(v, _)| v.0 == i) {
                    Some((_, t)) => {
                        if t.shape() != node.value.shape() {
                            return Err(TapeError::Shape {
                                node: i,
                                op: node.op.name(),
                                source: ShapeError::Incompatible {
                                    op: "replay",
                                    lhs: node.value.shape().to_vec(),
                                    rhs: t.shape().to_vec(),
                                },
                            });
                        }
                        t.clone()
                    }
                    None => node.value.clone(),
                }
            } else {
                let xs: Vec<&Tensor> = node.inputs.iter().map(|&k| &values[k]).collect();
                node.op.eval(&xs).map_err(|source| TapeError::Shape {
                    node: i,
                    op: node.op.name(),
                    source,
                })?
            };
            values.push(value);
        }
        if let Some((v, _)) = overrides.iter().find(|(v, _)| !self.nodes[v.0].op.is_leaf()) {
            return Err(TapeError::NotALeaf { node: v.0 });
        }
        Ok(values)
    }
}
