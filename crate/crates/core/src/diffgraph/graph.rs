use std::sync::Arc;

use ndarray::Array2;

use super::backward::{self, Builder};
use super::kernels;
use super::tape::Tape;
use super::Shape;
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`] or [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Primitive operation recorded for one node. Operands always precede the
/// node that uses them.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Op {
    Input,
    Constant,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Relu(Var),
    Square(Var),
    /// Sum of all elements, shape `(1, 1)`.
    Sum(Var),
    /// Sum over the broadcast axes so the result has the given shape.
    SumTo(Var, Shape),
    BroadcastTo(Var, Shape),
    MatMul(Var, Var),
    Transpose(Var),
    Max(Var, Var),
    /// `cond > 0 ? a : b`, elementwise; `cond` is not differentiated.
    Select(Var, Var, Var),
    /// Row-major window of `len = shape.0 * shape.1` elements starting at a
    /// flat offset of the source.
    Slice {
        src: Var,
        offset: usize,
        shape: Shape,
    },
    /// Inverse of `Slice`: writes the source into zeros of `shape`.
    Scatter {
        src: Var,
        offset: usize,
        shape: Shape,
    },
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Constant => "constant",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Neg(_) => "neg",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Tanh(_) => "tanh",
            Op::Relu(_) => "relu",
            Op::Square(_) => "square",
            Op::Sum(_) => "sum",
            Op::SumTo(..) => "sum_to",
            Op::BroadcastTo(..) => "broadcast_to",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Max(..) => "max",
            Op::Select(..) => "select",
            Op::Slice { .. } => "slice",
            Op::Scatter { .. } => "scatter",
        }
    }

    pub fn operands(&self) -> impl Iterator<Item = Var> {
        let ops: [Option<Var>; 3] = match *self {
            Op::Input | Op::Constant => [None, None, None],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::MatMul(a, b)
            | Op::Max(a, b) => [Some(a), Some(b), None],
            Op::Neg(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Tanh(a)
            | Op::Relu(a)
            | Op::Square(a)
            | Op::Sum(a)
            | Op::SumTo(a, _)
            | Op::BroadcastTo(a, _)
            | Op::Transpose(a) => [Some(a), None, None],
            Op::Select(c, a, b) => [Some(c), Some(a), Some(b)],
            Op::Slice { src, .. } | Op::Scatter { src, .. } => [Some(src), None, None],
        };
        ops.into_iter().flatten()
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Node {
    pub(crate) op: Op,
    pub(crate) value: Arc<Array2<f64>>,
}

/// Evaluates a non-leaf op against already computed node values.
pub(crate) fn evaluate(op: Op, nodes: &[Node]) -> Array2<f64> {
    let v = |x: Var| -> &Array2<f64> { &nodes[x.0].value };
    match op {
        Op::Input | Op::Constant => unreachable!("leaves carry their own values"),
        Op::Add(a, b) => kernels::zip_with(v(a), v(b), |x, y| x + y),
        Op::Sub(a, b) => kernels::zip_with(v(a), v(b), |x, y| x - y),
        Op::Mul(a, b) => kernels::zip_with(v(a), v(b), |x, y| x * y),
        Op::Div(a, b) => kernels::zip_with(v(a), v(b), |x, y| x / y),
        Op::Max(a, b) => kernels::zip_with(v(a), v(b), |x, y| if x >= y { x } else { y }),
        Op::Neg(a) => v(a).mapv(|x| -x),
        Op::Exp(a) => v(a).mapv(f64::exp),
        Op::Log(a) => v(a).mapv(f64::ln),
        Op::Tanh(a) => v(a).mapv(f64::tanh),
        Op::Relu(a) => v(a).mapv(kernels::relu),
        Op::Square(a) => v(a).mapv(|x| x * x),
        Op::Sum(a) => Array2::from_elem((1, 1), v(a).sum()),
        Op::SumTo(a, shape) => kernels::sum_to(v(a), shape),
        Op::BroadcastTo(a, shape) => kernels::broadcast_to(v(a), shape),
        Op::MatMul(a, b) => kernels::matmul(v(a), v(b)),
        Op::Transpose(a) => kernels::transpose(v(a)),
        Op::Select(c, a, b) => kernels::select(v(c), v(a), v(b)),
        Op::Slice { src, offset, shape } => kernels::slice(v(src), offset, shape),
        Op::Scatter { src, offset, shape } => kernels::scatter(v(src), offset, shape),
    }
}

/// Single-writer recording of a computation.
///
/// Every operation is evaluated eagerly and appended; the value of any node
/// can be read back with [`Graph::value`]. Shape mismatches between operands
/// are programming errors and panic, the same way `ndarray` does. Non-finite
/// results are remembered and reported by [`Graph::finish`].
///
/// [`Graph::grad`] appends the backward pass to the same graph, so the
/// resulting gradient nodes can themselves be differentiated.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    pub(crate) nodes: Vec<Node>,
    pub(crate) inputs: Vec<Var>,
    nonfinite: Option<(usize, &'static str)>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub(crate) fn from_parts(nodes: Vec<Node>, inputs: Vec<Var>) -> Self {
        let mut graph = Self {
            nodes,
            inputs,
            nonfinite: None,
        };
        graph.nonfinite = graph
            .nodes
            .iter()
            .enumerate()
            .find(|(_, n)| !n.value.iter().all(|x| x.is_finite()))
            .map(|(i, n)| (i, n.op.name()));
        graph
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Differentiation roots in creation order.
    pub fn inputs(&self) -> &[Var] {
        &self.inputs
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        let value = self.value(v);
        assert_eq!(value.dim(), (1, 1), "node {} is not a scalar", v.0);
        value[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.dim()
    }

    pub fn op(&self, v: Var) -> Op {
        self.nodes[v.0].op
    }

    fn push_value(&mut self, op: Op, value: Array2<f64>) -> Var {
        let id = self.nodes.len();
        if self.nonfinite.is_none() && !value.iter().all(|x| x.is_finite()) {
            self.nonfinite = Some((id, op.name()));
        }
        self.nodes.push(Node {
            op,
            value: Arc::new(kernels::standard(value)),
        });
        Var(id)
    }

    fn push(&mut self, op: Op) -> Var {
        let value = evaluate(op, &self.nodes);
        self.push_value(op, value)
    }

    /// Registers a differentiation root.
    pub fn input(&mut self, value: Array2<f64>) -> Var {
        let v = self.push_value(Op::Input, value);
        self.inputs.push(v);
        v
    }

    pub fn input_row(&mut self, values: &[f64]) -> Var {
        self.input(row(values))
    }

    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push_value(Op::Constant, value)
    }

    pub fn scalar(&mut self, c: f64) -> Var {
        self.constant(Array2::from_elem((1, 1), c))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.check_broadcast("add", a, b);
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.check_broadcast("sub", a, b);
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.check_broadcast("mul", a, b);
        self.push(Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.check_broadcast("div", a, b);
        self.push(Op::Div(a, b))
    }

    pub fn max(&mut self, a: Var, b: Var) -> Var {
        self.check_broadcast("max", a, b);
        self.push(Op::Max(a, b))
    }

    pub fn min(&mut self, a: Var, b: Var) -> Var {
        let na = self.neg(a);
        let nb = self.neg(b);
        let m = self.max(na, nb);
        self.neg(m)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.push(Op::Neg(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.push(Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.push(Op::Log(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.push(Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.push(Op::Relu(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.push(Op::Square(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        self.push(Op::Sum(a))
    }

    pub fn sum_to(&mut self, a: Var, shape: Shape) -> Var {
        if self.shape(a) == shape {
            return a;
        }
        self.push(Op::SumTo(a, shape))
    }

    pub fn broadcast_to(&mut self, a: Var, shape: Shape) -> Var {
        if self.shape(a) == shape {
            return a;
        }
        self.push(Op::BroadcastTo(a, shape))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert_eq!(sa.1, sb.0, "matmul: {sa:?} x {sb:?}");
        self.push(Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        self.push(Op::Transpose(a))
    }

    pub fn select(&mut self, cond: Var, a: Var, b: Var) -> Var {
        self.push(Op::Select(cond, a, b))
    }

    pub fn slice(&mut self, src: Var, offset: usize, shape: Shape) -> Var {
        self.push(Op::Slice { src, offset, shape })
    }

    pub fn scatter(&mut self, src: Var, offset: usize, shape: Shape) -> Var {
        self.push(Op::Scatter { src, offset, shape })
    }

    /// `sum(a * b)`.
    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        let p = self.mul(a, b);
        self.sum(p)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let c = self.scalar(c);
        self.mul(a, c)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let hi = self.scalar(hi);
        let lo = self.scalar(lo);
        let upper = self.min(a, hi);
        self.max(upper, lo)
    }

    /// Differentiable gradient of the scalar `output` with respect to `wrt`.
    ///
    /// The backward pass is appended to this graph, so every returned node
    /// can be used in further computation and differentiated again.
    pub fn grad(&mut self, output: Var, wrt: &[Var]) -> Result<Vec<Var>> {
        check_scalar(self.shape(output), output)?;
        Ok(backward::backward(self, output, wrt))
    }

    /// Freezes the recording. Fails if any node produced a non-finite value.
    pub fn finish(self) -> Result<Tape> {
        if let Some((node, op)) = self.nonfinite {
            return Err(Error::NumericDomain { node, op });
        }
        Ok(Tape::from_parts(self.nodes, self.inputs))
    }

    /// First node that produced a non-finite value, if any.
    pub fn nonfinite_node(&self) -> Option<(usize, &'static str)> {
        self.nonfinite
    }

    fn check_broadcast(&self, what: &str, a: Var, b: Var) {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert!(
            kernels::broadcast_shape(sa, sb).is_some(),
            "{what}: shapes {sa:?} and {sb:?} do not broadcast"
        );
    }
}

pub(crate) fn check_scalar(shape: Shape, output: Var) -> Result<()> {
    if shape != (1, 1) {
        return Err(Error::Contract(format!(
            "gradient requires a scalar output, node {} has shape {:?}",
            output.0, shape
        )));
    }
    Ok(())
}

/// `1 x n` array from a slice.
pub fn row(values: &[f64]) -> Array2<f64> {
    Array2::from_shape_vec((1, values.len()), values.to_vec()).expect("row shape")
}

impl Builder for Graph {
    type T = Var;

    fn op_of(&self, v: Var) -> Op {
        self.nodes[v.0].op
    }

    fn node_value(&self, v: Var) -> Arc<Array2<f64>> {
        self.nodes[v.0].value.clone()
    }

    fn lift(&mut self, v: Var) -> Var {
        v
    }

    fn shape_of(&self, t: &Var) -> Shape {
        self.shape(*t)
    }

    fn constant(&mut self, a: Array2<f64>) -> Var {
        Graph::constant(self, a)
    }

    fn add(&mut self, a: &Var, b: &Var) -> Var {
        Graph::add(self, *a, *b)
    }

    fn sub(&mut self, a: &Var, b: &Var) -> Var {
        Graph::sub(self, *a, *b)
    }

    fn mul(&mut self, a: &Var, b: &Var) -> Var {
        Graph::mul(self, *a, *b)
    }

    fn div(&mut self, a: &Var, b: &Var) -> Var {
        Graph::div(self, *a, *b)
    }

    fn neg(&mut self, a: &Var) -> Var {
        Graph::neg(self, *a)
    }

    fn square(&mut self, a: &Var) -> Var {
        Graph::square(self, *a)
    }

    fn sum_to(&mut self, a: &Var, shape: Shape) -> Var {
        Graph::sum_to(self, *a, shape)
    }

    fn broadcast_to(&mut self, a: &Var, shape: Shape) -> Var {
        Graph::broadcast_to(self, *a, shape)
    }

    fn matmul_nt(&mut self, a: &Var, b: &Var) -> Var {
        let bt = Graph::transpose(self, *b);
        Graph::matmul(self, *a, bt)
    }

    fn matmul_tn(&mut self, a: &Var, b: &Var) -> Var {
        let at = Graph::transpose(self, *a);
        Graph::matmul(self, at, *b)
    }

    fn transpose(&mut self, a: &Var) -> Var {
        Graph::transpose(self, *a)
    }

    fn slice(&mut self, a: &Var, offset: usize, shape: Shape) -> Var {
        Graph::slice(self, *a, offset, shape)
    }

    fn scatter(&mut self, a: &Var, offset: usize, shape: Shape) -> Var {
        Graph::scatter(self, *a, offset, shape)
    }
}
